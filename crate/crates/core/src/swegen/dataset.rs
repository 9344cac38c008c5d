//! Dataset generation: a forced, damped shallow-water run sampled every
//! output interval into seven input channels and one target channel.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array4, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forcing::{check_ar, Atmosphere};
use super::{Ar1Field, ForcingConfig, Spectral, Stress, SweParams, SweSolver, SweState};
use crate::error::{Error, Result};
use crate::grid::{read_fst, read_mask, write_fst, write_mask, FieldStack, Grid, LandMask};

/// Model input channels, in order.
pub const INPUT_CHANNELS: [&str; 7] = ["sea_level", "sst", "sss", "slp", "u_wind", "v_wind", "depth"];
/// Model output channels.
pub const TARGET_CHANNELS: [&str; 1] = ["sea_level"];
/// The prognostic channel fed back during rollouts.
pub const STATE_CHANNEL: &str = "sea_level";

/// Rectangular land block `[y0, y1) x [x0, x1)`, used only by the loss and
/// metrics. The dynamics ignore it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl MaskRect {
    pub fn to_mask(&self, grid: &Grid) -> Result<LandMask> {
        if self.y0 >= self.y1 || self.x0 >= self.x1 {
            return Err(Error::invalid("empty land rectangle"));
        }
        LandMask::rectangle(grid, self.y0..self.y1, self.x0..self.x1)
    }
}

fn default_spinup() -> usize {
    100
}
fn default_tracer_damping() -> f64 {
    0.05
}
fn default_tracer_ar() -> f64 {
    0.99
}
fn default_tracer_amp() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub swe: SweParams,
    #[serde(default)]
    pub forcing: ForcingConfig,
    /// Stored output slices.
    pub n_steps: usize,
    /// Output intervals run and discarded before the first stored slice.
    #[serde(default = "default_spinup")]
    pub spinup: usize,
    /// Relaxation rate of the two tracers.
    #[serde(default = "default_tracer_damping")]
    pub tracer_damping: f64,
    /// Lag-one coefficient of the tracer sources per output interval.
    #[serde(default = "default_tracer_ar")]
    pub tracer_ar: f64,
    #[serde(default = "default_tracer_amp")]
    pub tracer_amplitude: f64,
    #[serde(default)]
    pub mask: Option<MaskRect>,
}

impl DatasetConfig {
    pub fn desk(n: usize, n_steps: usize) -> Self {
        DatasetConfig {
            swe: SweParams::desk(n),
            forcing: ForcingConfig::default(),
            n_steps,
            spinup: default_spinup(),
            tracer_damping: default_tracer_damping(),
            tracer_ar: default_tracer_ar(),
            tracer_amplitude: default_tracer_amp(),
            mask: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.forcing.validate()?;
        check_ar(self.tracer_ar)?;
        if !(self.tracer_damping >= 0.0 && self.tracer_amplitude >= 0.0) {
            return Err(Error::invalid("tracer damping and amplitude must be >= 0"));
        }
        if let Some(m) = &self.mask {
            m.to_mask(&self.swe.grid()?)?;
        }
        Ok(())
    }
}

/// Input stack, target stack and optional land mask of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: FieldStack,
    pub targets: FieldStack,
    pub mask: Option<LandMask>,
}

/// Passive tracers `dT/dt = -(u, v) . grad T - lambda T + S`, stepped with
/// RK4 under the velocity of the step start.
fn tracer_step(sp: &Spectral, t: &Array2<f64>, u: &Array2<f64>, v: &Array2<f64>, s0: &Array2<f64>, s1: &Array2<f64>, lambda: f64, dt: f64) -> Array2<f64> {
    let rhs = |x: &Array2<f64>, src: &Array2<f64>| {
        let (gx, gy) = sp.gradient(x);
        let mut o = Array2::zeros(x.dim());
        Zip::from(&mut o)
            .and(&gx)
            .and(&gy)
            .and(u)
            .and(v)
            .for_each(|o, &gx, &gy, &u, &v| *o = -(u * gx + v * gy));
        Zip::from(&mut o).and(x).and(src).for_each(|o, &x, &s| *o += s - lambda * x);
        o
    };
    let sm = (s0 + s1) * 0.5;
    let k1 = rhs(t, s0);
    let k2 = rhs(&(t + &(&k1 * (0.5 * dt))), &sm);
    let k3 = rhs(&(t + &(&k2 * (0.5 * dt))), &sm);
    let k4 = rhs(&(t + &(&k3 * dt)), s1);
    let mut o = t.clone();
    Zip::from(&mut o)
        .and(&k1)
        .and(&k2)
        .and(&k3)
        .and(&k4)
        .for_each(|o, &a, &b, &c, &d| *o += dt / 6.0 * (a + 2.0 * b + 2.0 * c + d));
    o
}

fn lerp(a: &Array2<f64>, b: &Array2<f64>, w: f64) -> Array2<f64> {
    a * (1.0 - w) + b * w
}

/// Runs the generator. Forcing is drawn once per output interval and
/// interpolated linearly across the solver substeps; slice `n` stores the
/// state and the forcing at the same instant.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let swe = cfg.swe.build()?;
    let grid = swe.grid;
    let solver = SweSolver::new(swe.clone())?;
    let sp = solver.spectral().clone();
    let mut atm = Atmosphere::new(&cfg.forcing)?;
    let mut forcing_rng = ChaCha8Rng::seed_from_u64(cfg.forcing.seed);
    let mut tracer_rng = ChaCha8Rng::seed_from_u64(cfg.forcing.seed);
    tracer_rng.set_stream(1);
    let mut sources = [
        Ar1Field::new(cfg.tracer_ar, cfg.tracer_amplitude, cfg.forcing.length)?,
        Ar1Field::new(cfg.tracer_ar, cfg.tracer_amplitude, cfg.forcing.length)?,
    ];

    let nt = cfg.n_steps;
    let mut data = Array4::zeros((INPUT_CHANNELS.len(), nt, grid.ny, grid.nx));
    let mut state = SweState::rest(&grid);
    let mut tracers = [Array2::zeros((grid.ny, grid.nx)), Array2::zeros((grid.ny, grid.nx))];
    let total = cfg.spinup + nt;
    if nt > 0 {
        let mut atm_now = atm.next(&sp, &grid, &mut forcing_rng);
        let mut src_now = sources.each_mut().map(|s| s.next(&sp, &grid, &mut tracer_rng));
        let dt = swe.dt_solver;
        let k = cfg.swe.substeps;
        for n in 0..total {
            if n >= cfg.spinup {
                let i = n - cfg.spinup;
                let slices = [
                    &state.eta,
                    &tracers[0],
                    &tracers[1],
                    &atm_now[2],
                    &atm_now[0],
                    &atm_now[1],
                    &swe.depth,
                ];
                for (c, f) in slices.into_iter().enumerate() {
                    data.slice_mut(s![c, i, .., ..]).assign(f);
                }
            }
            if n + 1 == total {
                break;
            }
            let atm_next = atm.next(&sp, &grid, &mut forcing_rng);
            let src_next = sources.each_mut().map(|s| s.next(&sp, &grid, &mut tracer_rng));
            for j in 0..k {
                let (w0, w1) = (j as f64 / k as f64, (j + 1) as f64 / k as f64);
                let a = Stress {
                    fx: lerp(&atm_now[0], &atm_next[0], w0),
                    fy: lerp(&atm_now[1], &atm_next[1], w0),
                };
                let b = Stress {
                    fx: lerp(&atm_now[0], &atm_next[0], w1),
                    fy: lerp(&atm_now[1], &atm_next[1], w1),
                };
                let next = solver.step(&state, Some((&a, &b)))?;
                for (tr, (s0, s1)) in tracers.iter_mut().zip(src_now.iter().zip(&src_next)) {
                    *tr = tracer_step(&sp, tr, &state.u, &state.v, &lerp(s0, s1, w0), &lerp(s0, s1, w1), cfg.tracer_damping, dt);
                }
                state = next;
            }
            if !tracers.iter().all(|t| t.iter().all(|v| v.is_finite())) {
                return Err(Error::numeric(format!("non-finite tracer at output step {n}")));
            }
            atm_now = atm_next;
            src_now = src_next;
        }
    }
    let t0 = cfg.spinup as f64 * cfg.swe.dt_out;
    let names = |c: &[&str]| c.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let targets = data.slice(s![0..1, .., .., ..]).to_owned();
    Ok(Dataset {
        inputs: FieldStack::new(data, names(&INPUT_CHANNELS), cfg.swe.dt_out, t0, grid)?,
        targets: FieldStack::new(targets, names(&TARGET_CHANNELS), cfg.swe.dt_out, t0, grid)?,
        mask: cfg.mask.map(|m| m.to_mask(&grid)).transpose()?,
    })
}

/// Independent runs generated concurrently.
pub fn generate_many(cfgs: &[DatasetConfig]) -> Vec<Result<Dataset>> {
    cfgs.par_iter().map(generate_dataset).collect()
}

/// Files and settings of a written dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub inputs: String,
    pub targets: String,
    pub mask: Option<String>,
    pub input_channels: Vec<String>,
    pub target_channels: Vec<String>,
    pub forcing_seed: u64,
    pub depth_seed: u64,
    pub n_steps: usize,
    pub config: DatasetConfig,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `inputs.fst`, `targets.fst`, optionally `mask.fst`, and
/// `manifest.json` into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, ds: &Dataset, cfg: &DatasetConfig) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_fst(dir.join("inputs.fst"), &ds.inputs)?;
    write_fst(dir.join("targets.fst"), &ds.targets)?;
    let mask = match &ds.mask {
        Some(m) => {
            write_mask(dir.join("mask.fst"), m, ds.inputs.grid())?;
            Some("mask.fst".to_string())
        }
        None => None,
    };
    let manifest = Manifest {
        inputs: "inputs.fst".into(),
        targets: "targets.fst".into(),
        mask,
        input_channels: ds.inputs.channels().to_vec(),
        target_channels: ds.targets.channels().to_vec(),
        forcing_seed: cfg.forcing.seed,
        depth_seed: cfg.swe.depth_seed,
        n_steps: cfg.n_steps,
        config: cfg.clone(),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    std::fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(Dataset, Manifest)> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let path = |f: &str| -> PathBuf { dir.join(f) };
    let inputs = read_fst(path(&manifest.inputs))?;
    let targets = read_fst(path(&manifest.targets))?;
    let mask = match &manifest.mask {
        Some(f) => {
            let (m, g) = read_mask(path(f))?;
            if &g != inputs.grid() {
                return Err(Error::format("mask grid differs from the data grid"));
            }
            Some(m)
        }
        None => None,
    };
    if inputs.channels() != manifest.input_channels.as_slice() || targets.channels() != manifest.target_channels.as_slice() {
        return Err(Error::format("stack channels disagree with the manifest"));
    }
    Ok((Dataset { inputs, targets, mask }, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::swegen::gen_forcing;

    fn small(n_steps: usize) -> DatasetConfig {
        let mut c = DatasetConfig::desk(16, n_steps);
        c.spinup = 5;
        c
    }

    #[test]
    fn channel_layout() {
        let ds = generate_dataset(&small(6)).unwrap();
        assert_eq!(ds.inputs.n_channels(), 7);
        assert_eq!(ds.targets.n_channels(), 1);
        assert_eq!(ds.inputs.n_times(), 6);
        assert_eq!(ds.inputs.t0(), 5.0);
        assert_eq!(ds.inputs.channel(0), ds.targets.channel(0));
        let depth = ds.inputs.channel(6);
        assert_eq!(depth.slice(s![0, .., ..]), depth.slice(s![5, .., ..]));
        // Sea level responds to the wind.
        assert!(ds.targets.as_slice().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn forcing_channels_match_standalone_generator() {
        let cfg = DatasetConfig {
            spinup: 0,
            ..small(4)
        };
        let ds = generate_dataset(&cfg).unwrap();
        let grid = ds.inputs.grid();
        let f = gen_forcing(&cfg.forcing, grid, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(cfg.forcing.seed)).unwrap();
        let u = ds.inputs.channel_index("u_wind").unwrap();
        let p = ds.inputs.channel_index("slp").unwrap();
        assert_eq!(ds.inputs.channel(u), f.channel(0));
        assert_eq!(ds.inputs.channel(p), f.channel(2));
    }

    #[test]
    fn zero_steps_gives_empty_stacks() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(0);
        let ds = generate_dataset(&cfg).unwrap();
        assert_eq!(ds.inputs.n_times(), 0);
        write_dataset(dir.path(), &ds, &cfg).unwrap();
        let (back, _) = read_dataset(dir.path()).unwrap();
        assert_eq!(back.inputs.n_times(), 0);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let mut cfg = small(3);
        cfg.mask = Some(MaskRect {
            y0: 0,
            y1: 4,
            x0: 2,
            x1: 6,
        });
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for d in [&a, &b] {
            write_dataset(d.path(), &generate_dataset(&cfg).unwrap(), &cfg).unwrap();
        }
        for f in ["inputs.fst", "targets.fst", "mask.fst", MANIFEST_FILE] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let (ds, m) = read_dataset(a.path()).unwrap();
        assert_eq!(ds.mask.unwrap().ocean_count(), 256 - 16);
        assert_eq!(m.config, cfg);
        let parallel = generate_many(&[cfg.clone(), cfg]);
        assert_eq!(parallel[0].as_ref().unwrap(), parallel[1].as_ref().unwrap());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let bad = r#"{"swe": {"nx": 16, "ny": 16}, "n_steps": 2, "spin_up": 3}"#;
        let err = serde_json::from_str::<DatasetConfig>(bad).unwrap_err().to_string();
        assert!(err.contains("spin_up"), "{err}");
    }
}
