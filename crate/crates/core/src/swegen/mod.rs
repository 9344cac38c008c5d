//! Linearized rotating shallow-water generator.
//!
//! The solver integrates
//!
//! ```text
//! du/dt =  f v - g deta/dx + Fx/(rho0 H) - r u
//! dv/dt = -f u - g deta/dy + Fy/(rho0 H) - r v
//! deta/dt = -div(H (u, v))
//! ```
//!
//! on a doubly periodic grid with RK4 in time and spectral derivatives in
//! space. For flat depth the free waves obey the Poincare dispersion
//! relation returned by [`dispersion_omega`], which the tests use as an
//! oracle for the solver.

mod dataset;
mod forcing;

use std::sync::Arc;

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

pub use dataset::{
    generate_dataset, generate_many, read_dataset, write_dataset, Dataset, DatasetConfig, Manifest, MaskRect,
    INPUT_CHANNELS, MANIFEST_FILE, STATE_CHANNEL, TARGET_CHANNELS,
};
pub use forcing::{gen_forcing, smooth_noise, Ar1Field, ForcingConfig};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::spectral::Fft2;

/// Reference water density used to turn wind stress into acceleration.
pub const RHO0: f64 = 1000.0;

/// Physical setup of the solver.
#[derive(Debug, Clone, PartialEq)]
pub struct SweConfig {
    pub g: f64,
    /// Resting depth `[y, x]`.
    pub depth: Array2<f64>,
    pub f: f64,
    pub r: f64,
    pub dt_solver: f64,
    pub grid: Grid,
}

impl SweConfig {
    pub fn flat(grid: Grid, g: f64, h: f64, f: f64, r: f64, dt_solver: f64) -> Result<Self> {
        let cfg = SweConfig {
            g,
            depth: Array2::from_elem((grid.ny, grid.nx), h),
            f,
            r,
            dt_solver,
            grid,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn max_depth(&self) -> f64 {
        self.depth.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `dt sqrt(g max H) (1/dx + 1/dy)`, which must stay below one.
    pub fn cfl(&self) -> f64 {
        self.dt_solver * (self.g * self.max_depth()).sqrt() * (1.0 / self.grid.dx + 1.0 / self.grid.dy)
    }

    /// Depth value when the bottom is flat.
    pub fn flat_depth(&self) -> Option<f64> {
        let h = self.depth[[0, 0]];
        self.depth.iter().all(|&d| d == h).then_some(h)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(self.grid.periodic_x && self.grid.periodic_y) {
            return Err(Error::invalid("the shallow-water solver needs a doubly periodic grid"));
        }
        if self.depth.dim() != (self.grid.ny, self.grid.nx) {
            return Err(Error::invalid(format!(
                "depth is {:?}, grid is {}x{}",
                self.depth.dim(),
                self.grid.ny,
                self.grid.nx
            )));
        }
        if !self.depth.iter().all(|&h| h > 0.0 && h.is_finite()) {
            return Err(Error::invalid("depth must be positive and finite everywhere"));
        }
        if !(self.g > 0.0 && self.g.is_finite()) || !self.f.is_finite() || !(self.r >= 0.0 && self.r.is_finite()) {
            return Err(Error::invalid("need g > 0, finite f and r >= 0"));
        }
        if !(self.dt_solver > 0.0 && self.dt_solver.is_finite()) {
            return Err(Error::invalid("dt_solver must be positive"));
        }
        let c = self.cfl();
        if c >= 1.0 {
            return Err(Error::invalid(format!("CFL number {c:.3} >= 1")));
        }
        Ok(())
    }
}

/// Sea level, velocities and model time.
#[derive(Debug, Clone, PartialEq)]
pub struct SweState {
    pub eta: Array2<f64>,
    pub u: Array2<f64>,
    pub v: Array2<f64>,
    pub t: f64,
}

impl SweState {
    pub fn rest(grid: &Grid) -> Self {
        let z = Array2::zeros((grid.ny, grid.nx));
        SweState {
            eta: z.clone(),
            u: z.clone(),
            v: z,
            t: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        [&self.eta, &self.u, &self.v].iter().all(|a| a.iter().all(|v| v.is_finite())) && self.t.is_finite()
    }

    pub fn mean_eta(&self) -> f64 {
        self.eta.mean().unwrap_or(0.0)
    }
}

/// Wind stress components `[y, x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stress {
    pub fx: Array2<f64>,
    pub fy: Array2<f64>,
}

/// Angular wavenumbers of a periodic axis, Nyquist set to zero so that
/// derivatives of real fields stay real and antisymmetric.
fn wavenumbers(n: usize, d: f64) -> Vec<f64> {
    let l = n as f64 * d;
    (0..n)
        .map(|i| {
            if n % 2 == 0 && i == n / 2 {
                0.0
            } else {
                let k = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
                2.0 * std::f64::consts::PI * k / l
            }
        })
        .collect()
}

/// Planned spectral derivatives on one grid.
#[derive(Debug, Clone)]
pub struct Spectral {
    fft: Arc<Fft2>,
    kx: Vec<f64>,
    ky: Vec<f64>,
}

impl Spectral {
    pub fn new(grid: &Grid) -> Self {
        Spectral {
            fft: Arc::new(Fft2::new(grid.ny, grid.nx)),
            kx: wavenumbers(grid.nx, grid.dx),
            ky: wavenumbers(grid.ny, grid.dy),
        }
    }

    pub fn fft(&self) -> &Fft2 {
        &self.fft
    }

    /// `(d/dx, d/dy)` of `a`. Both come out of a single inverse transform
    /// since `i*kx*A + i*(i*ky*A)` packs two real results.
    pub fn gradient(&self, a: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let mut s = self.fft.forward_real(a.view());
        for ((y, x), c) in s.indexed_iter_mut() {
            let ddx = Complex64::new(0.0, self.kx[x]) * *c;
            let ddy = Complex64::new(0.0, self.ky[y]) * *c;
            *c = ddx + Complex64::i() * ddy;
        }
        self.fft.inverse(&mut s);
        (s.mapv(|c| c.re), s.mapv(|c| c.im))
    }

    /// `d(p)/dx + d(q)/dy`.
    pub fn divergence(&self, p: &Array2<f64>, q: &Array2<f64>) -> Array2<f64> {
        let mut sp = self.fft.forward_real(p.view());
        let sq = self.fft.forward_real(q.view());
        for (((y, x), a), b) in sp.indexed_iter_mut().zip(sq.iter()) {
            *a = Complex64::new(0.0, self.kx[x]) * *a + Complex64::new(0.0, self.ky[y]) * *b;
        }
        self.fft.inverse_real(sp)
    }
}

/// Planned solver for one configuration.
#[derive(Debug, Clone)]
pub struct SweSolver {
    config: SweConfig,
    spectral: Spectral,
    inv_rho_h: Array2<f64>,
}

struct Tendency {
    eta: Array2<f64>,
    u: Array2<f64>,
    v: Array2<f64>,
}

impl SweSolver {
    pub fn new(config: SweConfig) -> Result<Self> {
        config.validate()?;
        let spectral = Spectral::new(&config.grid);
        let inv_rho_h = config.depth.mapv(|h| 1.0 / (RHO0 * h));
        Ok(SweSolver {
            config,
            spectral,
            inv_rho_h,
        })
    }

    pub fn config(&self) -> &SweConfig {
        &self.config
    }

    pub fn spectral(&self) -> &Spectral {
        &self.spectral
    }

    fn tendency(&self, eta: &Array2<f64>, u: &Array2<f64>, v: &Array2<f64>, stress: Option<(&Array2<f64>, &Array2<f64>)>) -> Tendency {
        let c = &self.config;
        let (ex, ey) = self.spectral.gradient(eta);
        let hu = &c.depth * u;
        let hv = &c.depth * v;
        let div = self.spectral.divergence(&hu, &hv);
        let mut du = Array2::zeros(u.dim());
        let mut dv = Array2::zeros(v.dim());
        Zip::from(&mut du)
            .and(&mut dv)
            .and(u)
            .and(v)
            .and(&ex)
            .and(&ey)
            .for_each(|du, dv, &u, &v, &ex, &ey| {
                *du = c.f * v - c.g * ex - c.r * u;
                *dv = -c.f * u - c.g * ey - c.r * v;
            });
        if let Some((fx, fy)) = stress {
            Zip::from(&mut du).and(fx).and(&self.inv_rho_h).for_each(|d, &s, &k| *d += s * k);
            Zip::from(&mut dv).and(fy).and(&self.inv_rho_h).for_each(|d, &s, &k| *d += s * k);
        }
        Tendency {
            eta: div.mapv(|d| -d),
            u: du,
            v: dv,
        }
    }

    /// One RK4 step. Stress is interpolated linearly between `start` and
    /// `end` of the step.
    pub fn step(&self, state: &SweState, forcing: Option<(&Stress, &Stress)>) -> Result<SweState> {
        let dt = self.config.dt_solver;
        let mid = forcing.map(|(a, b)| Stress {
            fx: (&a.fx + &b.fx) * 0.5,
            fy: (&a.fy + &b.fy) * 0.5,
        });
        let f0 = forcing.map(|(a, _)| (&a.fx, &a.fy));
        let fm = mid.as_ref().map(|m| (&m.fx, &m.fy));
        let f1 = forcing.map(|(_, b)| (&b.fx, &b.fy));

        let add = |a: &Array2<f64>, k: &Array2<f64>, h: f64| {
            let mut o = a.clone();
            o.scaled_add(h, k);
            o
        };
        let k1 = self.tendency(&state.eta, &state.u, &state.v, f0);
        let k2 = self.tendency(
            &add(&state.eta, &k1.eta, 0.5 * dt),
            &add(&state.u, &k1.u, 0.5 * dt),
            &add(&state.v, &k1.v, 0.5 * dt),
            fm,
        );
        let k3 = self.tendency(
            &add(&state.eta, &k2.eta, 0.5 * dt),
            &add(&state.u, &k2.u, 0.5 * dt),
            &add(&state.v, &k2.v, 0.5 * dt),
            fm,
        );
        let k4 = self.tendency(
            &add(&state.eta, &k3.eta, dt),
            &add(&state.u, &k3.u, dt),
            &add(&state.v, &k3.v, dt),
            f1,
        );
        let combine = |x: &Array2<f64>, a: &Array2<f64>, b: &Array2<f64>, c: &Array2<f64>, d: &Array2<f64>| {
            let mut o = x.clone();
            Zip::from(&mut o)
                .and(a)
                .and(b)
                .and(c)
                .and(d)
                .for_each(|o, &a, &b, &c, &d| *o += dt / 6.0 * (a + 2.0 * b + 2.0 * c + d));
            o
        };
        let next = SweState {
            eta: combine(&state.eta, &k1.eta, &k2.eta, &k3.eta, &k4.eta),
            u: combine(&state.u, &k1.u, &k2.u, &k3.u, &k4.u),
            v: combine(&state.v, &k1.v, &k2.v, &k3.v, &k4.v),
            t: state.t + dt,
        };
        if !next.is_finite() {
            return Err(Error::numeric(format!("non-finite shallow-water state at t = {}", next.t)));
        }
        Ok(next)
    }

    /// `E = 1/2 sum (H (u^2 + v^2) + g eta^2) dx dy`.
    pub fn energy(&self, s: &SweState) -> f64 {
        let c = &self.config;
        let mut e = 0.0;
        Zip::from(&c.depth).and(&s.u).and(&s.v).and(&s.eta).for_each(|&h, &u, &v, &eta| {
            e += h * (u * u + v * v) + c.g * eta * eta;
        });
        0.5 * e * c.grid.dx * c.grid.dy
    }
}

/// Convenience wrapper around [`SweSolver::step`].
pub fn swe_step(state: &SweState, forcing: Option<(&Stress, &Stress)>, config: &SweConfig) -> Result<SweState> {
    SweSolver::new(config.clone())?.step(state, forcing)
}

/// Poincare-branch frequency `sqrt(f^2 + g H (kx^2 + ky^2))` for angular
/// wavenumbers on a flat bottom.
pub fn dispersion_omega(kx: f64, ky: f64, config: &SweConfig) -> Result<f64> {
    let h = config
        .flat_depth()
        .ok_or_else(|| Error::invalid("the dispersion relation needs a flat bottom"))?;
    Ok((config.f * config.f + config.g * h * (kx * kx + ky * ky)).sqrt())
}

/// Serializable description of a solver setup in nondimensional desk
/// units (`g H` of order one, unit grid spacing by default).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweParams {
    pub nx: usize,
    pub ny: usize,
    #[serde(default = "one")]
    pub dx: f64,
    #[serde(default = "one")]
    pub dy: f64,
    #[serde(default = "one")]
    pub g: f64,
    /// Mean depth.
    #[serde(default = "one")]
    pub h0: f64,
    /// Relative standard deviation of the random bathymetry.
    #[serde(default)]
    pub depth_variation: f64,
    /// Correlation length of the bathymetry, in grid units of `dx`.
    #[serde(default = "default_depth_length")]
    pub depth_length: f64,
    #[serde(default = "default_f")]
    pub f: f64,
    #[serde(default = "default_r")]
    pub r: f64,
    /// Output sampling interval.
    #[serde(default = "one")]
    pub dt_out: f64,
    /// Solver steps per output interval.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default)]
    pub depth_seed: u64,
}

fn one() -> f64 {
    1.0
}
fn default_depth_length() -> f64 {
    8.0
}
fn default_f() -> f64 {
    0.1
}
fn default_r() -> f64 {
    0.02
}
fn default_substeps() -> usize {
    8
}

impl SweParams {
    /// Square grid of side `n` with the default physical constants.
    pub fn desk(n: usize) -> Self {
        SweParams {
            nx: n,
            ny: n,
            dx: 1.0,
            dy: 1.0,
            g: 1.0,
            h0: 1.0,
            depth_variation: 0.2,
            depth_length: default_depth_length(),
            f: default_f(),
            r: default_r(),
            dt_out: 1.0,
            substeps: default_substeps(),
            depth_seed: 0,
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::periodic(self.nx, self.ny, self.dx, self.dy)
    }

    /// Builds the solver configuration; bathymetry is a smoothed random
    /// field drawn from `depth_seed`, clipped at a tenth of `h0`.
    pub fn build(&self) -> Result<SweConfig> {
        if self.substeps == 0 {
            return Err(Error::invalid("substeps must be >= 1"));
        }
        if !(self.dt_out > 0.0 && self.dt_out.is_finite()) {
            return Err(Error::invalid("dt_out must be positive"));
        }
        if !(self.depth_variation >= 0.0) {
            return Err(Error::invalid("depth_variation must be >= 0"));
        }
        let grid = self.grid()?;
        let mut depth = Array2::from_elem((grid.ny, grid.nx), self.h0);
        if self.depth_variation > 0.0 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.depth_seed);
            let s = smooth_noise(&Spectral::new(&grid), &grid, self.depth_length, &mut rng);
            Zip::from(&mut depth)
                .and(&s)
                .for_each(|h, &s| *h = (self.h0 * (1.0 + self.depth_variation * s)).max(0.1 * self.h0));
        }
        let cfg = SweConfig {
            g: self.g,
            depth,
            f: self.f,
            r: self.r,
            dt_solver: self.dt_out / self.substeps as f64,
            grid,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}


/// Standard-normal draw shared by the noise generators.
pub(crate) fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}
