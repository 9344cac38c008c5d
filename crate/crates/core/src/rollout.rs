//! Autoregressive rollouts under prescribed forcing and the spin-up
//! sensitivity harness.
//!
//! A rollout starts from `tau` slices of a source stack. After each model
//! call the first `stride` predicted sea-level slices are appended to the
//! state history; the next input window takes its sea level from that
//! history and every other channel (forcing, tracers, depth) from the
//! source at the same timestamps.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{denormalize, normalize, FieldStack, LandMask};
use crate::operator::{Model, Variant};
use crate::swegen::{smooth_noise, Spectral, STATE_CHANNEL};
use crate::training::{Checkpoint, NormStats};

/// A model together with the statistics that map physical fields to its
/// normalized inputs and back.
#[derive(Debug, Clone)]
pub struct Emulator {
    model: Model,
    stats: NormStats,
    state_in: usize,
    state_out: usize,
}

impl Emulator {
    pub fn new(model: Model, stats: NormStats) -> Result<Self> {
        let cfg = model.config();
        if stats.inputs.channels != cfg.in_channels || stats.targets.channels != cfg.out_channels {
            return Err(Error::invalid("normalization statistics do not match the model channels"));
        }
        let find = |c: &[String]| c.iter().position(|n| n == STATE_CHANNEL);
        let (Some(state_in), Some(state_out)) = (find(&cfg.in_channels), find(&cfg.out_channels)) else {
            return Err(Error::invalid(format!("model must read and predict {STATE_CHANNEL:?}")));
        };
        Ok(Emulator {
            model,
            stats,
            state_in,
            state_out,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Self::new(ck.model.clone(), ck.stats.clone())
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn tau(&self) -> usize {
        self.model.config().tau
    }

    /// Physical-units forecast of a `tau`-slice window whose channels
    /// match the model inputs.
    pub fn forecast(&self, window: &FieldStack) -> Result<FieldStack> {
        let x = normalize(window, &self.stats.inputs)?;
        denormalize(&self.model.forward_fields(&x)?, &self.stats.targets)
    }

    /// Largest normalized magnitude of the predicted state.
    fn normalized_peak(&self, pred: &FieldStack) -> f64 {
        let (m, sd) = (self.stats.targets.mean[self.state_out], self.stats.targets.std[self.state_out]);
        pred.channel(self.state_out)
            .iter()
            .fold(0.0f64, |a, &v| if v.is_finite() { a.max(((v - m) / sd).abs()) } else { f64::INFINITY })
    }
}

fn default_blowup() -> f64 {
    1e3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    /// Predicted slices.
    pub horizon: usize,
    /// Slices consumed per model call; defaults to `tau`.
    #[serde(default)]
    pub stride: Option<usize>,
    /// Source index of the first slice of the initial window.
    #[serde(default)]
    pub origin: usize,
    /// Normalized magnitude beyond which a rollout counts as diverged.
    #[serde(default = "default_blowup")]
    pub blowup: f64,
}

impl RolloutConfig {
    pub fn new(horizon: usize, origin: usize) -> Self {
        RolloutConfig {
            horizon,
            stride: None,
            origin,
            blowup: default_blowup(),
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = Some(stride);
        self
    }

    fn stride_for(&self, variant: Variant, tau: usize) -> Result<usize> {
        let s = self.stride.unwrap_or(tau);
        let ok = match variant {
            Variant::Fno => s == 1,
            Variant::Fnotd => (1..=tau).contains(&s),
        };
        if !ok {
            return Err(Error::invalid(format!("stride {s} not allowed for {variant} with tau {tau}")));
        }
        Ok(s)
    }

    /// Source slices needed from the origin on.
    pub fn span(&self, tau: usize, stride: usize) -> usize {
        if self.horizon == 0 {
            tau
        } else {
            (self.horizon.div_ceil(stride) - 1) * stride + tau
        }
    }
}

/// Where and why a rollout stopped early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutFailure {
    /// Zero-based index of the first prediction that was not produced.
    pub step: usize,
    pub time: f64,
    pub reason: String,
}

/// Predicted sea level, possibly truncated by a failure.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutReport {
    pub prediction: FieldStack,
    pub failure: Option<RolloutFailure>,
    pub model_calls: usize,
}

/// Runs a rollout, turning numeric breakdowns into a structured
/// [`RolloutFailure`] instead of an error. `perturbation` is added to every
/// slice of the initial window's sea level.
pub fn rollout(em: &Emulator, source: &FieldStack, cfg: &RolloutConfig, perturbation: Option<&Array2<f64>>) -> Result<RolloutReport> {
    let mc = em.model.config();
    let tau = mc.tau;
    let stride = cfg.stride_for(mc.variant, tau)?;
    let src = source.select_channels(&mc.in_channels)?;
    let need = cfg.span(tau, stride);
    if cfg.origin + need > src.n_times() {
        return Err(Error::invalid(format!(
            "forcing gap: rollout needs source slices {}..{} but the source has {}",
            cfg.origin,
            cfg.origin + need,
            src.n_times()
        )));
    }
    let (ny, nx) = src.grid().shape();
    if let Some(p) = perturbation {
        if p.dim() != (ny, nx) {
            return Err(Error::invalid("perturbation shape differs from the grid"));
        }
    }
    let dt = src.dt();
    let t_first = src.time_at(cfg.origin) + tau as f64 * dt;
    let mut history: Vec<Array2<f64>> = (0..tau)
        .map(|i| {
            let mut a = src.slice2(em.state_in, cfg.origin + i).to_owned();
            if let Some(p) = perturbation {
                a += p;
            }
            a
        })
        .collect();
    let mut preds: Vec<Array2<f64>> = Vec::with_capacity(cfg.horizon);
    let mut failure = None;
    let mut calls = 0;
    let mut start = cfg.origin;
    while preds.len() < cfg.horizon {
        let mut window = src.time_range(start..start + tau)?;
        {
            let mut d = window.data_mut();
            for i in 0..tau {
                d.slice_mut(s![em.state_in, i, .., ..]).assign(&history[start - cfg.origin + i]);
            }
        }
        let fail = |reason: String| RolloutFailure {
            step: preds.len(),
            time: t_first + preds.len() as f64 * dt,
            reason,
        };
        let out = match em.forecast(&window) {
            Ok(o) => o,
            Err(Error::NumericFailure { context }) => {
                failure = Some(fail(context));
                break;
            }
            Err(e) => return Err(e),
        };
        calls += 1;
        let peak = em.normalized_peak(&out);
        if !peak.is_finite() {
            failure = Some(fail("non-finite prediction".into()));
            break;
        }
        if peak > cfg.blowup {
            failure = Some(fail(format!("normalized magnitude {peak:.3e} exceeds {}", cfg.blowup)));
            break;
        }
        let take = stride.min(cfg.horizon - preds.len());
        for j in 0..take {
            let slice = out.slice2(em.state_out, j).to_owned();
            history.push(slice.clone());
            preds.push(slice);
        }
        start += stride;
    }
    let mut data = Array4::zeros((1, preds.len(), ny, nx));
    for (i, p) in preds.iter().enumerate() {
        data.slice_mut(s![0, i, .., ..]).assign(p);
    }
    Ok(RolloutReport {
        prediction: FieldStack::new(data, vec![STATE_CHANNEL.to_string()], dt, t_first, *src.grid())?,
        failure,
        model_calls: calls,
    })
}

/// Rollout that treats any early stop as an error naming the step.
pub fn autoregressive_predict(em: &Emulator, source: &FieldStack, cfg: &RolloutConfig) -> Result<FieldStack> {
    let r = rollout(em, source, cfg, None)?;
    match r.failure {
        None => Ok(r.prediction),
        Some(f) => Err(Error::numeric(format!(
            "rollout step {} (t = {}): {}",
            f.step, f.time, f.reason
        ))),
    }
}

/// Spatial RMS difference between two rollouts at shared timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSeries {
    pub label: String,
    pub times: Vec<f64>,
    pub rms: Vec<f64>,
    /// Set when the compared rollout stopped early.
    pub failure: Option<RolloutFailure>,
}

/// RMS over ocean cells of `a - b` at every timestamp both stacks share.
pub fn divergence_series(a: &FieldStack, b: &FieldStack, mask: Option<&LandMask>, label: impl Into<String>) -> Result<DivergenceSeries> {
    if a.grid() != b.grid() || a.channels() != b.channels() {
        return Err(Error::invalid("rollouts are on different grids or channels"));
    }
    if let Some(m) = mask {
        m.check_grid(a.grid())?;
    }
    let mut times = Vec::new();
    let mut rms = Vec::new();
    for i in 0..a.n_times() {
        let t = a.time_at(i);
        let Some(j) = b.time_index(t) else { continue };
        let (mut ss, mut n) = (0.0, 0usize);
        for c in 0..a.n_channels() {
            for ((y, x), &va) in a.slice2(c, i).indexed_iter() {
                if mask.is_some_and(|m| m.is_land(y, x)) {
                    continue;
                }
                let d = va - b.slice2(c, j)[[y, x]];
                ss += d * d;
                n += 1;
            }
        }
        times.push(t);
        rms.push((ss / n as f64).sqrt());
    }
    Ok(DivergenceSeries {
        label: label.into(),
        times,
        rms,
        failure: None,
    })
}

fn spans_overlap(a0: f64, b0: f64, n: usize, dt: f64) -> bool {
    n > 0 && (a0 - b0).abs() < n as f64 * dt - 1e-9 * dt
}

/// Rollouts from several origins compared with the rollout from
/// `reference` at matching timestamps.
pub fn sensitivity_experiment(
    em: &Emulator,
    source: &FieldStack,
    origins: &[usize],
    reference: usize,
    cfg: &RolloutConfig,
    mask: Option<&LandMask>,
) -> Result<Vec<DivergenceSeries>> {
    let dt = source.dt();
    for &o in origins {
        if !spans_overlap(source.time_at(o), source.time_at(reference), cfg.horizon, dt) {
            return Err(Error::invalid(format!(
                "rollout from origin {o} does not overlap the reference rollout from {reference}"
            )));
        }
    }
    let run = |o: usize| {
        rollout(
            em,
            source,
            &RolloutConfig {
                origin: o,
                ..cfg.clone()
            },
            None,
        )
    };
    let reference_run = run(reference)?;
    origins
        .par_iter()
        .map(|&o| {
            let r = run(o)?;
            let mut d = divergence_series(&r.prediction, &reference_run.prediction, mask, format!("origin_{o}"))?;
            d.failure = r.failure.or_else(|| reference_run.failure.clone());
            Ok(d)
        })
        .collect()
}

fn default_perturb_length() -> f64 {
    4.0
}

/// Gaussian initial-condition noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    /// Pointwise standard deviation in physical units.
    pub sigma: f64,
    /// Gaussian smoothing length in grid-spacing units; zero gives white noise.
    #[serde(default = "default_perturb_length")]
    pub length: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PerturbConfig {
    /// Noise field of ensemble member `member`. The domain mean is removed:
    /// a uniform sea-level offset is a change of mass that no damping can
    /// undo, so it would mask the decay of the perturbation.
    pub fn field(&self, grid: &crate::grid::Grid, member: usize) -> Result<Array2<f64>> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) || !(self.length >= 0.0) {
            return Err(Error::invalid("perturbation sigma and length must be >= 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(member as u64);
        let mut f = smooth_noise(&Spectral::new(grid), grid, self.length, &mut rng);
        let m = f.mean().unwrap_or(0.0);
        f.mapv_inplace(|v| (v - m) * self.sigma);
        Ok(f)
    }
}

/// Rollouts from `members` perturbed copies of one initial window under
/// identical forcing, each compared with the unperturbed rollout.
pub fn perturbation_experiment(
    em: &Emulator,
    source: &FieldStack,
    cfg: &RolloutConfig,
    perturb: &PerturbConfig,
    members: usize,
    mask: Option<&LandMask>,
) -> Result<Vec<DivergenceSeries>> {
    let base = rollout(em, source, cfg, None)?;
    (0..members)
        .into_par_iter()
        .map(|m| {
            let p = perturb.field(source.grid(), m)?;
            let r = rollout(em, source, cfg, Some(&p))?;
            let mut d = divergence_series(&r.prediction, &base.prediction, mask, format!("member_{m}"))?;
            d.failure = r.failure.or_else(|| base.failure.clone());
            Ok(d)
        })
        .collect()
}

/// Trailing-free moving average: entry `j` is the mean of
/// `series[j..j + window]`.
pub fn moving_average(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::invalid("smoothing window must be >= 1"));
    }
    if series.len() < window {
        return Ok(Vec::new());
    }
    Ok(series.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect())
}

/// Fraction of the initial smoothed divergence that counts as converged.
pub const SPINUP_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpinupSummary {
    pub converged: bool,
    /// First smoothed step below the threshold, when converged.
    pub spinup_steps: Option<usize>,
    pub initial: f64,
    pub last: f64,
}

/// Converged iff the last smoothed value is below
/// [`SPINUP_THRESHOLD`] times the first one.
pub fn spinup_summary(series: &[f64], window: usize) -> Result<SpinupSummary> {
    let sm = moving_average(series, window)?;
    let (Some(&initial), Some(&last)) = (sm.first(), sm.last()) else {
        return Err(Error::invalid("series shorter than the smoothing window"));
    };
    if sm.iter().any(|v| !v.is_finite()) {
        return Ok(SpinupSummary {
            converged: false,
            spinup_steps: None,
            initial,
            last,
        });
    }
    let thr = SPINUP_THRESHOLD * initial;
    let converged = last < thr;
    Ok(SpinupSummary {
        converged,
        spinup_steps: if converged { sm.iter().position(|&v| v < thr) } else { None },
        initial,
        last,
    })
}

/// Long-format table `series,time,rms_diff`.
pub fn write_divergence_csv(path: impl AsRef<Path>, series: &[DivergenceSeries]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "series,time,rms_diff")?;
    for s in series {
        for (t, r) in s.times.iter().zip(&s.rms) {
            writeln!(f, "{},{},{}", s.label, t, r)?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Mean over members of the per-step divergence, up to the shortest series.
pub fn mean_series(series: &[DivergenceSeries]) -> Vec<f64> {
    let n = series.iter().map(|s| s.rms.len()).min().unwrap_or(0);
    (0..n)
        .map(|i| series.iter().map(|s| s.rms[i]).sum::<f64>() / series.len() as f64)
        .collect()
}

/// Field standard deviation of the state channel over a stack.
pub fn state_std(fs: &FieldStack) -> Result<f64> {
    let c = fs
        .channel_index(STATE_CHANNEL)
        .ok_or_else(|| Error::invalid(format!("stack has no {STATE_CHANNEL:?} channel")))?;
    let ch = fs.data().index_axis(Axis(0), c).to_owned();
    let m = ch.mean().ok_or_else(|| Error::invalid("empty stack"))?;
    Ok(ch.mapv(|v| (v - m) * (v - m)).mean().unwrap_or(0.0).sqrt())
}
