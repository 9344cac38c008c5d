//! Masked relative-L2 training with Adam, cosine annealing and random-offset
//! coarsening, plus checkpoints and the per-epoch loss log.
//!
//! Runs are deterministic given the seed: epoch `e` draws its shuffle and
//! coarsening offsets from stream `e` of a ChaCha8 generator seeded with
//! the run seed, and per-sample gradients are reduced in batch order.

mod checkpoint;
mod data;
mod loss;
mod optim;

use std::io::Write;
use std::path::Path;

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION,
};
pub use data::{split_windows, NormStats, WindowDataset};
pub use loss::{batch_loss, per_variable_ratios, relative_l2_loss, sample_loss_and_grad, LeadSelection};
pub use optim::{adam_step, cosine_lr, AdamConfig, AdamState};

use crate::error::{Error, Result};
use crate::grid::{bilinear_resample, draw_offset, resample_mask, LandMask, Offset};
use crate::nnops::ParamStore;
use crate::operator::Model;

fn default_epochs() -> usize {
    50
}
fn default_lr0() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    8
}
fn default_lead() -> usize {
    1
}
fn default_one() -> usize {
    1
}
fn default_val() -> usize {
    64
}
fn default_held() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default)]
    pub lr_min: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// 1-based lead supervised by the loss.
    #[serde(default = "default_lead")]
    pub loss_lead: usize,
    /// Average the loss over every lead instead of `loss_lead` alone.
    #[serde(default)]
    pub multi_lead: bool,
    /// Random-offset coarsening factor applied to every training sample.
    #[serde(default = "default_one")]
    pub coarsen: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Held-out windows scored after each epoch (evenly spaced subset).
    #[serde(default = "default_val")]
    pub val_windows: usize,
    /// Fraction of windows held out at the end of the record.
    #[serde(default = "default_held")]
    pub held_out_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            lr0: default_lr0(),
            lr_min: 0.0,
            batch_size: default_batch(),
            seed: 0,
            loss_lead: default_lead(),
            multi_lead: false,
            coarsen: 1,
            adam: AdamConfig::default(),
            val_windows: default_val(),
            held_out_fraction: default_held(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, tau: usize) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.coarsen == 0 {
            return Err(Error::invalid("epochs, batch_size and coarsen must be >= 1"));
        }
        if !(self.lr0 > self.lr_min && self.lr_min >= 0.0) {
            return Err(Error::invalid(format!(
                "need lr0 > lr_min >= 0, got {} and {}",
                self.lr0, self.lr_min
            )));
        }
        if !(1..=tau).contains(&self.loss_lead) {
            return Err(Error::invalid(format!("loss_lead {} outside [1, {tau}]", self.loss_lead)));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::invalid("Adam betas must lie in [0, 1) and eps be positive"));
        }
        Ok(())
    }

    pub fn lead_selection(&self) -> LeadSelection {
        if self.multi_lead {
            LeadSelection::All
        } else {
            LeadSelection::Single(self.loss_lead)
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        cosine_lr(epoch, self.epochs, self.lr0, self.lr_min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub batch_losses: Vec<f64>,
}

/// Writes the `epoch,lr,train_loss,val_loss` log.
pub fn write_loss_csv(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,lr,train_loss,val_loss")?;
    for r in history {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        writeln!(f, "{},{},{},{}", r.epoch, r.lr, r.train_loss, val)?;
    }
    f.flush()?;
    Ok(())
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

fn with_context(e: Error, ctx: &str) -> Error {
    match e {
        Error::NumericFailure { context } => Error::NumericFailure {
            context: format!("{ctx}: {context}"),
        },
        other => other,
    }
}

/// Loss and parameter gradient of one window, coarsened when `offset` is set.
fn sample_gradient(
    model: &Model,
    data: &WindowDataset,
    window: usize,
    coarsen: Option<(usize, Offset)>,
    sel: LeadSelection,
    n_samples: usize,
) -> Result<(f64, ParamStore)> {
    let (x, y) = data.window(window)?;
    let (x, y, mask) = match coarsen {
        Some((f, off)) => {
            let mask = data
                .mask()
                .map(|m| resample_mask(m, x.grid(), f, off))
                .transpose()?;
            (bilinear_resample(&x, f, off)?, bilinear_resample(&y, f, off)?, mask)
        }
        None => (x, y, data.mask().cloned()),
    };
    let (pred, cache) = model.forward_with_cache(x.data())?;
    let (loss, g) = sample_loss_and_grad(pred.view(), y.data(), mask.as_ref(), sel, n_samples)?;
    let (grads, _) = model.backward(&cache, g.view())?;
    Ok((loss, grads))
}

/// Mean per-sample lead loss over `windows` at native resolution.
pub fn evaluate_windows(model: &Model, data: &WindowDataset, windows: &[usize], sel: LeadSelection) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::invalid("no windows to evaluate"));
    }
    let losses = windows
        .par_iter()
        .map(|&w| {
            let (x, y) = data.window(w)?;
            let pred = model.forward(x.data())?;
            let (l, _) = sample_loss_and_grad(pred.view(), y.data(), data.mask(), sel, 1)?;
            Ok(l)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Evenly spaced subset of at most `k` entries.
pub fn spaced_subset(items: &[usize], k: usize) -> Vec<usize> {
    if k == 0 || items.is_empty() {
        return Vec::new();
    }
    if items.len() <= k {
        return items.to_vec();
    }
    (0..k).map(|i| items[i * items.len() / k]).collect()
}

/// Optimizer state machine over epochs.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: Model,
    adam: AdamState,
    config: TrainConfig,
    stats: NormStats,
    epoch: usize,
    history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, stats: NormStats) -> Result<Self> {
        config.validate(model.config().tau)?;
        Ok(Trainer {
            adam: AdamState::new(model.params()),
            model,
            config,
            stats,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.train.validate(ck.model.config().tau)?;
        if !ck.adam.m.same_layout(ck.model.params()) {
            return Err(Error::invalid("optimizer state does not match the model"));
        }
        Ok(Trainer {
            model: ck.model,
            adam: ck.adam,
            config: ck.train,
            stats: ck.stats,
            epoch: ck.epoch,
            history: ck.history,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.config.clone(),
            stats: self.stats.clone(),
            epoch: self.epoch,
            adam: self.adam.clone(),
            history: self.history.clone(),
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    fn check_data(&self, data: &WindowDataset) -> Result<()> {
        let mc = self.model.config();
        if data.variant() != mc.variant {
            return Err(Error::invalid("dataset windows were cut for the other variant"));
        }
        if data.inputs().channels() != mc.in_channels.as_slice() || data.targets().channels() != mc.out_channels.as_slice() {
            return Err(Error::invalid("dataset channels differ from the model channels"));
        }
        if self.stats.inputs.channels != mc.in_channels || self.stats.targets.channels != mc.out_channels {
            return Err(Error::invalid("normalization statistics do not match the model channels"));
        }
        Ok(())
    }

    /// One pass over `train` windows followed by scoring of `val`.
    pub fn run_epoch(&mut self, data: &WindowDataset, train: &[usize], val: &[usize]) -> Result<&EpochRecord> {
        if self.is_done() {
            return Err(Error::invalid("all configured epochs are complete"));
        }
        if train.is_empty() {
            return Err(Error::invalid("no training windows"));
        }
        self.check_data(data)?;
        let e = self.epoch;
        let lr = self.config.lr(e);
        let sel = self.config.lead_selection();
        let mut rng = epoch_rng(self.config.seed, e);
        let mut order = train.to_vec();
        order.shuffle(&mut rng);
        let f = self.config.coarsen;
        let jobs: Vec<(usize, Option<(usize, Offset)>)> = order
            .iter()
            .map(|&w| (w, (f > 1).then(|| (f, draw_offset(f, &mut rng)))))
            .collect();
        let mut batch_losses = Vec::new();
        let mut seen = 0usize;
        let mut weighted = 0.0;
        for (b, batch) in jobs.chunks(self.config.batch_size).enumerate() {
            let n = batch.len();
            let results = batch
                .par_iter()
                .map(|&(w, c)| sample_gradient(&self.model, data, w, c, sel, n))
                .collect::<Result<Vec<_>>>()
                .map_err(|err| with_context(err, &format!("epoch {e} batch {b}")))?;
            let mut grads = self.model.params().zeros_like();
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                grads.add_assign(g)?;
            }
            adam_step(self.model.params_mut(), &grads, &mut self.adam, lr, &self.config.adam)
                .map_err(|err| with_context(err, &format!("epoch {e} batch {b}")))?;
            batch_losses.push(loss);
            weighted += loss * n as f64;
            seen += n;
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            let subset = spaced_subset(val, self.config.val_windows);
            Some(
                evaluate_windows(&self.model, data, &subset, sel)
                    .map_err(|err| with_context(err, &format!("epoch {e} validation")))?,
            )
        };
        self.history.push(EpochRecord {
            epoch: e,
            lr,
            train_loss: weighted / seen as f64,
            val_loss,
            batch_losses,
        });
        self.epoch += 1;
        Ok(self.history.last().unwrap())
    }

    /// Runs the remaining epochs, calling `on_epoch` after each one.
    pub fn run<F>(&mut self, data: &WindowDataset, train: &[usize], val: &[usize], mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&Trainer) -> Result<()>,
    {
        while !self.is_done() {
            self.run_epoch(data, train, val)?;
            on_epoch(self)?;
        }
        Ok(())
    }
}

/// Trains from scratch over every epoch of `config` and returns the final
/// checkpoint.
pub fn train(
    data: &WindowDataset,
    model: Model,
    config: TrainConfig,
    stats: NormStats,
    train_windows: &[usize],
    val_windows: &[usize],
) -> Result<Checkpoint> {
    let mut t = Trainer::new(model, config, stats)?;
    t.run(data, train_windows, val_windows, |_| Ok(()))?;
    Ok(t.checkpoint())
}

/// Normalized windows plus the train/held-out split of one record.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: WindowDataset,
    pub stats: NormStats,
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
}

/// Cuts `inputs`/`targets` into windows of length `window_tau` and holds
/// out the last `held_out_fraction` of them behind a gap of `2 window_tau`
/// windows, so no slice is shared. Statistics come from the slices the
/// training windows touch. Both variants use the same `window_tau`, which
/// gives them identical lead-1 targets.
pub fn prepare(
    inputs: &crate::grid::FieldStack,
    targets: &crate::grid::FieldStack,
    mask: Option<LandMask>,
    variant: crate::operator::Variant,
    window_tau: usize,
    held_out_fraction: f64,
) -> Result<Prepared> {
    if window_tau == 0 {
        return Err(Error::invalid("window length must be >= 1"));
    }
    let n = (inputs.n_times() + 1).saturating_sub(2 * window_tau);
    if n == 0 {
        return Err(Error::invalid(format!(
            "{} slices are too few for windows of length {window_tau}",
            inputs.n_times()
        )));
    }
    let (train, held) = split_windows(n, held_out_fraction, 2 * window_tau)?;
    let slices = 0..train.end - 1 + 2 * window_tau;
    let stats = NormStats::compute(inputs, targets, mask.as_ref(), slices)?;
    let data = WindowDataset::new(inputs, targets, mask, &stats, variant, window_tau)?;
    Ok(Prepared {
        data,
        stats,
        train: train.collect(),
        held_out: held.collect(),
    })
}

/// Model prediction of one window at native resolution, for diagnostics.
pub fn predict_window(model: &Model, data: &WindowDataset, window: usize) -> Result<(Array4<f64>, Array4<f64>)> {
    let (x, y) = data.window(window)?;
    Ok((model.forward(x.data())?, y.into_data()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{FieldStack, Grid};
    use crate::operator::{build_model, ModelConfig, Variant};
    use ndarray::Array2;
    use std::f64::consts::PI;

    /// Travelling waves; the target is the input's first channel.
    fn copy_task(nt: usize) -> (FieldStack, FieldStack) {
        let g = Grid::periodic(8, 8, 1.0, 1.0).unwrap();
        let x = Array4::from_shape_fn((2, nt, 8, 8), |(c, t, y, x)| {
            let ph = 2.0 * PI * (x as f64 + 0.5 * y as f64) / 8.0 - 0.4 * t as f64;
            if c == 0 {
                ph.sin() + 0.3 * (2.0 * ph).cos()
            } else {
                (2.0 * PI * y as f64 / 8.0).cos()
            }
        });
        let y = x.slice(ndarray::s![0..1, .., .., ..]).to_owned();
        (
            FieldStack::new(x, vec!["sea_level".into(), "depth".into()], 1.0, 0.0, g.clone()).unwrap(),
            FieldStack::new(y, vec!["sea_level".into()], 1.0, 0.0, g).unwrap(),
        )
    }

    fn setup(variant: Variant, seed: u64) -> (WindowDataset, Model, NormStats) {
        let (x, y) = copy_task(40);
        let stats = NormStats::compute(&x, &y, None, 0..40).unwrap();
        let tau = if variant == Variant::Fno { 1 } else { 4 };
        let mut cfg = match variant {
            Variant::Fno => ModelConfig::fno(8, (2, 2), 1.0, vec!["sea_level".into(), "depth".into()], vec!["sea_level".into()]),
            Variant::Fnotd => ModelConfig::fnotd(
                8,
                (2, 2, 2),
                4,
                1.0,
                vec!["sea_level".into(), "depth".into()],
                vec!["sea_level".into()],
            ),
        };
        cfg.layers = 2;
        let data = WindowDataset::new(&x, &y, None, &stats, variant, tau).unwrap();
        let model = build_model(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (data, model, stats)
    }

    fn small_cfg(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            seed,
            batch_size: 4,
            val_windows: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_falls_within_one_epoch() {
        let (data, model, stats) = setup(Variant::Fno, 1);
        let train: Vec<usize> = (0..data.len()).collect();
        let mut cfg = small_cfg(1, 3);
        cfg.lr0 = 3e-3;
        cfg.batch_size = 2;
        let mut t = Trainer::new(model, cfg, stats).unwrap();
        let rec = t.run_epoch(&data, &train, &[]).unwrap().clone();
        let b = &rec.batch_losses;
        let head: f64 = b[..3].iter().sum::<f64>() / 3.0;
        let tail: f64 = b[b.len() - 3..].iter().sum::<f64>() / 3.0;
        assert!(tail < head, "{head} -> {tail}");
        assert!(t.is_done());
        assert!(t.run_epoch(&data, &train, &[]).is_err());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (data, model, stats) = setup(Variant::Fnotd, 2);
        let n = data.len();
        let (tr, ho) = split_windows(n, 0.1, 8).unwrap();
        let (tr, ho): (Vec<usize>, Vec<usize>) = (tr.collect(), ho.collect());
        let mut cfg = small_cfg(3, 7);
        cfg.coarsen = 2;
        let full = train(&data, model.clone(), cfg.clone(), stats.clone(), &tr, &ho).unwrap();

        let mut a = Trainer::new(model, cfg, stats).unwrap();
        a.run_epoch(&data, &tr, &ho).unwrap();
        let bytes = encode_checkpoint(&a.checkpoint()).unwrap();
        let mut b = Trainer::from_checkpoint(decode_checkpoint(&bytes).unwrap()).unwrap();
        b.run(&data, &tr, &ho, |_| Ok(())).unwrap();
        let resumed = b.checkpoint();
        for (x, y) in full.history.iter().zip(&resumed.history) {
            assert!((x.train_loss - y.train_loss).abs() <= 1e-12);
            assert!((x.val_loss.unwrap() - y.val_loss.unwrap()).abs() <= 1e-12);
        }
        assert_eq!(encode_checkpoint(&full).unwrap(), encode_checkpoint(&resumed).unwrap());
    }

    #[test]
    fn seed_changes_trajectory() {
        let (data, model, stats) = setup(Variant::Fno, 3);
        let tr: Vec<usize> = (0..data.len()).collect();
        let a = train(&data, model.clone(), small_cfg(1, 1), stats.clone(), &tr, &[]).unwrap();
        let b = train(&data, model, small_cfg(1, 2), stats, &tr, &[]).unwrap();
        assert_ne!(a.history[0].batch_losses, b.history[0].batch_losses);
    }

    #[test]
    fn small_step_decreases_fixed_batch_loss() {
        let (data, model, stats) = setup(Variant::Fnotd, 4);
        let windows = [0usize, 5, 9];
        let sel = LeadSelection::Single(1);
        let before = evaluate_windows(&model, &data, &windows, sel).unwrap();
        let mut cfg = small_cfg(1, 0);
        cfg.lr0 = 1e-6;
        cfg.batch_size = 3;
        let mut t = Trainer::new(model, cfg, stats).unwrap();
        t.run_epoch(&data, &windows, &[]).unwrap();
        let after = evaluate_windows(t.model(), &data, &windows, sel).unwrap();
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let (data, model, stats) = setup(Variant::Fno, 5);
        let tr: Vec<usize> = (0..8).collect();
        let ck = train(&data, model, small_cfg(1, 0), stats, &tr, &[10]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.fnoc");
        save_checkpoint(&p, &ck).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, ck);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 5]), Err(Error::Format(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            decode_checkpoint(&v2),
            Err(Error::Version { found: 2, expected: 1 })
        ));
        let csv = dir.path().join("loss.csv");
        write_loss_csv(&csv, &ck.history).unwrap();
        let text = std::fs::read_to_string(csv).unwrap();
        assert!(text.starts_with("epoch,lr,train_loss,val_loss\n0,0.001,"));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.validate(8).unwrap();
        c.loss_lead = 9;
        assert!(c.validate(8).is_err());
        c.loss_lead = 1;
        c.lr_min = 1e-3;
        assert!(c.validate(8).is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 2, "lr": 1}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 2}"#).unwrap();
        assert_eq!((c.batch_size, c.lr0), (8, 1e-3));
    }

    #[test]
    fn masked_training_ignores_land() {
        let (x, y) = copy_task(30);
        let mask = LandMask::new(Array2::from_shape_fn((8, 8), |(r, c)| r < 2 && c < 2)).unwrap();
        let stats = NormStats::compute(&x, &y, Some(&mask), 0..30).unwrap();
        let mut y2 = y.clone();
        y2.data_mut().slice_mut(ndarray::s![0, .., 0, 0]).fill(1e6);
        let d1 = WindowDataset::new(&x, &y, Some(mask.clone()), &stats, Variant::Fno, 1).unwrap();
        let d2 = WindowDataset::new(&x, &y2, Some(mask), &stats, Variant::Fno, 1).unwrap();
        let mut cfg = ModelConfig::fno(4, (2, 2), 1.0, vec!["sea_level".into(), "depth".into()], vec!["sea_level".into()]);
        cfg.layers = 1;
        let m = build_model(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tr: Vec<usize> = (0..10).collect();
        let a = train(&d1, m.clone(), small_cfg(1, 0), stats.clone(), &tr, &[]).unwrap();
        let b = train(&d2, m, small_cfg(1, 0), stats, &tr, &[]).unwrap();
        assert_eq!(a.model, b.model);
    }
}
