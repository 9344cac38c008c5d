use std::io::Write;
use std::path::{Path, PathBuf};

use fnotd::grid::{read_fst, read_mask, write_fst};
use fnotd::metrics::{evaluate, spectral_rrmse, stack_spectra, write_report, LandTreatment, RadialSpectrum, RrmseSeries};
use fnotd::operator::build_model;
use fnotd::rollout::{
    mean_series, perturbation_experiment, rollout, sensitivity_experiment, spinup_summary, state_std, write_divergence_csv,
    DivergenceSeries, Emulator, PerturbConfig, RolloutFailure, SpinupSummary,
};
use fnotd::swegen::{generate_dataset, read_dataset, write_dataset, Dataset, STATE_CHANNEL};
use fnotd::training::{
    evaluate_windows, load_checkpoint, prepare, save_checkpoint, write_loss_csv, LeadSelection, Trainer,
};
use fnotd::{FieldStack, LandMask, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

pub const CHECKPOINT_FILE: &str = "model.fnoc";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(fnotd::Error::from)?;
    s.push('\n');
    std::fs::write(path, s).map_err(io_err(path))
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        })
    }
}

/// Reads a dataset directory, or a bare stack file as a dataset without
/// targets or mask.
fn read_source(path: &Path) -> Result<(FieldStack, Option<Dataset>), CliError> {
    require(path)?;
    if path.is_dir() {
        let (ds, _) = read_dataset(path)?;
        Ok((ds.inputs.clone(), Some(ds)))
    } else {
        Ok((read_fst(path)?, None))
    }
}

#[derive(Serialize)]
pub struct GenSummary {
    pub out: PathBuf,
    pub n_times: usize,
    pub grid: [usize; 2],
    pub channels: Vec<String>,
}

pub fn gen(cfg: &RunConfig, out: &Path) -> Result<GenSummary, CliError> {
    let dc = cfg.dataset_config();
    let ds = generate_dataset(&dc)?;
    write_dataset(out, &ds, &dc)?;
    cfg.write_snapshot(out)?;
    let (ny, nx) = ds.inputs.grid().shape();
    Ok(GenSummary {
        out: out.to_path_buf(),
        n_times: ds.inputs.n_times(),
        grid: [ny, nx],
        channels: ds.inputs.channels().to_vec(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub epochs: usize,
    pub param_count: usize,
    pub train_windows: usize,
    pub held_out_windows: usize,
    pub first_epoch_loss: Option<f64>,
    pub final_epoch_loss: Option<f64>,
    /// Lead-1 relative L2 over every held-out window.
    pub held_out_loss: Option<f64>,
    pub seconds: f64,
}

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub out: &'a Path,
    pub variant: Variant,
    pub resume: bool,
    pub quiet: bool,
}

/// Trains one variant, saving the checkpoint and loss log after every epoch
/// so an interrupted run can continue with `resume`.
pub fn train(cfg: &RunConfig, a: TrainArgs<'_>) -> Result<TrainReport, CliError> {
    let start = std::time::Instant::now();
    require(a.data)?;
    let (ds, _) = read_dataset(a.data)?;
    let prep = prepare(&ds.inputs, &ds.targets, ds.mask.clone(), a.variant, cfg.model.tau, cfg.train.held_out_fraction)?;
    let mc = cfg.model.build_config(
        a.variant,
        ds.inputs.dt(),
        ds.inputs.channels().to_vec(),
        ds.targets.channels().to_vec(),
    );
    std::fs::create_dir_all(a.out).map_err(io_err(a.out))?;
    cfg.write_snapshot(a.out)?;
    let ck_path = a.out.join(CHECKPOINT_FILE);
    let mut trainer = if a.resume && ck_path.exists() {
        let ck = load_checkpoint(&ck_path)?;
        if ck.model.config() != &mc || ck.train != cfg.train || ck.stats != prep.stats {
            return Err(CliError::Usage(format!(
                "{} was written with a different configuration or dataset",
                ck_path.display()
            )));
        }
        Trainer::from_checkpoint(ck)?
    } else {
        // Epoch shuffles draw from streams 0.., so initialization takes the last one.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(u64::MAX);
        Trainer::new(build_model(mc, &mut rng)?, cfg.train.clone(), prep.stats.clone())?
    };
    let loss_path = a.out.join("loss.csv");
    let quiet = a.quiet;
    trainer.run(&prep.data, &prep.train, &prep.held_out, |t| {
        save_checkpoint(&ck_path, &t.checkpoint())?;
        write_loss_csv(&loss_path, t.history())?;
        if !quiet {
            if let Some(r) = t.history().last() {
                eprintln!(
                    "epoch {}/{} lr {:.3e} train {:.5} val {}",
                    r.epoch + 1,
                    t.config().epochs,
                    r.lr,
                    r.train_loss,
                    r.val_loss.map(|v| format!("{v:.5}")).unwrap_or_else(|| "-".into())
                );
            }
        }
        Ok(())
    })?;
    // A run resumed after its last epoch never calls the hook.
    save_checkpoint(&ck_path, &trainer.checkpoint())?;
    write_loss_csv(&loss_path, trainer.history())?;
    let held_out_loss = if prep.held_out.is_empty() {
        None
    } else {
        Some(evaluate_windows(trainer.model(), &prep.data, &prep.held_out, LeadSelection::Single(1))?)
    };
    let h = trainer.history();
    let report = TrainReport {
        variant: a.variant,
        epochs: trainer.epoch(),
        param_count: trainer.model().param_count(),
        train_windows: prep.train.len(),
        held_out_windows: prep.held_out.len(),
        first_epoch_loss: h.first().map(|r| r.train_loss),
        final_epoch_loss: h.last().map(|r| r.train_loss),
        held_out_loss,
        seconds: start.elapsed().as_secs_f64(),
    };
    // Wall time would break byte-identical reruns, so it only goes to stdout.
    write_json(
        &a.out.join("train_report.json"),
        &TrainReport {
            seconds: 0.0,
            ..report.clone()
        },
    )?;
    Ok(report)
}

/// Copies every non-state channel of `forcing` into `source` at matching
/// timestamps.
fn apply_forcing(source: &FieldStack, forcing: &FieldStack) -> Result<FieldStack, CliError> {
    if source.grid() != forcing.grid() {
        return Err(CliError::Usage("forcing file is on a different grid than the initial condition".into()));
    }
    let mut out = source.clone();
    for (fc, name) in forcing.channels().iter().enumerate() {
        if name == STATE_CHANNEL {
            continue;
        }
        let Some(sc) = source.channel_index(name) else { continue };
        for t in 0..source.n_times() {
            let time = source.time_at(t);
            let Some(ft) = forcing.time_index(time) else {
                return Err(fnotd::Error::InvalidArgument(format!("forcing gap: no {name} slice at t = {time}")).into());
            };
            out.data_mut()
                .index_axis_mut(ndarray::Axis(0), sc)
                .index_axis_mut(ndarray::Axis(0), t)
                .assign(&forcing.slice2(fc, ft));
        }
    }
    Ok(out)
}

#[derive(Serialize)]
pub struct PredictSummary {
    pub variant: Variant,
    pub horizon: usize,
    pub produced: usize,
    pub stride: usize,
    pub origin: usize,
    pub model_calls: usize,
    pub t0: f64,
    pub failure: Option<RolloutFailure>,
}

pub struct PredictArgs<'a> {
    pub checkpoint: &'a Path,
    pub ic: &'a Path,
    pub forcing: Option<&'a Path>,
    pub out: &'a Path,
}

pub fn predict(cfg: &RunConfig, a: PredictArgs<'_>) -> Result<PredictSummary, CliError> {
    require(a.checkpoint)?;
    let ck = load_checkpoint(a.checkpoint)?;
    let em = Emulator::from_checkpoint(&ck)?;
    let (mut source, _) = read_source(a.ic)?;
    if let Some(f) = a.forcing {
        require(f)?;
        source = apply_forcing(&source, &read_fst(f)?)?;
    }
    let rc = cfg.rollout.rollout_config();
    let report = rollout(&em, &source, &rc, None)?;
    std::fs::create_dir_all(a.out).map_err(io_err(a.out))?;
    cfg.write_snapshot(a.out)?;
    write_fst(a.out.join("prediction.fst"), &report.prediction)?;
    let summary = PredictSummary {
        variant: em.model().config().variant,
        horizon: rc.horizon,
        produced: report.prediction.n_times(),
        stride: rc.stride.unwrap_or(em.tau()),
        origin: rc.origin,
        model_calls: report.model_calls,
        t0: report.prediction.t0(),
        failure: report.failure.clone(),
    };
    write_json(&a.out.join("rollout.json"), &summary)?;
    if let Some(f) = report.failure {
        return Err(fnotd::Error::NumericFailure {
            context: format!("rollout step {} (t = {}): {}", f.step, f.time, f.reason),
        }
        .into());
    }
    Ok(summary)
}

/// Reference stack and mask: a dataset directory contributes its targets
/// and land mask, a bare file only itself.
fn read_reference(path: &Path, mask: Option<&Path>) -> Result<(FieldStack, Option<LandMask>), CliError> {
    require(path)?;
    let (reference, ds_mask) = if path.is_dir() {
        let (ds, _) = read_dataset(path)?;
        (ds.targets, ds.mask)
    } else {
        (read_fst(path)?, None)
    };
    let mask = match mask {
        Some(p) => {
            require(p)?;
            let (m, g) = read_mask(p)?;
            if &g != reference.grid() {
                return Err(CliError::Usage("mask grid differs from the reference grid".into()));
            }
            Some(m)
        }
        None => ds_mask,
    };
    Ok((reference, mask))
}

#[derive(Serialize)]
pub struct EvalSummary {
    pub rmse: f64,
    pub relative_rmse: Option<f64>,
    pub snapshots: usize,
    pub land_treatment: LandTreatment,
}

pub fn eval(cfg: &RunConfig, pred: &Path, reference: &Path, mask: Option<&Path>, out: &Path) -> Result<EvalSummary, CliError> {
    require(pred)?;
    let p = read_fst(pred)?;
    let (r, m) = read_reference(reference, mask)?;
    let stations: Vec<(usize, usize)> = cfg.eval.stations.iter().map(|s| (s[0], s[1])).collect();
    let report = evaluate(&p, &r, m.as_ref(), &stations, cfg.eval.land_treatment)?;
    write_report(out, &report)?;
    cfg.write_snapshot(out)?;
    Ok(EvalSummary {
        rmse: report.rmse,
        relative_rmse: report.relative_rmse,
        snapshots: p.n_times(),
        land_treatment: report.land_treatment,
    })
}

#[derive(Serialize)]
struct SpectrumFile<'a> {
    land_treatment: LandTreatment,
    pred: &'a [RadialSpectrum],
    reference: Option<&'a [RadialSpectrum]>,
    rrmse: Option<&'a RrmseSeries>,
}

#[derive(Serialize)]
pub struct SpectrumSummary {
    pub snapshots: usize,
    pub bins: usize,
    pub max_rrmse: Option<f64>,
}

fn write_spectra_csv(path: &Path, sets: &[(&str, &[RadialSpectrum])]) -> Result<(), CliError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    let mut body = || -> std::io::Result<()> {
        writeln!(f, "snapshot,source,k,power,count")?;
        for (src, list) in sets {
            for (q, s) in list.iter().enumerate() {
                for i in 0..s.k.len() {
                    writeln!(f, "{q},{src},{},{},{}", s.k[i], s.power[i], s.counts[i])?;
                }
            }
        }
        f.flush()
    };
    body().map_err(io_err(path))
}

/// Radial spectra of every snapshot, plus RRMSE(k) against a reference.
pub fn spectrum(cfg: &RunConfig, pred: &Path, reference: Option<&Path>, mask: Option<&Path>, out: &Path) -> Result<SpectrumSummary, CliError> {
    require(pred)?;
    let p = read_fst(pred)?;
    let mode = cfg.eval.land_treatment;
    let (r, m) = match reference {
        Some(path) => {
            let (r, m) = read_reference(path, mask)?;
            (Some(fnotd::metrics::align_reference(&p, &r)?), m)
        }
        None => (None, read_reference_mask(mask)?),
    };
    let ps = stack_spectra(&p, m.as_ref(), mode)?;
    let rs = r.as_ref().map(|r| stack_spectra(r, m.as_ref(), mode)).transpose()?;
    let rr = rs.as_ref().map(|rs| spectral_rrmse(&ps, rs)).transpose()?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    cfg.write_snapshot(out)?;
    let mut sets: Vec<(&str, &[RadialSpectrum])> = vec![("pred", &ps)];
    if let Some(rs) = &rs {
        sets.push(("ref", rs));
    }
    write_spectra_csv(&out.join("spectra.csv"), &sets)?;
    if let Some(rr) = &rr {
        let path = out.join("rrmse.csv");
        let mut s = String::from("k,rrmse\n");
        for (k, v) in rr.k.iter().zip(&rr.rrmse) {
            s.push_str(&format!("{k},{v}\n"));
        }
        std::fs::write(&path, s).map_err(io_err(&path))?;
    }
    write_json(
        &out.join("spectrum.json"),
        &SpectrumFile {
            land_treatment: mode,
            pred: &ps,
            reference: rs.as_deref(),
            rrmse: rr.as_ref(),
        },
    )?;
    Ok(SpectrumSummary {
        snapshots: ps.len(),
        bins: ps.first().map_or(0, |s| s.k.len()),
        max_rrmse: rr.as_ref().and_then(|r| r.rrmse.iter().copied().reduce(f64::max)),
    })
}

fn read_reference_mask(mask: Option<&Path>) -> Result<Option<LandMask>, CliError> {
    mask.map(|p| {
        require(p)?;
        Ok(read_mask(p)?.0)
    })
    .transpose()
}

#[derive(Serialize)]
pub struct SeriesSummary {
    pub label: String,
    pub failure: Option<RolloutFailure>,
}

#[derive(Serialize)]
pub struct SensitivitySummary {
    pub origins: Vec<usize>,
    pub reference: usize,
    pub horizon: usize,
    pub origin_series: Vec<SeriesSummary>,
    pub origin_spinup: Option<SpinupSummary>,
    pub perturb_sigma: Option<f64>,
    pub members: usize,
    pub member_series: Vec<SeriesSummary>,
    pub member_spinup: Option<SpinupSummary>,
}

pub struct SensitivityArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub origins: &'a [usize],
    pub reference: usize,
    pub members: usize,
    pub out: &'a Path,
}

fn summaries(series: &[DivergenceSeries]) -> Vec<SeriesSummary> {
    series
        .iter()
        .map(|s| SeriesSummary {
            label: s.label.clone(),
            failure: s.failure.clone(),
        })
        .collect()
}

/// Spin-up summary of the member mean; `None` when the series is shorter
/// than the smoothing window (for example after an early blow-up).
fn mean_spinup(series: &[DivergenceSeries], window: usize) -> Option<SpinupSummary> {
    if series.is_empty() {
        return None;
    }
    spinup_summary(&mean_series(series), window).ok()
}

/// Origin-shift experiment, plus perturbed-IC ensemble when `members > 0`.
/// Divergence of a rollout is reported in the outputs, not raised.
pub fn sensitivity(cfg: &RunConfig, a: SensitivityArgs<'_>) -> Result<SensitivitySummary, CliError> {
    require(a.checkpoint)?;
    let ck = load_checkpoint(a.checkpoint)?;
    let em = Emulator::from_checkpoint(&ck)?;
    let (source, ds) = read_source(a.data)?;
    let mask = ds.as_ref().and_then(|d| d.mask.clone());
    let rc = cfg.rollout.rollout_config();
    std::fs::create_dir_all(a.out).map_err(io_err(a.out))?;
    cfg.write_snapshot(a.out)?;

    let origin_series = if a.origins.is_empty() {
        Vec::new()
    } else {
        sensitivity_experiment(&em, &source, a.origins, a.reference, &rc, mask.as_ref())?
    };
    write_divergence_csv(a.out.join("origins.csv"), &origin_series)?;

    let (sigma, member_series) = if a.members > 0 {
        let sigma = cfg.rollout.perturb_sigma * state_std(&source)?;
        let pc = PerturbConfig {
            sigma,
            length: cfg.rollout.perturb_length,
            seed: cfg.seeds.perturb,
        };
        let s = perturbation_experiment(&em, &source, &rc, &pc, a.members, mask.as_ref())?;
        (Some(sigma), s)
    } else {
        (None, Vec::new())
    };
    write_divergence_csv(a.out.join("perturbations.csv"), &member_series)?;

    let summary = SensitivitySummary {
        origins: a.origins.to_vec(),
        reference: a.reference,
        horizon: rc.horizon,
        origin_spinup: mean_spinup(&origin_series, cfg.rollout.smoothing),
        origin_series: summaries(&origin_series),
        perturb_sigma: sigma,
        members: a.members,
        member_spinup: mean_spinup(&member_series, cfg.rollout.smoothing),
        member_series: summaries(&member_series),
    };
    write_json(&a.out.join("sensitivity.json"), &summary)?;
    Ok(summary)
}
