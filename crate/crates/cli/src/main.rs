//! `fnotd` command-line entry points: gen, train, predict, eval, spectrum
//! and sensitivity. Each command prints a one-line JSON summary on stdout;
//! failures print `{"error": kind, "message": ...}` on stderr.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fnotd::metrics::LandTreatment;
use fnotd::Variant;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "fnotd", version, about = "FNO and FNOtD shallow-water emulators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed the command consumes.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Fno,
    Fnotd,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Fno => Variant::Fno,
            VariantArg::Fnotd => Variant::Fnotd,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LandArg {
    FillZero,
    Unmasked,
}

impl From<LandArg> for LandTreatment {
    fn from(v: LandArg) -> Self {
        match v {
            LandArg::FillZero => LandTreatment::FillZero,
            LandArg::Unmasked => LandTreatment::Unmasked,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shallow-water dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one variant on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Autoregressive rollout from a checkpoint.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory or input stack holding the initial window.
        #[arg(long)]
        ic: PathBuf,
        /// Stack whose non-state channels replace those of the source.
        #[arg(long)]
        forcing: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        origin: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a prediction against a reference.
    Eval {
        #[command(flatten)]
        common: Common,
        pred: PathBuf,
        /// Reference stack, or a dataset directory (targets and mask).
        reference: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, value_enum)]
        land: Option<LandArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Radial power spectra, with RRMSE(k) when a reference is given.
    Spectrum {
        #[command(flatten)]
        common: Common,
        pred: PathBuf,
        reference: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, value_enum)]
        land: Option<LandArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Divergence of rollouts from shifted origins and perturbed initial
    /// conditions.
    Sensitivity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated origin indices.
        #[arg(long, value_delimiter = ',')]
        origins: Vec<usize>,
        /// Origin of the rollout every other one is compared with.
        #[arg(long, default_value_t = 0)]
        reference: usize,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        /// Perturbation std as a fraction of the sea-level std.
        #[arg(long)]
        perturb_sigma: Option<f64>,
        #[arg(long)]
        members: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    RunConfig::load(common.config.as_deref())
}

fn pick(flag: Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| CliError::Usage(format!("missing --{what} (and no paths.{what} in the config)")))
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig, sub: &str) -> Result<PathBuf, CliError> {
    match flag {
        Some(p) => Ok(p),
        None => cfg
            .paths
            .out
            .as_ref()
            .map(|p| p.join(sub))
            .ok_or_else(|| CliError::Usage("missing --out (and no paths.out in the config)".into())),
    }
}

fn print<T: Serialize>(v: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string(v).map_err(fnotd::Error::from)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { common, out } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.seeds.data = s;
                cfg = cfg.resolved();
            }
            let out = out_dir(out, &cfg, "data")?;
            print(&commands::gen(&cfg, &out)?)
        }
        Command::Train {
            common,
            data,
            out,
            variant,
            resume,
            quiet,
        } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.seeds.model = s;
                cfg = cfg.resolved();
            }
            let variant = variant.map(Variant::from).unwrap_or(cfg.model.variant);
            cfg.model.variant = variant;
            let data = pick(data, &cfg.paths.data, "data")?;
            let out = out_dir(out, &cfg, &variant.to_string())?;
            print(&commands::train(
                &cfg,
                commands::TrainArgs {
                    data: &data,
                    out: &out,
                    variant,
                    resume,
                    quiet,
                },
            )?)
        }
        Command::Predict {
            common,
            checkpoint,
            ic,
            forcing,
            horizon,
            origin,
            stride,
            out,
        } => {
            let mut cfg = load(&common)?;
            if common.seed.is_some() {
                return Err(CliError::Usage("predict is deterministic and takes no --seed".into()));
            }
            if let Some(h) = horizon {
                cfg.rollout.horizon = h;
            }
            if let Some(o) = origin {
                cfg.rollout.origin = o;
            }
            if stride.is_some() {
                cfg.rollout.stride = stride;
            }
            let checkpoint = pick(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let out = out_dir(out, &cfg, "predict")?;
            print(&commands::predict(
                &cfg,
                commands::PredictArgs {
                    checkpoint: &checkpoint,
                    ic: &ic,
                    forcing: forcing.as_deref(),
                    out: &out,
                },
            )?)
        }
        Command::Eval {
            common,
            pred,
            reference,
            mask,
            land,
            out,
        } => {
            let mut cfg = load(&common)?;
            if let Some(l) = land {
                cfg.eval.land_treatment = l.into();
            }
            let out = out_dir(out, &cfg, "eval")?;
            print(&commands::eval(&cfg, &pred, &reference, mask.as_deref(), &out)?)
        }
        Command::Spectrum {
            common,
            pred,
            reference,
            mask,
            land,
            out,
        } => {
            let mut cfg = load(&common)?;
            if let Some(l) = land {
                cfg.eval.land_treatment = l.into();
            }
            let out = out_dir(out, &cfg, "spectrum")?;
            print(&commands::spectrum(&cfg, &pred, reference.as_deref(), mask.as_deref(), &out)?)
        }
        Command::Sensitivity {
            common,
            checkpoint,
            data,
            origins,
            reference,
            horizon,
            stride,
            perturb_sigma,
            members,
            out,
        } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.seeds.perturb = s;
            }
            if let Some(h) = horizon {
                cfg.rollout.horizon = h;
            }
            if stride.is_some() {
                cfg.rollout.stride = stride;
            }
            if let Some(s) = perturb_sigma {
                cfg.rollout.perturb_sigma = s;
            }
            if let Some(m) = members {
                cfg.rollout.members = m;
            }
            let checkpoint = pick(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let data = pick(data, &cfg.paths.data, "data")?;
            let out = out_dir(out, &cfg, "sensitivity")?;
            print(&commands::sensitivity(
                &cfg,
                commands::SensitivityArgs {
                    checkpoint: &checkpoint,
                    data: &data,
                    origins: &origins,
                    reference,
                    members: cfg.rollout.members,
                    out: &out,
                },
            )?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let err = CliError::Usage(e.render().to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
