//! Run configuration: one strict JSON document shared by every command.

use std::path::{Path, PathBuf};

use fnotd::metrics::LandTreatment;
use fnotd::operator::{Activation, ModelConfig, Variant};
use fnotd::rollout::RolloutConfig;
use fnotd::swegen::{DatasetConfig, ForcingConfig, MaskRect, SweParams};
use fnotd::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

fn default_n_steps() -> usize {
    400
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

/// Record length, spin-up, tracers and land block of the generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
    #[serde(default = "default_spinup")]
    pub spinup: usize,
    #[serde(default = "default_tracer_damping")]
    pub tracer_damping: f64,
    #[serde(default = "default_tracer_ar")]
    pub tracer_ar: f64,
    #[serde(default = "default_tracer_amp")]
    pub tracer_amplitude: f64,
    #[serde(default)]
    pub mask: Option<MaskRect>,
}

impl Default for DataSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

fn default_width() -> usize {
    32
}
fn default_layers() -> usize {
    4
}
fn default_tau() -> usize {
    8
}
fn default_fno_modes() -> [usize; 2] {
    [16, 16]
}
fn default_fnotd_modes() -> [usize; 3] {
    [8, 8, 4]
}
fn default_variant() -> Variant {
    Variant::Fnotd
}

/// Architecture of both variants; `variant` picks the one to build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// Window length of FNOtD, also used to align FNO training windows.
    #[serde(default = "default_tau")]
    pub tau: usize,
    #[serde(default = "default_fno_modes")]
    pub fno_modes: [usize; 2],
    #[serde(default = "default_fnotd_modes")]
    pub fnotd_modes: [usize; 3],
    #[serde(default)]
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl ModelSection {
    pub fn build_config(&self, variant: Variant, dt: f64, in_channels: Vec<String>, out_channels: Vec<String>) -> ModelConfig {
        let mut c = match variant {
            Variant::Fno => ModelConfig::fno(self.width, (self.fno_modes[0], self.fno_modes[1]), dt, in_channels, out_channels),
            Variant::Fnotd => {
                let [kx, ky, w] = self.fnotd_modes;
                ModelConfig::fnotd(self.width, (kx, ky, w), self.tau, dt, in_channels, out_channels)
            }
        };
        c.layers = self.layers;
        c.activation = self.activation;
        c
    }
}

fn default_horizon() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSection {
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub stride: Option<usize>,
    #[serde(default)]
    pub origin: usize,
    #[serde(default = "default_blowup")]
    pub blowup: f64,
    /// Perturbation standard deviation as a fraction of the sea-level std.
    #[serde(default = "default_sigma_fraction")]
    pub perturb_sigma: f64,
    #[serde(default = "default_perturb_length")]
    pub perturb_length: f64,
    #[serde(default = "default_members")]
    pub members: usize,
    /// Moving-average window of the spin-up summary.
    #[serde(default = "default_smoothing")]
    pub smoothing: usize,
}

fn default_blowup() -> f64 {
    1e3
}
fn default_sigma_fraction() -> f64 {
    0.1
}
fn default_perturb_length() -> f64 {
    4.0
}
fn default_members() -> usize {
    5
}
fn default_smoothing() -> usize {
    5
}

impl Default for RolloutSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl RolloutSection {
    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            horizon: self.horizon,
            stride: self.stride,
            origin: self.origin,
            blowup: self.blowup,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// `(y, x)` grid cells extracted as station series.
    #[serde(default)]
    pub stations: Vec<[usize; 2]>,
    #[serde(default)]
    pub land_treatment: LandTreatment,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

/// Seeds of the stochastic components. They take precedence over the seed
/// fields inside the other sections.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsSection {
    /// Forcing and bathymetry.
    #[serde(default)]
    pub data: u64,
    /// Weight initialization and the training shuffle.
    #[serde(default)]
    pub model: u64,
    /// Initial-condition perturbations.
    #[serde(default)]
    pub perturb: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_swe")]
    pub swe: SweParams,
    #[serde(default)]
    pub forcing: ForcingConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub rollout: RolloutSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub seeds: SeedsSection,
}

fn default_swe() -> SweParams {
    SweParams::desk(64)
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default().resolved());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg.resolved())
    }

    /// Copies the `seeds` section into the per-section seed fields.
    pub fn resolved(mut self) -> Self {
        self.forcing.seed = self.seeds.data;
        self.swe.depth_seed = self.seeds.data;
        self.train.seed = self.seeds.model;
        self
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            swe: self.swe.clone(),
            forcing: self.forcing.clone(),
            n_steps: self.data.n_steps,
            spinup: self.data.spinup,
            tracer_damping: self.data.tracer_damping,
            tracer_ar: self.data.tracer_ar,
            tracer_amplitude: self.data.tracer_amplitude,
            mask: self.data.mask,
        }
    }

    /// Writes the resolved configuration beside a command's outputs.
    pub fn write_snapshot(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let mut s = serde_json::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))?;
        s.push('\n');
        let p = dir.join(RESOLVED_CONFIG);
        std::fs::write(&p, s).map_err(|e| CliError::Io { path: p, source: e })
    }
}
