//! Fourier neural operators for shallow-water emulation.
//!
//! Two operator variants share one code path: the standard FNO, whose
//! spectral kernels act on the horizontal grid of a single time slice, and
//! FNOtD, whose kernels act jointly on a `tau`-step window in space and
//! time. Around them sit a linear shallow-water generator that provides
//! training data and a dispersion oracle, a training loop with a masked
//! relative-L2 objective, autoregressive rollouts with a spin-up
//! sensitivity harness, and spectral verification metrics.
//!
//! Arrays are laid out `[channel, time, y, x]` everywhere.

pub mod error;
pub mod grid;
pub mod metrics;
pub mod nnops;
pub mod operator;
pub mod rollout;
pub mod spectral;
pub mod swegen;
pub mod training;

pub use error::{Error, Result};
pub use grid::{ChannelStats, FieldStack, Grid, LandMask};
pub use operator::{Activation, Model, ModelConfig, Variant};
pub use spectral::ModeSpec;
