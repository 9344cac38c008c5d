//! Discrete Fourier transforms, mode truncation, and the spectral linear
//! map `F^-1(R . F(v))` that forms the integral kernel of each Fourier layer.
//!
//! Conventions used throughout:
//! * forward transforms are unnormalized, inverse transforms carry `1/N`
//!   per axis;
//! * `x` (the last axis) is the half axis of a real transform and keeps
//!   `kx` in `[0, kx_max)`;
//! * `y` keeps `ky` in `{0..ky_max} U {-ky_max..-1}`;
//! * the time axis (FNOtD only) keeps `w_max` frequencies in total,
//!   `ceil(w_max/2)` non-negative and `floor(w_max/2)` negative.

mod dft;
mod kernel;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dft::{dft_forward, dft_inverse, dft_inverse_complex, truncate_modes, ComplexSpectrum, Fft2};
pub(crate) use dft::power;
pub(crate) use kernel::weight_shape;
pub use kernel::{
    init_spectral_weights, spectral_linear, spectral_linear_vjp, KernelPlan, SpectralWeights,
};

/// Retained Fourier modes per axis; `w_max = None` is the purely spatial kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeSpec {
    pub kx_max: usize,
    pub ky_max: usize,
    pub w_max: Option<usize>,
}

impl ModeSpec {
    pub fn spatial(kx_max: usize, ky_max: usize) -> Self {
        ModeSpec {
            kx_max,
            ky_max,
            w_max: None,
        }
    }

    pub fn space_time(kx_max: usize, ky_max: usize, w_max: usize) -> Self {
        ModeSpec {
            kx_max,
            ky_max,
            w_max: Some(w_max),
        }
    }

    pub fn is_space_time(&self) -> bool {
        self.w_max.is_some()
    }

    /// Checks the modes fit a `[nt, ny, nx]` block; `nt` is ignored for
    /// spatial kernels.
    pub fn validate(&self, nt: usize, ny: usize, nx: usize) -> Result<()> {
        if self.kx_max == 0 || self.ky_max == 0 || self.w_max == Some(0) {
            return Err(Error::invalid("every retained mode count must be >= 1"));
        }
        if self.kx_max > nx / 2 || self.ky_max > ny / 2 {
            return Err(Error::invalid(format!(
                "modes ({}, {}) exceed half the grid extent {}x{}",
                self.kx_max, self.ky_max, ny, nx
            )));
        }
        if let Some(w) = self.w_max {
            if w > nt.div_ceil(2) {
                return Err(Error::invalid(format!(
                    "w_max {w} exceeds ceil({nt}/2)"
                )));
            }
        }
        Ok(())
    }

    /// Product `kx_max * ky_max (* w_max)`: the per-corner block size that
    /// parameter parity between the two variants is stated in.
    pub fn retained_mode_count(&self) -> usize {
        self.kx_max * self.ky_max * self.w_max.unwrap_or(1)
    }

    /// Complex coefficients actually held per `(c_in, c_out)` pair. Both
    /// variants double the block count: the spatial kernel through the two
    /// signs of `ky`, the space-time kernel through `ky` signs with the
    /// temporal budget `w_max` split across `omega` signs.
    pub fn retained_coefficients(&self) -> usize {
        2 * self.retained_mode_count()
    }

    pub(crate) fn x_count(&self) -> usize {
        self.kx_max
    }

    /// Retained `y` indices on an axis of length `ny`.
    pub fn y_indices(&self, ny: usize) -> Vec<usize> {
        (0..self.ky_max).chain(ny - self.ky_max..ny).collect()
    }

    /// Retained time indices on an axis of length `nt` (`[0]` for spatial
    /// kernels, which see one slice at a time).
    pub fn t_indices(&self, nt: usize) -> Vec<usize> {
        match self.w_max {
            None => vec![0],
            Some(w) => {
                let pos = w.div_ceil(2);
                let neg = w / 2;
                (0..pos).chain(nt - neg..nt).collect()
            }
        }
    }
}

/// Free-function form of [`ModeSpec::retained_mode_count`].
pub fn retained_mode_count(m: &ModeSpec) -> usize {
    m.retained_mode_count()
}
