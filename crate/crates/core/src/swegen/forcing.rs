//! Smoothed AR(1) noise used for wind stress, pressure and tracer sources.

use ndarray::{Array2, Array4, Zip};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{normal, Spectral};
use crate::error::{Error, Result};
use crate::grid::{FieldStack, Grid};

fn default_amp() -> f64 {
    1.0
}
fn default_length() -> f64 {
    6.0
}
fn default_ar() -> f64 {
    0.95
}

/// Stochastic atmospheric forcing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcingConfig {
    /// Standard deviation of each wind-stress component.
    #[serde(default = "default_amp")]
    pub wind_amplitude: f64,
    #[serde(default = "default_amp")]
    pub pressure_amplitude: f64,
    /// Gaussian correlation length, in the units of the grid spacing.
    #[serde(default = "default_length")]
    pub length: f64,
    /// Lag-one coefficient per output interval.
    #[serde(default = "default_ar")]
    pub ar: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ForcingConfig {
    fn default() -> Self {
        ForcingConfig {
            wind_amplitude: 1.0,
            pressure_amplitude: 1.0,
            length: default_length(),
            ar: default_ar(),
            seed: 0,
        }
    }
}

impl ForcingConfig {
    pub fn validate(&self) -> Result<()> {
        check_ar(self.ar)?;
        if !(self.wind_amplitude >= 0.0 && self.pressure_amplitude >= 0.0) {
            return Err(Error::invalid("forcing amplitudes must be >= 0"));
        }
        if !(self.length >= 0.0 && self.length.is_finite()) {
            return Err(Error::invalid("correlation length must be >= 0"));
        }
        Ok(())
    }
}

pub(crate) fn check_ar(a: f64) -> Result<()> {
    if !(0.0..1.0).contains(&a) {
        return Err(Error::invalid(format!("AR(1) coefficient {a} outside [0, 1)")));
    }
    Ok(())
}

/// White noise smoothed by a Gaussian kernel of standard deviation
/// `length`, rescaled to unit variance per point.
pub fn smooth_noise<R: Rng + ?Sized>(spectral: &Spectral, grid: &Grid, length: f64, rng: &mut R) -> Array2<f64> {
    let mut w = Array2::from_shape_simple_fn((grid.ny, grid.nx), || Complex64::new(normal(rng), 0.0));
    if length == 0.0 {
        return w.mapv(|c| c.re);
    }
    let kx = full_wavenumbers(grid.nx, grid.dx);
    let ky = full_wavenumbers(grid.ny, grid.dy);
    let fft = spectral.fft();
    fft.forward(&mut w);
    let mut energy = 0.0;
    for ((y, x), c) in w.indexed_iter_mut() {
        let g = (-0.5 * length * length * (kx[x] * kx[x] + ky[y] * ky[y])).exp();
        energy += g * g;
        *c *= g;
    }
    fft.inverse(&mut w);
    let scale = (grid.len() as f64 / energy).sqrt();
    w.mapv(|c| c.re * scale)
}

/// Angular wavenumbers with the Nyquist entry kept at `-pi/d`.
fn full_wavenumbers(n: usize, d: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let k = if 2 * i < n { i as f64 } else { i as f64 - n as f64 };
            2.0 * std::f64::consts::PI * k / (n as f64 * d)
        })
        .collect()
}

/// A field evolving as `X_{n+1} = a X_n + sqrt(1 - a^2) amp xi_{n+1}`,
/// started from its stationary distribution.
#[derive(Debug, Clone)]
pub struct Ar1Field {
    a: f64,
    amplitude: f64,
    length: f64,
    state: Option<Array2<f64>>,
}

impl Ar1Field {
    pub fn new(a: f64, amplitude: f64, length: f64) -> Result<Self> {
        check_ar(a)?;
        Ok(Ar1Field {
            a,
            amplitude,
            length,
            state: None,
        })
    }

    /// Advances one interval and returns the new field. Noise is drawn even
    /// at zero amplitude so that the random stream does not depend on it.
    pub fn next<R: Rng + ?Sized>(&mut self, spectral: &Spectral, grid: &Grid, rng: &mut R) -> Array2<f64> {
        let xi = smooth_noise(spectral, grid, self.length, rng);
        let next = match self.state.take() {
            None => xi * self.amplitude,
            Some(mut s) => {
                let b = (1.0 - self.a * self.a).sqrt() * self.amplitude;
                Zip::from(&mut s).and(&xi).for_each(|s, &x| *s = self.a * *s + b * x);
                s
            }
        };
        self.state = Some(next.clone());
        next
    }
}

/// Wind-stress and pressure generator producing the `u_wind`, `v_wind`,
/// `slp` triple per interval.
#[derive(Debug, Clone)]
pub(crate) struct Atmosphere {
    fields: [Ar1Field; 3],
}

impl Atmosphere {
    pub(crate) fn new(cfg: &ForcingConfig) -> Result<Self> {
        cfg.validate()?;
        let f = |amp| Ar1Field::new(cfg.ar, amp, cfg.length);
        Ok(Atmosphere {
            fields: [f(cfg.wind_amplitude)?, f(cfg.wind_amplitude)?, f(cfg.pressure_amplitude)?],
        })
    }

    pub(crate) fn next<R: Rng + ?Sized>(&mut self, spectral: &Spectral, grid: &Grid, rng: &mut R) -> [Array2<f64>; 3] {
        let [a, b, c] = &mut self.fields;
        [a.next(spectral, grid, rng), b.next(spectral, grid, rng), c.next(spectral, grid, rng)]
    }
}

pub(crate) const FORCING_CHANNELS: [&str; 3] = ["u_wind", "v_wind", "slp"];

/// `steps` slices of wind stress and pressure, channels
/// `u_wind, v_wind, slp`, sampled every `dt`.
pub fn gen_forcing<R: Rng + ?Sized>(cfg: &ForcingConfig, grid: &Grid, steps: usize, dt: f64, rng: &mut R) -> Result<FieldStack> {
    let spectral = Spectral::new(grid);
    let mut atm = Atmosphere::new(cfg)?;
    let mut data = Array4::zeros((3, steps, grid.ny, grid.nx));
    for t in 0..steps {
        for (c, f) in atm.next(&spectral, grid, rng).into_iter().enumerate() {
            data.slice_mut(ndarray::s![c, t, .., ..]).assign(&f);
        }
    }
    FieldStack::new(data, FORCING_CHANNELS.iter().map(|s| s.to_string()).collect(), dt, 0.0, *grid)
}
