//! Grids, multichannel space-time field stacks, land masks and
//! per-channel normalization.

mod fst;
mod resample;

use std::collections::HashSet;
use std::ops::Range;

use ndarray::{s, Array2, Array4, ArrayView2, ArrayView4, ArrayViewMut4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fst::{decode_fst, encode_fst, read_fst, read_mask, write_fst, write_mask};
pub use resample::{
    bilinear_resample, draw_offset, random_offset_coarsen, resample_mask, Offset,
};

/// A uniform rectangular grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub periodic_x: bool,
    pub periodic_y: bool,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, dx: f64, dy: f64, periodic_x: bool, periodic_y: bool) -> Result<Self> {
        let g = Grid {
            nx,
            ny,
            dx,
            dy,
            periodic_x,
            periodic_y,
        };
        g.validate()?;
        Ok(g)
    }

    /// Doubly periodic grid, the setting used by the shallow-water generator.
    pub fn periodic(nx: usize, ny: usize, dx: f64, dy: f64) -> Result<Self> {
        Self::new(nx, ny, dx, dy, true, true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 4 || self.ny < 4 {
            return Err(Error::invalid(format!(
                "grid must be at least 4x4, got {}x{}",
                self.ny, self.nx
            )));
        }
        if !(self.dx > 0.0 && self.dy > 0.0 && self.dx.is_finite() && self.dy.is_finite()) {
            return Err(Error::invalid("grid spacing must be positive and finite"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.ny, self.nx)
    }

    pub fn length_x(&self) -> f64 {
        self.nx as f64 * self.dx
    }

    pub fn length_y(&self) -> f64 {
        self.ny as f64 * self.dy
    }
}

/// Real-valued `[channel, time, y, x]` data with channel names and a time axis.
///
/// A stack with zero time slices is valid: it is what an empty rollout or a
/// zero-length generation run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldStack {
    data: Array4<f64>,
    channels: Vec<String>,
    dt: f64,
    t0: f64,
    grid: Grid,
}

impl FieldStack {
    pub fn new(data: Array4<f64>, channels: Vec<String>, dt: f64, t0: f64, grid: Grid) -> Result<Self> {
        grid.validate()?;
        let (c, _, ny, nx) = data.dim();
        if c != channels.len() {
            return Err(Error::invalid(format!(
                "data has {c} channels but {} names were given",
                channels.len()
            )));
        }
        if (ny, nx) != grid.shape() {
            return Err(Error::invalid(format!(
                "data spatial shape {ny}x{nx} does not match grid {}x{}",
                grid.ny, grid.nx
            )));
        }
        let mut seen = HashSet::new();
        for name in &channels {
            if !seen.insert(name.as_str()) {
                return Err(Error::invalid(format!("duplicate channel name {name:?}")));
            }
        }
        if !(dt > 0.0 && dt.is_finite()) || !t0.is_finite() {
            return Err(Error::invalid("dt must be positive and t0 finite"));
        }
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        Ok(FieldStack {
            data,
            channels,
            dt,
            t0,
            grid,
        })
    }

    /// All-zero stack.
    pub fn zeros(channels: Vec<String>, nt: usize, dt: f64, t0: f64, grid: Grid) -> Result<Self> {
        let data = Array4::zeros((channels.len(), nt, grid.ny, grid.nx));
        Self::new(data, channels, dt, t0, grid)
    }

    pub fn data(&self) -> ArrayView4<'_, f64> {
        self.data.view()
    }

    pub fn data_mut(&mut self) -> ArrayViewMut4<'_, f64> {
        self.data.view_mut()
    }

    pub fn into_data(self) -> Array4<f64> {
        self.data
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_times(&self) -> usize {
        self.data.dim().1
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn time_at(&self, index: usize) -> f64 {
        self.t0 + index as f64 * self.dt
    }

    /// Index of the slice at time `t`, if `t` falls on this stack's time axis.
    pub fn time_index(&self, t: f64) -> Option<usize> {
        let pos = (t - self.t0) / self.dt;
        let idx = pos.round();
        if (pos - idx).abs() > 1e-6 || idx < 0.0 || idx as usize >= self.n_times() {
            return None;
        }
        Some(idx as usize)
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }

    /// `[time, y, x]` view of one channel.
    pub fn channel(&self, index: usize) -> ndarray::ArrayView3<'_, f64> {
        self.data.index_axis(Axis(0), index)
    }

    /// `[y, x]` view of one channel at one time.
    pub fn slice2(&self, channel: usize, time: usize) -> ArrayView2<'_, f64> {
        self.data.slice(s![channel, time, .., ..])
    }

    /// Sub-stack over a range of time indices.
    pub fn time_range(&self, range: Range<usize>) -> Result<FieldStack> {
        if range.start > range.end || range.end > self.n_times() {
            return Err(Error::invalid(format!(
                "time range {:?} outside 0..{}",
                range,
                self.n_times()
            )));
        }
        let t0 = self.time_at(range.start);
        let data = self.data.slice(s![.., range, .., ..]).to_owned();
        FieldStack::new(data, self.channels.clone(), self.dt, t0, self.grid)
    }

    /// Sub-stack with the named channels, in the given order.
    pub fn select_channels<S: AsRef<str>>(&self, names: &[S]) -> Result<FieldStack> {
        let mut idx = Vec::with_capacity(names.len());
        for n in names {
            let n = n.as_ref();
            idx.push(
                self.channel_index(n)
                    .ok_or_else(|| Error::invalid(format!("missing channel {n:?}")))?,
            );
        }
        let data = self.data.select(Axis(0), &idx);
        FieldStack::new(
            data,
            names.iter().map(|n| n.as_ref().to_string()).collect(),
            self.dt,
            self.t0,
            self.grid,
        )
    }

    /// Same metadata, new data of identical shape.
    pub fn with_data(&self, data: Array4<f64>) -> Result<FieldStack> {
        if data.dim().0 != self.n_channels() {
            return Err(Error::invalid("channel count changed"));
        }
        FieldStack::new(data, self.channels.clone(), self.dt, self.t0, self.grid)
    }

    pub fn with_t0(mut self, t0: f64) -> FieldStack {
        self.t0 = t0;
        self
    }

    /// Checks that every value off land is finite.
    pub fn check_finite(&self, mask: Option<&LandMask>) -> Result<()> {
        let (c, t, ny, nx) = self.data.dim();
        for ci in 0..c {
            for ti in 0..t {
                for y in 0..ny {
                    for x in 0..nx {
                        if mask.is_some_and(|m| m.is_land(y, x)) {
                            continue;
                        }
                        if !self.data[[ci, ti, y, x]].is_finite() {
                            return Err(Error::numeric(format!(
                                "non-finite value in channel {} at t={ti}, y={y}, x={x}",
                                self.channels[ci]
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Sets every land cell of every channel and time to `value`.
    pub fn fill_land(&mut self, mask: &LandMask, value: f64) {
        let (c, t, ny, nx) = self.data.dim();
        for y in 0..ny {
            for x in 0..nx {
                if mask.is_land(y, x) {
                    for ci in 0..c {
                        for ti in 0..t {
                            self.data[[ci, ti, y, x]] = value;
                        }
                    }
                }
            }
        }
    }
}

/// Boolean land mask, `true` on land.
#[derive(Debug, Clone, PartialEq)]
pub struct LandMask {
    mask: Array2<bool>,
}

impl LandMask {
    pub fn new(mask: Array2<bool>) -> Result<Self> {
        if !mask.iter().any(|&land| !land) {
            return Err(Error::invalid("land mask has no ocean cell"));
        }
        Ok(LandMask { mask })
    }

    pub fn all_ocean(grid: &Grid) -> Self {
        LandMask {
            mask: Array2::from_elem(grid.shape(), false),
        }
    }

    /// Rectangular block of land `[y0, y1) x [x0, x1)` on an otherwise open grid.
    pub fn rectangle(grid: &Grid, ys: Range<usize>, xs: Range<usize>) -> Result<Self> {
        if ys.end > grid.ny || xs.end > grid.nx {
            return Err(Error::invalid("land rectangle exceeds grid"));
        }
        let mut mask = Array2::from_elem(grid.shape(), false);
        mask.slice_mut(s![ys, xs]).fill(true);
        Self::new(mask)
    }

    pub fn is_land(&self, y: usize, x: usize) -> bool {
        self.mask[[y, x]]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn ocean_count(&self) -> usize {
        self.mask.iter().filter(|&&l| !l).count()
    }

    pub fn view(&self) -> ArrayView2<'_, bool> {
        self.mask.view()
    }

    pub fn check_grid(&self, grid: &Grid) -> Result<()> {
        if self.shape() != grid.shape() {
            return Err(Error::invalid(format!(
                "mask shape {:?} does not match grid {:?}",
                self.shape(),
                grid.shape()
            )));
        }
        Ok(())
    }
}

/// Per-channel mean and standard deviation in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub channels: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn new(channels: Vec<String>, mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if channels.len() != mean.len() || channels.len() != std.len() {
            return Err(Error::invalid("stats length mismatch"));
        }
        for (name, s) in channels.iter().zip(&std) {
            if !(*s > 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!(
                    "channel {name:?} has non-positive standard deviation {s}"
                )));
            }
        }
        Ok(ChannelStats {
            channels,
            mean,
            std,
        })
    }

    /// Statistics over the time slices in `times`, excluding land cells.
    /// Channels that are constant up to roundoff get unit scale.
    pub fn compute(fs: &FieldStack, mask: Option<&LandMask>, times: Range<usize>) -> Result<Self> {
        if times.is_empty() || times.end > fs.n_times() {
            return Err(Error::invalid("statistics need a non-empty time range"));
        }
        if let Some(m) = mask {
            m.check_grid(fs.grid())?;
        }
        let (ny, nx) = fs.grid().shape();
        let mut mean = Vec::with_capacity(fs.n_channels());
        let mut std = Vec::with_capacity(fs.n_channels());
        for c in 0..fs.n_channels() {
            let mut sum = 0.0;
            let mut count = 0usize;
            for t in times.clone() {
                for y in 0..ny {
                    for x in 0..nx {
                        if mask.is_some_and(|m| m.is_land(y, x)) {
                            continue;
                        }
                        sum += fs.data[[c, t, y, x]];
                        count += 1;
                    }
                }
            }
            let m = sum / count as f64;
            let mut ss = 0.0;
            for t in times.clone() {
                for y in 0..ny {
                    for x in 0..nx {
                        if mask.is_some_and(|m| m.is_land(y, x)) {
                            continue;
                        }
                        let d = fs.data[[c, t, y, x]] - m;
                        ss += d * d;
                    }
                }
            }
            let sd = (ss / count as f64).sqrt();
            mean.push(m);
            // A constant channel (flat depth, say) only needs centering.
            std.push(if sd <= 1e-10 * m.abs() || sd == 0.0 { 1.0 } else { sd });
        }
        Self::new(fs.channels().to_vec(), mean, std)
    }

    fn check_channels(&self, fs: &FieldStack) -> Result<()> {
        if self.channels != fs.channels() {
            return Err(Error::invalid(format!(
                "stats channels {:?} do not match stack channels {:?}",
                self.channels,
                fs.channels()
            )));
        }
        Ok(())
    }
}

/// Per-channel z-score: `(x - mean) / std`.
pub fn normalize(fs: &FieldStack, stats: &ChannelStats) -> Result<FieldStack> {
    stats.check_channels(fs)?;
    let mut out = fs.clone();
    for (c, mut ch) in out.data.axis_iter_mut(Axis(0)).enumerate() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        ch.mapv_inplace(|v| (v - m) / s);
    }
    Ok(out)
}

/// Inverse of [`normalize`].
pub fn denormalize(fs: &FieldStack, stats: &ChannelStats) -> Result<FieldStack> {
    stats.check_channels(fs)?;
    let mut out = fs.clone();
    for (c, mut ch) in out.data.axis_iter_mut(Axis(0)).enumerate() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        ch.mapv_inplace(|v| v * s + m);
    }
    Ok(out)
}
