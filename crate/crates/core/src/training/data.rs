//! Training windows cut from aligned input and target stacks.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{normalize, ChannelStats, FieldStack, LandMask};
use crate::operator::Variant;

/// Normalization statistics for model inputs and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub inputs: ChannelStats,
    pub targets: ChannelStats,
}

impl NormStats {
    /// Statistics over the time slices `times`, land excluded.
    pub fn compute(inputs: &FieldStack, targets: &FieldStack, mask: Option<&LandMask>, times: Range<usize>) -> Result<Self> {
        Ok(NormStats {
            inputs: ChannelStats::compute(inputs, mask, times.clone())?,
            targets: ChannelStats::compute(targets, mask, times)?,
        })
    }
}

/// Normalized input/target stacks cut into windows.
///
/// Window `s` of the space-time variant takes inputs `[s, s+tau)` and
/// targets `[s+tau, s+2tau)`. The single-step variant sees only the last
/// input slice `s+tau-1` and the first target slice `s+tau`, so both
/// variants are supervised on the same lead-1 targets.
#[derive(Debug, Clone)]
pub struct WindowDataset {
    inputs: FieldStack,
    targets: FieldStack,
    mask: Option<LandMask>,
    variant: Variant,
    tau: usize,
}

impl WindowDataset {
    pub fn new(
        inputs: &FieldStack,
        targets: &FieldStack,
        mask: Option<LandMask>,
        stats: &NormStats,
        variant: Variant,
        tau: usize,
    ) -> Result<Self> {
        if inputs.grid() != targets.grid() || inputs.n_times() != targets.n_times() {
            return Err(Error::invalid("input and target stacks are not aligned"));
        }
        if inputs.dt() != targets.dt() || inputs.t0() != targets.t0() {
            return Err(Error::invalid("input and target stacks have different time axes"));
        }
        if tau == 0 {
            return Err(Error::invalid("tau must be >= 1"));
        }
        if let Some(m) = &mask {
            m.check_grid(inputs.grid())?;
        }
        let inputs = normalize(inputs, &stats.inputs)?;
        let targets = normalize(targets, &stats.targets)?;
        let ds = WindowDataset {
            inputs,
            targets,
            mask,
            variant,
            tau,
        };
        ds.check_targets()?;
        Ok(ds)
    }

    fn check_targets(&self) -> Result<()> {
        let t = self.targets.data();
        let (c, nt, ny, nx) = t.dim();
        for ci in 0..c {
            for ti in 0..nt {
                let mut ss = 0.0;
                for y in 0..ny {
                    for x in 0..nx {
                        if self.mask.as_ref().is_none_or(|m| !m.is_land(y, x)) {
                            ss += t[[ci, ti, y, x]].powi(2);
                        }
                    }
                }
                if ss == 0.0 {
                    return Err(Error::DegenerateTarget(format!(
                        "target channel {} is identically zero on ocean cells at slice {ti}",
                        self.targets.channels()[ci]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        (self.inputs.n_times() + 1).saturating_sub(2 * self.tau)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn mask(&self) -> Option<&LandMask> {
        self.mask.as_ref()
    }

    pub fn inputs(&self) -> &FieldStack {
        &self.inputs
    }

    pub fn targets(&self) -> &FieldStack {
        &self.targets
    }

    /// Input and target stacks of window `s`.
    pub fn window(&self, s: usize) -> Result<(FieldStack, FieldStack)> {
        if s >= self.len() {
            return Err(Error::invalid(format!("window {s} out of range ({} windows)", self.len())));
        }
        let tau = self.tau;
        match self.variant {
            Variant::Fnotd => Ok((
                self.inputs.time_range(s..s + tau)?,
                self.targets.time_range(s + tau..s + 2 * tau)?,
            )),
            Variant::Fno => Ok((
                self.inputs.time_range(s + tau - 1..s + tau)?,
                self.targets.time_range(s + tau..s + tau + 1)?,
            )),
        }
    }
}

/// Train and held-out window ranges: the last `ceil(frac * n)` windows are
/// held out, and `gap` windows before them are dropped.
pub fn split_windows(n: usize, frac: f64, gap: usize) -> Result<(Range<usize>, Range<usize>)> {
    if !(0.0..1.0).contains(&frac) {
        return Err(Error::invalid(format!("held-out fraction {frac} outside [0, 1)")));
    }
    let held = (frac * n as f64).ceil() as usize;
    let held_start = n - held;
    let train_end = held_start.saturating_sub(gap);
    if train_end == 0 {
        return Err(Error::invalid(format!(
            "{n} windows leave no training data after holding out {held} with gap {gap}"
        )));
    }
    Ok((0..train_end, held_start..n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use ndarray::Array4;

    fn stacks(nt: usize) -> (FieldStack, FieldStack) {
        let g = Grid::periodic(4, 4, 1.0, 1.0).unwrap();
        let x = Array4::from_shape_fn((2, nt, 4, 4), |(c, t, y, x)| (c * 1000 + t * 10 + y + x) as f64);
        let y = Array4::from_shape_fn((1, nt, 4, 4), |(_, t, y, x)| (t * 10 + y + x) as f64);
        (
            FieldStack::new(x, vec!["sea_level".into(), "wind".into()], 2.0, 0.0, g.clone()).unwrap(),
            FieldStack::new(y, vec!["sea_level".into()], 2.0, 0.0, g).unwrap(),
        )
    }

    #[test]
    fn windows_align_for_both_variants() {
        let (x, y) = stacks(20);
        let st = NormStats::compute(&x, &y, None, 0..20).unwrap();
        let td = WindowDataset::new(&x, &y, None, &st, Variant::Fnotd, 4).unwrap();
        let fno = WindowDataset::new(&x, &y, None, &st, Variant::Fno, 4).unwrap();
        assert_eq!(td.len(), 13);
        assert_eq!(fno.len(), 13);
        let (a, b) = td.window(3).unwrap();
        assert_eq!((a.n_times(), b.n_times()), (4, 4));
        assert_eq!(a.t0(), 6.0);
        assert_eq!(b.t0(), 14.0);
        let (c, d) = fno.window(3).unwrap();
        assert_eq!((c.n_times(), d.n_times()), (1, 1));
        assert_eq!(c.t0(), 12.0);
        // same lead-1 target
        assert_eq!(d.data(), b.time_range(0..1).unwrap().data());
        assert!(td.window(13).is_err());
    }

    #[test]
    fn degenerate_target_rejected() {
        let (x, y) = stacks(10);
        let st = NormStats::compute(&x, &y, None, 0..10).unwrap();
        let mut zero = y.clone();
        let m = st.targets.mean[0];
        zero.data_mut().slice_mut(ndarray::s![0, 5, .., ..]).fill(m);
        assert!(matches!(
            WindowDataset::new(&x, &zero, None, &st, Variant::Fnotd, 2),
            Err(Error::DegenerateTarget(_))
        ));
    }

    #[test]
    fn split_with_gap() {
        let (tr, ho) = split_windows(100, 0.1, 16).unwrap();
        assert_eq!(ho, 90..100);
        assert_eq!(tr, 0..74);
        assert!(split_windows(10, 0.5, 5).is_err());
    }
}
