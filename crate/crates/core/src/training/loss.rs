//! Masked relative-L2 objective.
//!
//! For output variable `v` and lead `l` the per-sample term is
//! `||yhat_v(l) - y_v(l)|| / ||y_v(l)||` with norms taken over ocean cells
//! of one time slice. Terms are summed over variables and averaged over the
//! `N_s` samples of a batch.

use ndarray::{Array4, ArrayView4, Axis};

use crate::error::{Error, Result};
use crate::grid::{FieldStack, LandMask};

/// Which lead times enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeadSelection {
    /// Only lead `l` (1-based).
    Single(usize),
    /// Mean over leads `1..=tau`.
    All,
}

fn leads(sel: LeadSelection, tau: usize) -> Result<Vec<usize>> {
    match sel {
        LeadSelection::Single(l) if (1..=tau).contains(&l) => Ok(vec![l - 1]),
        LeadSelection::Single(l) => Err(Error::invalid(format!("lead {l} outside [1, {tau}]"))),
        LeadSelection::All => Ok((0..tau).collect()),
    }
}

fn check(pred: &ArrayView4<'_, f64>, target: &ArrayView4<'_, f64>, mask: Option<&LandMask>) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::invalid(format!(
            "prediction shape {:?} differs from target shape {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if let Some(m) = mask {
        let (_, _, ny, nx) = pred.dim();
        if m.shape() != (ny, nx) {
            return Err(Error::invalid("mask shape differs from the field shape"));
        }
    }
    Ok(())
}

/// Per-sample loss for one `[c, tau, y, x]` prediction and its gradient
/// with respect to the prediction, both scaled by `1 / n_samples`.
pub fn sample_loss_and_grad(
    pred: ArrayView4<'_, f64>,
    target: ArrayView4<'_, f64>,
    mask: Option<&LandMask>,
    sel: LeadSelection,
    n_samples: usize,
) -> Result<(f64, Array4<f64>)> {
    check(&pred, &target, mask)?;
    let (c, tau, ny, nx) = pred.dim();
    let ls = leads(sel, tau)?;
    let scale = 1.0 / (n_samples as f64 * ls.len() as f64);
    let ocean = |y: usize, x: usize| mask.is_none_or(|m| !m.is_land(y, x));
    let mut grad = Array4::zeros(pred.dim());
    let mut total = 0.0;
    for v in 0..c {
        for &l in &ls {
            let (mut dd, mut yy) = (0.0, 0.0);
            for y in 0..ny {
                for x in 0..nx {
                    if ocean(y, x) {
                        let t = target[[v, l, y, x]];
                        let d = pred[[v, l, y, x]] - t;
                        dd += d * d;
                        yy += t * t;
                    }
                }
            }
            if yy == 0.0 {
                return Err(Error::DegenerateTarget(format!(
                    "target variable {v} at lead {} has zero norm on ocean cells",
                    l + 1
                )));
            }
            let (dn, yn) = (dd.sqrt(), yy.sqrt());
            total += scale * dn / yn;
            if dn > 0.0 {
                let k = scale / (dn * yn);
                for y in 0..ny {
                    for x in 0..nx {
                        if ocean(y, x) {
                            grad[[v, l, y, x]] = k * (pred[[v, l, y, x]] - target[[v, l, y, x]]);
                        }
                    }
                }
            }
        }
    }
    Ok((total, grad))
}

/// Batch loss over paired `[c, tau, y, x]` samples.
pub fn batch_loss(
    preds: &[ArrayView4<'_, f64>],
    targets: &[ArrayView4<'_, f64>],
    mask: Option<&LandMask>,
    sel: LeadSelection,
) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::invalid("batch loss needs equally many (>= 1) predictions and targets"));
    }
    let n = preds.len();
    preds.iter().zip(targets).try_fold(0.0, |acc, (p, t)| {
        Ok(acc + sample_loss_and_grad(p.view(), t.view(), mask, sel, n)?.0)
    })
}

/// Loss of stacks whose time axis holds one sample's leads.
pub fn relative_l2_loss(pred: &FieldStack, target: &FieldStack, mask: Option<&LandMask>, lead: usize) -> Result<f64> {
    if pred.channels() != target.channels() {
        return Err(Error::invalid("prediction and target channels differ"));
    }
    batch_loss(&[pred.data()], &[target.data()], mask, LeadSelection::Single(lead))
}

/// Per-variable masked norm ratios of one sample at one lead, unscaled.
pub fn per_variable_ratios(
    pred: ArrayView4<'_, f64>,
    target: ArrayView4<'_, f64>,
    mask: Option<&LandMask>,
    lead: usize,
) -> Result<Vec<f64>> {
    check(&pred, &target, mask)?;
    let (_, tau, _, _) = pred.dim();
    let l = leads(LeadSelection::Single(lead), tau)?[0];
    let p = pred.index_axis(Axis(1), l);
    let t = target.index_axis(Axis(1), l);
    let mut out = Vec::new();
    for (pv, tv) in p.outer_iter().zip(t.outer_iter()) {
        let (mut dd, mut yy) = (0.0, 0.0);
        for ((y, x), &tt) in tv.indexed_iter() {
            if mask.is_none_or(|m| !m.is_land(y, x)) {
                dd += (pv[[y, x]] - tt).powi(2);
                yy += tt * tt;
            }
        }
        if yy == 0.0 {
            return Err(Error::DegenerateTarget("zero-norm target".into()));
        }
        out.push((dd / yy).sqrt());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn exact_and_doubled() {
        let y = rand4((1, 2, 4, 4), 1);
        let s = LeadSelection::Single(1);
        assert_eq!(batch_loss(&[y.view()], &[y.view()], None, s).unwrap(), 0.0);
        let p = y.mapv(|v| 2.0 * v);
        assert_eq!(batch_loss(&[p.view()], &[y.view()], None, s).unwrap(), 1.0);
    }

    #[test]
    fn batch_mean_of_ratios() {
        let y = Array4::from_elem((1, 1, 2, 2), 1.0);
        let a = y.mapv(|v| v * 1.1);
        let b = y.mapv(|v| v * 0.7);
        let l = batch_loss(&[a.view(), b.view()], &[y.view(), y.view()], None, LeadSelection::Single(1)).unwrap();
        assert!((l - 0.2).abs() < 1e-15);
    }

    #[test]
    fn scale_invariant_and_land_blind() {
        let y = rand4((2, 3, 6, 6), 2);
        let p = rand4((2, 3, 6, 6), 3);
        let mask = LandMask::new(Array2::from_shape_fn((6, 6), |(r, c)| r < 2 && c < 3)).unwrap();
        let s = LeadSelection::Single(2);
        let l0 = batch_loss(&[p.view()], &[y.view()], Some(&mask), s).unwrap();
        let (ps, ys) = (p.mapv(|v| -3.5 * v), y.mapv(|v| -3.5 * v));
        let l1 = batch_loss(&[ps.view()], &[ys.view()], Some(&mask), s).unwrap();
        assert!((l0 - l1).abs() < 1e-14 * l0);
        let mut q = p.clone();
        q[[0, 1, 0, 0]] += 100.0;
        q[[1, 1, 1, 2]] = f64::MAX;
        let l2 = batch_loss(&[q.view()], &[y.view()], Some(&mask), s).unwrap();
        assert_eq!(l0.to_bits(), l2.to_bits());
    }

    #[test]
    fn degenerate_and_bad_lead() {
        let y = Array4::zeros((1, 2, 4, 4));
        let p = rand4((1, 2, 4, 4), 4);
        assert!(matches!(
            batch_loss(&[p.view()], &[y.view()], None, LeadSelection::Single(1)),
            Err(Error::DegenerateTarget(_))
        ));
        let y = rand4((1, 2, 4, 4), 5);
        assert!(batch_loss(&[p.view()], &[y.view()], None, LeadSelection::Single(3)).is_err());
        assert!(batch_loss(&[p.view()], &[y.view()], None, LeadSelection::Single(0)).is_err());
    }

    #[test]
    fn gradient_matches_differences() {
        let y = rand4((2, 3, 4, 4), 6);
        let p = rand4((2, 3, 4, 4), 7);
        let mask = LandMask::new(Array2::from_shape_fn((4, 4), |(r, c)| r == 0 && c == 0)).unwrap();
        for sel in [LeadSelection::Single(1), LeadSelection::All] {
            let (_, g) = sample_loss_and_grad(p.view(), y.view(), Some(&mask), sel, 3).unwrap();
            let h = 1e-6;
            for i in 0..p.len() {
                let mut a = p.clone();
                let mut b = p.clone();
                a.as_slice_mut().unwrap()[i] += h;
                b.as_slice_mut().unwrap()[i] -= h;
                let fa = sample_loss_and_grad(a.view(), y.view(), Some(&mask), sel, 3).unwrap().0;
                let fb = sample_loss_and_grad(b.view(), y.view(), Some(&mask), sel, 3).unwrap().0;
                let fd = (fa - fb) / (2.0 * h);
                assert!((fd - g.as_slice().unwrap()[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn ratios_per_variable() {
        let y = Array4::from_elem((2, 1, 2, 2), 1.0);
        let mut p = y.clone();
        p.index_axis_mut(Axis(0), 1).mapv_inplace(|v| v * 1.5);
        let r = per_variable_ratios(p.view(), y.view(), None, 1).unwrap();
        assert_eq!(r, vec![0.0, 0.5]);
    }
}
