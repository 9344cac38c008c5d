//! Verification metrics: masked RMSE, radially averaged power spectra,
//! the spectral relative RMSE across snapshots, and station extraction.
//!
//! Spectra use the periodogram `|F|^2 / (nx ny)` of the field after the
//! ocean mean is removed and land is zero-filled. Annuli are unit-width
//! bins at `round(sqrt(kx^2 + ky^2))`, with `kx, ky` in cycles per domain
//! length, reported for `1..=min(nx, ny)/2`.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FieldStack, LandMask};
use crate::spectral::{power, Fft2};

fn check_pair(a: &FieldStack, b: &FieldStack, mask: Option<&LandMask>) -> Result<()> {
    if a.grid() != b.grid() || a.n_channels() != b.n_channels() || a.n_times() != b.n_times() {
        return Err(Error::invalid("stacks differ in grid, channels or length"));
    }
    if let Some(m) = mask {
        m.check_grid(a.grid())?;
    }
    Ok(())
}

fn ocean(mask: Option<&LandMask>, y: usize, x: usize) -> bool {
    !mask.is_some_and(|m| m.is_land(y, x))
}

/// Root mean square error over ocean cells, times and channels.
pub fn rmse(pred: &FieldStack, reference: &FieldStack, mask: Option<&LandMask>) -> Result<f64> {
    check_pair(pred, reference, mask)?;
    let (p, r) = (pred.data(), reference.data());
    let (mut ss, mut n) = (0.0, 0usize);
    for ((c, t, y, x), &v) in p.indexed_iter() {
        if ocean(mask, y, x) {
            let d = v - r[[c, t, y, x]];
            ss += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("no ocean samples to compare"));
    }
    Ok((ss / n as f64).sqrt())
}

/// Standard deviation over ocean cells, times and channels.
pub fn masked_std(fs: &FieldStack, mask: Option<&LandMask>) -> Result<f64> {
    let vals: Vec<f64> = fs
        .data()
        .indexed_iter()
        .filter(|((_, _, y, x), _)| ocean(mask, *y, *x))
        .map(|(_, &v)| v)
        .collect();
    if vals.is_empty() {
        return Err(Error::invalid("no ocean samples"));
    }
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    Ok((vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64).sqrt())
}

/// RMSE divided by the standard deviation of the reference over the same
/// cells and times.
pub fn relative_rmse(pred: &FieldStack, reference: &FieldStack, mask: Option<&LandMask>) -> Result<f64> {
    let e = rmse(pred, reference, mask)?;
    let s = masked_std(reference, mask)?;
    if s == 0.0 {
        return Err(Error::DegenerateTarget("reference has zero variance".into()));
    }
    Ok(e / s)
}

/// How land is treated before the transform.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandTreatment {
    /// Subtract the ocean mean, then set land to zero.
    #[default]
    FillZero,
    /// Ignore the mask: subtract the full-field mean and transform as is.
    Unmasked,
}

/// Annulus-averaged periodogram of one snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialSpectrum {
    /// Bin centers `1..=kmax`, cycles per domain length.
    pub k: Vec<f64>,
    /// Mean periodogram value per bin.
    pub power: Vec<f64>,
    pub counts: Vec<usize>,
    /// Periodogram at the origin (zero after mean removal, up to roundoff).
    pub dc: f64,
    /// Total periodogram mass in the corners beyond `kmax`.
    pub beyond: f64,
}

impl RadialSpectrum {
    /// `sum_k P(k) count(k) + dc + beyond`, equal to the sum of squares of
    /// the prepared field.
    pub fn total(&self) -> f64 {
        self.power.iter().zip(&self.counts).map(|(p, &c)| p * c as f64).sum::<f64>() + self.dc + self.beyond
    }
}

fn signed(i: usize, n: usize) -> f64 {
    if 2 * i < n {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Radial bin of every `(ky, kx)` index.
fn radial_bins(ny: usize, nx: usize) -> Array2<usize> {
    Array2::from_shape_fn((ny, nx), |(y, x)| {
        let (a, b) = (signed(y, ny), signed(x, nx));
        (a * a + b * b).sqrt().round() as usize
    })
}

/// Field with the (ocean) mean removed and land zero-filled.
pub fn prepare_field(field: ArrayView2<'_, f64>, mask: Option<&LandMask>, mode: LandTreatment) -> Result<Array2<f64>> {
    let mask = match mode {
        LandTreatment::FillZero => mask,
        LandTreatment::Unmasked => None,
    };
    if let Some(m) = mask {
        if m.shape() != field.dim() {
            return Err(Error::invalid("mask shape differs from the field"));
        }
    }
    if field.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite value in spectrum input"));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for ((y, x), &v) in field.indexed_iter() {
        if ocean(mask, y, x) {
            sum += v;
            n += 1;
        }
    }
    let mean = sum / n.max(1) as f64;
    Ok(Array2::from_shape_fn(field.dim(), |(y, x)| {
        if ocean(mask, y, x) {
            field[[y, x]] - mean
        } else {
            0.0
        }
    }))
}

/// Planned radial spectra for one grid shape.
#[derive(Debug)]
pub struct SpectrumPlan {
    fft: Fft2,
    bins: Array2<usize>,
    kmax: usize,
}

impl SpectrumPlan {
    pub fn new(ny: usize, nx: usize) -> Self {
        SpectrumPlan {
            fft: Fft2::new(ny, nx),
            bins: radial_bins(ny, nx),
            kmax: ny.min(nx) / 2,
        }
    }

    pub fn kmax(&self) -> usize {
        self.kmax
    }

    pub fn radial_psd(&self, field: ArrayView2<'_, f64>, mask: Option<&LandMask>, mode: LandTreatment) -> Result<RadialSpectrum> {
        if field.dim() != self.fft.shape() {
            return Err(Error::invalid("field shape differs from the spectrum plan"));
        }
        let f = prepare_field(field, mask, mode)?;
        let n = f.len() as f64;
        let p = power(&self.fft.forward_real(f.view()));
        let mut sum = vec![0.0; self.kmax + 1];
        let mut counts = vec![0usize; self.kmax + 1];
        let mut beyond = 0.0;
        for (&b, &v) in self.bins.iter().zip(p.iter()) {
            let v = v / n;
            if b <= self.kmax {
                sum[b] += v;
                counts[b] += 1;
            } else {
                beyond += v;
            }
        }
        Ok(RadialSpectrum {
            k: (1..=self.kmax).map(|k| k as f64).collect(),
            power: (1..=self.kmax).map(|k| sum[k] / counts[k] as f64).collect(),
            counts: counts[1..].to_vec(),
            dc: sum[0],
            beyond,
        })
    }
}

/// Radial spectrum of one `[y, x]` snapshot.
pub fn radial_psd(field: ArrayView2<'_, f64>, mask: Option<&LandMask>, mode: LandTreatment) -> Result<RadialSpectrum> {
    let (ny, nx) = field.dim();
    SpectrumPlan::new(ny, nx).radial_psd(field, mask, mode)
}

/// Per-bin relative RMSE of predicted against reference spectra.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrmseSeries {
    pub k: Vec<f64>,
    pub rrmse: Vec<f64>,
}

/// `RRMSE(k) = sqrt(sum_q (P_pred - P_ref)^2 / sum_q P_ref^2)` over the
/// snapshot pairs `q`. Bins where the reference carries no power are left
/// out.
pub fn spectral_rrmse(pred: &[RadialSpectrum], reference: &[RadialSpectrum]) -> Result<RrmseSeries> {
    if pred.is_empty() || pred.len() != reference.len() {
        return Err(Error::invalid("need matching, non-empty snapshot lists"));
    }
    let bins = reference[0].k.len();
    if pred.iter().chain(reference).any(|s| s.k.len() != bins) {
        return Err(Error::invalid("snapshots come from different grids"));
    }
    let mut out = RrmseSeries {
        k: Vec::new(),
        rrmse: Vec::new(),
    };
    for b in 0..bins {
        let (mut num, mut den) = (0.0, 0.0);
        for (p, r) in pred.iter().zip(reference) {
            let d = p.power[b] - r.power[b];
            num += d * d;
            den += r.power[b] * r.power[b];
        }
        if den > 0.0 {
            out.k.push(reference[0].k[b]);
            out.rrmse.push((num / den).sqrt());
        }
    }
    Ok(out)
}

/// Spectra of every `(channel 0, t)` snapshot of a stack.
pub fn stack_spectra(fs: &FieldStack, mask: Option<&LandMask>, mode: LandTreatment) -> Result<Vec<RadialSpectrum>> {
    let (ny, nx) = fs.grid().shape();
    let plan = SpectrumPlan::new(ny, nx);
    (0..fs.n_times())
        .into_par_iter()
        .map(|t| plan.radial_psd(fs.slice2(0, t), mask, mode))
        .collect()
}

/// Time series at one grid cell, per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationSeries {
    pub y: usize,
    pub x: usize,
    pub times: Vec<f64>,
    /// `values[c][t]`.
    pub values: Vec<Vec<f64>>,
}

/// Exact grid-point extraction at `(y, x)` stations, which must be ocean.
pub fn station_series(fs: &FieldStack, stations: &[(usize, usize)], mask: Option<&LandMask>) -> Result<Vec<StationSeries>> {
    let (ny, nx) = fs.grid().shape();
    stations
        .iter()
        .map(|&(y, x)| {
            if y >= ny || x >= nx {
                return Err(Error::invalid(format!("station ({y}, {x}) outside the {ny}x{nx} grid")));
            }
            if !ocean(mask, y, x) {
                return Err(Error::invalid(format!("station ({y}, {x}) is on land")));
            }
            Ok(StationSeries {
                y,
                x,
                times: (0..fs.n_times()).map(|t| fs.time_at(t)).collect(),
                values: (0..fs.n_channels())
                    .map(|c| (0..fs.n_times()).map(|t| fs.slice2(c, t)[[y, x]]).collect())
                    .collect(),
            })
        })
        .collect()
}

/// Reference slices at the prediction's timestamps.
pub fn align_reference(pred: &FieldStack, reference: &FieldStack) -> Result<FieldStack> {
    if pred.n_times() == 0 {
        return reference.time_range(0..0);
    }
    let first = reference
        .time_index(pred.t0())
        .ok_or_else(|| Error::invalid(format!("reference does not contain t = {}", pred.t0())))?;
    if (pred.dt() - reference.dt()).abs() > 1e-9 * reference.dt() || first + pred.n_times() > reference.n_times() {
        return Err(Error::invalid("reference does not cover the prediction"));
    }
    reference
        .select_channels(pred.channels())?
        .time_range(first..first + pred.n_times())
}

/// Everything `eval` reports about one prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: f64,
    pub relative_rmse: Option<f64>,
    pub land_treatment: LandTreatment,
    pub pred_spectra: Vec<RadialSpectrum>,
    pub ref_spectra: Vec<RadialSpectrum>,
    pub rrmse: RrmseSeries,
    pub stations: Vec<StationSeries>,
}

/// Full report for `pred` against the time-aligned `reference`.
pub fn evaluate(
    pred: &FieldStack,
    reference: &FieldStack,
    mask: Option<&LandMask>,
    stations: &[(usize, usize)],
    mode: LandTreatment,
) -> Result<EvalReport> {
    let reference = align_reference(pred, reference)?;
    let e = rmse(pred, &reference, mask)?;
    let rel = match relative_rmse(pred, &reference, mask) {
        Ok(r) => Some(r),
        Err(Error::DegenerateTarget(_)) => None,
        Err(err) => return Err(err),
    };
    let ps = stack_spectra(pred, mask, mode)?;
    let rs = stack_spectra(&reference, mask, mode)?;
    let rrmse = spectral_rrmse(&ps, &rs)?;
    let report = EvalReport {
        rmse: e,
        relative_rmse: rel,
        land_treatment: mode,
        rrmse,
        stations: station_series(pred, stations, mask)?,
        pred_spectra: ps,
        ref_spectra: rs,
    };
    let finite = report.rmse.is_finite()
        && report.rrmse.rrmse.iter().all(|v| v.is_finite())
        && report.pred_spectra.iter().all(|s| s.power.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(Error::numeric("evaluation produced non-finite values"));
    }
    Ok(report)
}

/// Writes `report.json` plus `summary.csv`, `spectra.csv`, `rrmse.csv` and
/// `stations.csv` into `dir`.
pub fn write_report(dir: impl AsRef<Path>, r: &EvalReport) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(r)?;
    json.push('\n');
    std::fs::write(dir.join("report.json"), json)?;

    let csv = |name: &str, header: &str, rows: &mut dyn FnMut(&mut dyn Write) -> std::io::Result<()>| -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(name))?);
        writeln!(f, "{header}")?;
        rows(&mut f)?;
        f.flush()?;
        Ok(())
    };
    csv("summary.csv", "metric,value", &mut |f| {
        writeln!(f, "rmse,{}", r.rmse)?;
        writeln!(f, "relative_rmse,{}", r.relative_rmse.map(|v| v.to_string()).unwrap_or_default())
    })?;
    csv("spectra.csv", "snapshot,source,k,power,count", &mut |f| {
        for (src, list) in [("pred", &r.pred_spectra), ("ref", &r.ref_spectra)] {
            for (q, s) in list.iter().enumerate() {
                for i in 0..s.k.len() {
                    writeln!(f, "{q},{src},{},{},{}", s.k[i], s.power[i], s.counts[i])?;
                }
            }
        }
        Ok(())
    })?;
    csv("rrmse.csv", "k,rrmse", &mut |f| {
        for (k, v) in r.rrmse.k.iter().zip(&r.rrmse.rrmse) {
            writeln!(f, "{k},{v}")?;
        }
        Ok(())
    })?;
    csv("stations.csv", "station,y,x,channel,time,value", &mut |f| {
        for (i, s) in r.stations.iter().enumerate() {
            for (c, vals) in s.values.iter().enumerate() {
                for (t, v) in s.times.iter().zip(vals) {
                    writeln!(f, "{i},{},{},{c},{t},{v}", s.y, s.x)?;
                }
            }
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn stack(data: Array4<f64>) -> FieldStack {
        let (_, _, ny, nx) = data.dim();
        FieldStack::new(data, vec!["sea_level".into()], 1.0, 0.0, Grid::periodic(nx, ny, 1.0, 1.0).unwrap()).unwrap()
    }

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    /// Direct O(N^2) periodogram and binning.
    fn brute_psd(f: &Array2<f64>, mask: Option<&LandMask>) -> (Vec<f64>, Vec<usize>, f64, f64) {
        let (ny, nx) = f.dim();
        let mut mean = 0.0;
        let mut n = 0.0;
        for ((y, x), v) in f.indexed_iter() {
            if mask.is_none_or(|m| !m.is_land(y, x)) {
                mean += v;
                n += 1.0;
            }
        }
        mean /= n;
        let g = Array2::from_shape_fn((ny, nx), |(y, x)| {
            if mask.is_none_or(|m| !m.is_land(y, x)) {
                f[[y, x]] - mean
            } else {
                0.0
            }
        });
        let kmax = ny.min(nx) / 2;
        let mut sum = vec![0.0; kmax + 1];
        let mut cnt = vec![0usize; kmax + 1];
        let mut beyond = 0.0;
        for ky in 0..ny {
            for kx in 0..nx {
                let (mut re, mut im) = (0.0, 0.0);
                for ((y, x), v) in g.indexed_iter() {
                    let ph = -2.0 * PI * (ky as f64 * y as f64 / ny as f64 + kx as f64 * x as f64 / nx as f64);
                    re += v * ph.cos();
                    im += v * ph.sin();
                }
                let p = (re * re + im * im) / (nx * ny) as f64;
                let a = if 2 * ky < ny { ky as f64 } else { ky as f64 - ny as f64 };
                let b = if 2 * kx < nx { kx as f64 } else { kx as f64 - nx as f64 };
                let bin = (a * a + b * b).sqrt().round() as usize;
                if bin <= kmax {
                    sum[bin] += p;
                    cnt[bin] += 1;
                } else {
                    beyond += p;
                }
            }
        }
        let power = (1..=kmax).map(|k| sum[k] / cnt[k] as f64).collect();
        (power, cnt[1..].to_vec(), sum[0], beyond)
    }

    #[test]
    fn rmse_cases() {
        let y = stack(random((1, 3, 4, 4), 1));
        assert_eq!(rmse(&y, &y, None).unwrap(), 0.0);
        let mut shifted = y.clone();
        shifted.data_mut().mapv_inplace(|v| v + 0.25);
        assert!((rmse(&shifted, &y, None).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(rmse(&shifted, &y, None).unwrap(), rmse(&y, &shifted, None).unwrap());

        let g = Grid::periodic(4, 4, 1.0, 1.0).unwrap();
        // 2x2 ocean block within a 4x4 grid: errors 1, -1, 0 and one land cell.
        let mut m = Array2::from_elem((4, 4), true);
        m[[0, 0]] = false;
        m[[0, 1]] = false;
        m[[1, 0]] = false;
        let mask = LandMask::new(m).unwrap();
        let mut e = Array4::zeros((1, 1, 4, 4));
        e[[0, 0, 0, 0]] = 1.0;
        e[[0, 0, 0, 1]] = -1.0;
        e[[0, 0, 1, 1]] = 7.0;
        let a = FieldStack::new(e, vec!["sea_level".into()], 1.0, 0.0, g).unwrap();
        let b = stack(Array4::zeros((1, 1, 4, 4)));
        assert!((rmse(&a, &b, Some(&mask)).unwrap() - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn relative_rmse_scales_by_reference_std() {
        let y = stack(Array4::from_shape_fn((1, 2, 4, 4), |(_, t, y, _)| (t + y) as f64));
        let mut p = y.clone();
        p.data_mut().mapv_inplace(|v| v + 1.0);
        let sd = masked_std(&y, None).unwrap();
        assert!((relative_rmse(&p, &y, None).unwrap() - 1.0 / sd).abs() < 1e-14);
        let flat = stack(Array4::zeros((1, 1, 4, 4)));
        assert!(matches!(relative_rmse(&flat, &flat, None), Err(Error::DegenerateTarget(_))));
    }

    #[test]
    fn single_mode_lands_in_its_bin() {
        let n = 32;
        let f = Array2::from_shape_fn((n, n), |(y, x)| (2.0 * PI * (3.0 * x as f64 / n as f64 + 4.0 * y as f64 / n as f64)).cos());
        let s = radial_psd(f.view(), None, LandTreatment::FillZero).unwrap();
        let total: f64 = s.power.iter().zip(&s.counts).map(|(p, &c)| p * c as f64).sum();
        let five = s.power[4] * s.counts[4] as f64;
        assert!(five / total > 0.99);
        let c = radial_psd(Array2::from_elem((8, 8), 3.5).view(), None, LandTreatment::FillZero).unwrap();
        assert!(c.power.iter().all(|&p| p < 1e-25) && c.dc < 1e-25);
    }

    #[test]
    fn matches_brute_force_and_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = Array2::from_elem((8, 6), false);
        m[[2, 3]] = true;
        m[[5, 0]] = true;
        let mask = LandMask::new(m).unwrap();
        for mask in [None, Some(&mask)] {
            let f = Array2::from_shape_simple_fn((8, 6), || rng.random_range(-2.0..2.0));
            let s = radial_psd(f.view(), mask, LandTreatment::FillZero).unwrap();
            let (p, c, dc, beyond) = brute_psd(&f, mask);
            assert_eq!(s.counts, c);
            for (a, b) in s.power.iter().zip(&p) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
            assert!((s.dc - dc).abs() < 1e-12 && (s.beyond - beyond).abs() < 1e-12);
            let g = prepare_field(f.view(), mask, LandTreatment::FillZero).unwrap();
            let ss: f64 = g.iter().map(|v| v * v).sum();
            assert!((s.total() - ss).abs() / ss < 1e-10);
        }
    }

    #[test]
    fn cyclic_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Array2::from_shape_simple_fn((8, 8), || rng.random_range(-1.0..1.0));
        let g = Array2::from_shape_fn((8, 8), |(y, x)| f[[(y + 3) % 8, (x + 5) % 8]]);
        let a = radial_psd(f.view(), None, LandTreatment::Unmasked).unwrap();
        let b = radial_psd(g.view(), None, LandTreatment::Unmasked).unwrap();
        for (x, y) in a.power.iter().zip(&b.power) {
            assert!((x - y).abs() <= 1e-10 * x.abs());
        }
    }

    #[test]
    fn rrmse_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let snaps: Vec<Array2<f64>> = (0..2).map(|_| Array2::from_shape_simple_fn((8, 8), || rng.random_range(-1.0..1.0))).collect();
        let preds: Vec<Array2<f64>> = (0..2).map(|_| Array2::from_shape_simple_fn((8, 8), || rng.random_range(-1.0..1.0))).collect();
        let spec = |v: &[Array2<f64>]| -> Vec<RadialSpectrum> {
            v.iter().map(|f| radial_psd(f.view(), None, LandTreatment::FillZero).unwrap()).collect()
        };
        let (r, p) = (spec(&snaps), spec(&preds));
        let same = spectral_rrmse(&r, &r).unwrap();
        assert!(same.rrmse.iter().all(|&v| v == 0.0));
        let doubled: Vec<RadialSpectrum> = r
            .iter()
            .map(|s| RadialSpectrum {
                power: s.power.iter().map(|v| 2.0 * v).collect(),
                ..s.clone()
            })
            .collect();
        assert!(spectral_rrmse(&doubled, &r).unwrap().rrmse.iter().all(|&v| (v - 1.0).abs() < 1e-15));

        // Brute-force double loop over bins and snapshots.
        let got = spectral_rrmse(&p, &r).unwrap();
        for (i, k) in got.k.iter().enumerate() {
            let b = *k as usize - 1;
            let mut num = 0.0;
            let mut den = 0.0;
            for q in 0..2 {
                let (pp, _, _, _) = brute_psd(&preds[q], None);
                let (rr, _, _, _) = brute_psd(&snaps[q], None);
                num += (pp[b] - rr[b]).powi(2);
                den += rr[b].powi(2);
            }
            assert!((got.rrmse[i] - (num / den).sqrt()).abs() < 1e-12);
        }
        let swapped = spectral_rrmse(&[p[1].clone(), p[0].clone()], &[r[1].clone(), r[0].clone()]).unwrap();
        for (a, b) in swapped.rrmse.iter().zip(&got.rrmse) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(spectral_rrmse(&p[..1], &r).is_err());
    }

    #[test]
    fn stations() {
        let mut d = Array4::zeros((1, 3, 4, 4));
        d[[0, 1, 2, 3]] = 4.5;
        let fs = stack(d);
        let s = station_series(&fs, &[(2, 3), (2, 3)], None).unwrap();
        assert_eq!(s[0].values[0], vec![0.0, 4.5, 0.0]);
        assert_eq!(s[0], s[1]);
        let mask = LandMask::rectangle(fs.grid(), 2..3, 3..4).unwrap();
        assert!(station_series(&fs, &[(2, 3)], Some(&mask)).is_err());
        assert!(station_series(&fs, &[(9, 0)], None).is_err());
    }

    #[test]
    fn report_self_comparison() {
        let y = stack(random((1, 4, 8, 8), 6));
        let r = evaluate(&y, &y, None, &[(1, 1)], LandTreatment::FillZero).unwrap();
        assert_eq!(r.rmse, 0.0);
        assert!(r.rrmse.rrmse.iter().all(|&v| v == 0.0));
        let later = y.time_range(1..3).unwrap();
        let r2 = evaluate(&later, &y, None, &[], LandTreatment::FillZero).unwrap();
        assert_eq!(r2.rmse, 0.0);
        let dir = tempfile::tempdir().unwrap();
        write_report(dir.path(), &r).unwrap();
        let s = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(s.starts_with("metric,value\nrmse,0\n"));
        assert!(dir.path().join("spectra.csv").exists());
    }
}
