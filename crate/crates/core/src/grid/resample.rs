//! Bilinear coarse resampling with a sliding sub-cell offset.
//!
//! Coarse sample `k` along an axis sits at fine-grid position
//! `offset + k * factor` (in fine cells). Positions past the last fine cell
//! wrap on periodic axes and clamp to the edge otherwise.

use ndarray::{Array2, Array4};
use rand::Rng;

use super::{FieldStack, Grid, LandMask};
use crate::error::{Error, Result};

/// Sub-cell offset `(dy, dx)` in fine-grid cells, each in `[0, factor)`.
pub type Offset = (f64, f64);

#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w: f64,
}

fn axis_taps(n_fine: usize, factor: usize, offset: f64, periodic: bool) -> Vec<Tap> {
    let n_coarse = n_fine / factor;
    (0..n_coarse)
        .map(|k| {
            let pos = offset + (k * factor) as f64;
            let i0 = pos.floor() as usize;
            let w = pos - i0 as f64;
            let i1 = if i0 + 1 < n_fine {
                i0 + 1
            } else if periodic {
                (i0 + 1) % n_fine
            } else {
                n_fine - 1
            };
            Tap { i0: i0.min(n_fine - 1), i1, w }
        })
        .collect()
}

fn check_args(grid: &Grid, factor: usize, offset: Offset) -> Result<Grid> {
    if factor == 0 {
        return Err(Error::invalid("resampling factor must be positive"));
    }
    if factor >= grid.nx || factor >= grid.ny {
        return Err(Error::invalid(format!(
            "factor {factor} must be smaller than the grid extent {}x{}",
            grid.ny, grid.nx
        )));
    }
    let f = factor as f64;
    for (name, o) in [("dy", offset.0), ("dx", offset.1)] {
        if !(0.0..f).contains(&o) {
            return Err(Error::invalid(format!(
                "offset {name}={o} outside [0, {factor})"
            )));
        }
    }
    Grid::new(
        grid.nx / factor,
        grid.ny / factor,
        grid.dx * f,
        grid.dy * f,
        grid.periodic_x,
        grid.periodic_y,
    )
}

/// Samples every channel and time slice on a grid `factor` times coarser.
pub fn bilinear_resample(fs: &FieldStack, factor: usize, offset: Offset) -> Result<FieldStack> {
    let grid = fs.grid();
    let coarse = check_args(grid, factor, offset)?;
    let ty = axis_taps(grid.ny, factor, offset.0, grid.periodic_y);
    let tx = axis_taps(grid.nx, factor, offset.1, grid.periodic_x);
    let (c, t, _, _) = fs.data().dim();
    let src = fs.data();
    let mut out = Array4::zeros((c, t, coarse.ny, coarse.nx));
    for ci in 0..c {
        for ti in 0..t {
            let plane = src.slice(ndarray::s![ci, ti, .., ..]);
            for (j, a) in ty.iter().enumerate() {
                for (k, b) in tx.iter().enumerate() {
                    let top = (1.0 - b.w) * plane[[a.i0, b.i0]] + b.w * plane[[a.i0, b.i1]];
                    let bot = (1.0 - b.w) * plane[[a.i1, b.i0]] + b.w * plane[[a.i1, b.i1]];
                    out[[ci, ti, j, k]] = (1.0 - a.w) * top + a.w * bot;
                }
            }
        }
    }
    FieldStack::new(out, fs.channels().to_vec(), fs.dt(), fs.t0(), coarse)
}

/// Coarse land mask: a coarse cell is land iff any of its four bilinear
/// parents is land.
pub fn resample_mask(mask: &LandMask, grid: &Grid, factor: usize, offset: Offset) -> Result<LandMask> {
    mask.check_grid(grid)?;
    let coarse = check_args(grid, factor, offset)?;
    let ty = axis_taps(grid.ny, factor, offset.0, grid.periodic_y);
    let tx = axis_taps(grid.nx, factor, offset.1, grid.periodic_x);
    let out = Array2::from_shape_fn((coarse.ny, coarse.nx), |(j, k)| {
        let (a, b) = (ty[j], tx[k]);
        mask.is_land(a.i0, b.i0)
            || mask.is_land(a.i0, b.i1)
            || mask.is_land(a.i1, b.i0)
            || mask.is_land(a.i1, b.i1)
    });
    LandMask::new(out)
}

/// Offset drawn uniformly over `[0, factor) x [0, factor)`.
pub fn draw_offset<R: Rng + ?Sized>(factor: usize, rng: &mut R) -> Offset {
    let f = factor as f64;
    (rng.random::<f64>() * f, rng.random::<f64>() * f)
}

/// Coarsens with a random sliding offset; returns the offset used.
pub fn random_offset_coarsen<R: Rng + ?Sized>(
    fs: &FieldStack,
    factor: usize,
    rng: &mut R,
) -> Result<(FieldStack, Offset)> {
    let offset = draw_offset(factor, rng);
    Ok((bilinear_resample(fs, factor, offset)?, offset))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stack(ny: usize, nx: usize, periodic: bool, f: impl Fn(usize, usize) -> f64) -> FieldStack {
        let g = Grid::new(nx, ny, 1.0, 1.0, periodic, periodic).unwrap();
        let data = Array4::from_shape_fn((1, 1, ny, nx), |(_, _, y, x)| f(y, x));
        FieldStack::new(data, vec!["v".into()], 1.0, 0.0, g).unwrap()
    }

    #[test]
    fn constant_is_preserved() {
        let fs = stack(16, 16, true, |_, _| 3.25);
        for (factor, off) in [(2, (0.0, 0.0)), (2, (0.7, 1.3)), (4, (3.9, 0.1))] {
            let r = bilinear_resample(&fs, factor, off).unwrap();
            assert!(r.data().iter().all(|&v| (v - 3.25).abs() < 1e-14));
        }
    }

    #[test]
    fn affine_exact_in_interior() {
        let (a, b) = (0.3, -1.7);
        let fs = stack(16, 16, false, |y, x| a * x as f64 + b * y as f64);
        let r = bilinear_resample(&fs, 2, (0.5, 0.5)).unwrap();
        let (ny, nx) = r.grid().shape();
        for j in 0..ny - 1 {
            for k in 0..nx - 1 {
                let (py, px) = (0.5 + 2.0 * j as f64, 0.5 + 2.0 * k as f64);
                let want = a * px + b * py;
                assert!((r.data()[[0, 0, j, k]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ramp_integer_offset_picks_even_indices() {
        let fs = stack(8, 8, true, |y, x| (y * 8 + x) as f64);
        let r = bilinear_resample(&fs, 2, (0.0, 0.0)).unwrap();
        assert_eq!(r.grid().shape(), (4, 4));
        for j in 0..4 {
            for k in 0..4 {
                assert_eq!(r.data()[[0, 0, j, k]], ((2 * j) * 8 + 2 * k) as f64);
            }
        }
        assert_eq!(r.grid().dx, 2.0);
    }

    #[test]
    fn bad_arguments() {
        let fs = stack(8, 8, true, |_, _| 0.0);
        assert!(bilinear_resample(&fs, 8, (0.0, 0.0)).is_err());
        assert!(bilinear_resample(&fs, 2, (2.0, 0.0)).is_err());
        assert!(bilinear_resample(&fs, 2, (0.0, -0.1)).is_err());
    }

    #[test]
    fn random_coarsen_is_deterministic() {
        let fs = stack(16, 16, true, |y, x| (y as f64).sin() + x as f64);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let (a, oa) = random_offset_coarsen(&fs, 2, &mut r1).unwrap();
        let (b, ob) = random_offset_coarsen(&fs, 2, &mut r2).unwrap();
        assert_eq!(oa, ob);
        assert_eq!(a, b);
    }

    #[test]
    fn offsets_are_uniform() {
        // continuous U[0, 4): mean 2, variance 16/12
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let (mut sy, mut sx) = (0.0, 0.0);
        for _ in 0..n {
            let (dy, dx) = draw_offset(4, &mut rng);
            assert!((0.0..4.0).contains(&dy) && (0.0..4.0).contains(&dx));
            sy += dy;
            sx += dx;
        }
        let sigma = (16.0f64 / 12.0 / n as f64).sqrt();
        assert!((sy / n as f64 - 2.0).abs() < 3.0 * sigma);
        assert!((sx / n as f64 - 2.0).abs() < 3.0 * sigma);
    }

    #[test]
    fn land_propagates_from_any_parent() {
        let g = Grid::periodic(8, 8, 1.0, 1.0).unwrap();
        let mut m = Array2::from_elem((8, 8), false);
        m[[3, 3]] = true;
        let mask = LandMask::new(m).unwrap();
        let c = resample_mask(&mask, &g, 2, (0.5, 0.5)).unwrap();
        // parents of coarse (1,1) are fine rows/cols {2,3}
        assert!(c.is_land(1, 1));
        assert_eq!(c.ocean_count(), 15);
    }
}
