//! Full complex DFTs backed by `rustfft`.

use std::sync::Arc;

use ndarray::{Array2, ArrayD, ArrayViewD, Axis, Zip};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::ModeSpec;
use crate::error::{Error, Result};

/// Full (two-sided) complex spectrum over `axes` of an array.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    pub data: ArrayD<Complex64>,
    pub axes: Vec<usize>,
}

fn check_axes(ndim: usize, shape: &[usize], axes: &[usize]) -> Result<()> {
    if axes.is_empty() {
        return Err(Error::invalid("no transform axes given"));
    }
    for (i, &a) in axes.iter().enumerate() {
        if a >= ndim {
            return Err(Error::invalid(format!("axis {a} out of range for {ndim}-d array")));
        }
        if axes[..i].contains(&a) {
            return Err(Error::invalid(format!("axis {a} listed twice")));
        }
        if shape[a] < 2 {
            return Err(Error::invalid(format!("axis {a} has length {} < 2", shape[a])));
        }
    }
    Ok(())
}

fn transform_axes(data: &mut ArrayD<Complex64>, axes: &[usize], inverse: bool) {
    let mut planner = FftPlanner::new();
    for &a in axes {
        let n = data.shape()[a];
        let fft = if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        };
        let scale = if inverse { 1.0 / n as f64 } else { 1.0 };
        let mut buf = vec![Complex64::default(); n];
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        for mut lane in data.lanes_mut(Axis(a)) {
            for (b, v) in buf.iter_mut().zip(lane.iter()) {
                *b = *v;
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for (v, b) in lane.iter_mut().zip(buf.iter()) {
                *v = *b * scale;
            }
        }
    }
}

/// Unnormalized forward DFT of a real array over `axes`.
pub fn dft_forward(field: ArrayViewD<'_, f64>, axes: &[usize]) -> Result<ComplexSpectrum> {
    check_axes(field.ndim(), field.shape(), axes)?;
    let mut data = field.mapv(|v| Complex64::new(v, 0.0));
    transform_axes(&mut data, axes, false);
    Ok(ComplexSpectrum {
        data,
        axes: axes.to_vec(),
    })
}

/// Inverse DFT (with `1/N` per axis), returning the full complex result.
pub fn dft_inverse_complex(spec: &ComplexSpectrum) -> Result<ArrayD<Complex64>> {
    check_axes(spec.data.ndim(), spec.data.shape(), &spec.axes)?;
    let mut data = spec.data.clone();
    transform_axes(&mut data, &spec.axes, true);
    Ok(data)
}

/// Inverse DFT, keeping the real part. For spectra of real fields (or their
/// conjugate-symmetric truncations) the discarded imaginary part is roundoff.
pub fn dft_inverse(spec: &ComplexSpectrum) -> Result<ArrayD<f64>> {
    Ok(dft_inverse_complex(spec)?.mapv(|c| c.re))
}

/// Zeroes every coefficient outside the retained set and its conjugate
/// mirror. The last listed axis is `x`, the one before it `y`, and for
/// space-time modes the one before that is time.
pub fn truncate_modes(spec: &ComplexSpectrum, m: &ModeSpec) -> Result<ComplexSpectrum> {
    let need = if m.is_space_time() { 3 } else { 2 };
    if spec.axes.len() < need {
        return Err(Error::invalid(format!(
            "mode spec needs {need} transformed axes, spectrum has {}",
            spec.axes.len()
        )));
    }
    let k = spec.axes.len();
    let ax_x = spec.axes[k - 1];
    let ax_y = spec.axes[k - 2];
    let ax_t = if m.is_space_time() { Some(spec.axes[k - 3]) } else { None };
    let shape = spec.data.shape();
    let (nx, ny) = (shape[ax_x], shape[ax_y]);
    let nt = ax_t.map_or(1, |a| shape[a]);
    m.validate(nt, ny, nx)?;

    let mut keep_y = vec![false; ny];
    for i in m.y_indices(ny) {
        keep_y[i] = true;
    }
    let mut keep_t = vec![false; nt];
    for i in m.t_indices(nt) {
        keep_t[i] = true;
    }
    let in_set = |ix: usize, iy: usize, it: usize| ix < m.kx_max && keep_y[iy] && keep_t[it];

    let mut out = spec.clone();
    for (idx, v) in out.data.indexed_iter_mut() {
        let ix = idx[ax_x];
        let iy = idx[ax_y];
        let it = ax_t.map_or(0, |a| idx[a]);
        let kept = in_set(ix, iy, it)
            || in_set((nx - ix) % nx, (ny - iy) % ny, (nt - it) % nt);
        if !kept {
            *v = Complex64::default();
        }
    }
    Ok(out)
}

/// Planned 2-D complex FFT on `[ny, nx]` arrays.
pub struct Fft2 {
    ny: usize,
    nx: usize,
    fx: Arc<dyn Fft<f64>>,
    fy: Arc<dyn Fft<f64>>,
    ix: Arc<dyn Fft<f64>>,
    iy: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2").field("ny", &self.ny).field("nx", &self.nx).finish()
    }
}

impl Fft2 {
    pub fn new(ny: usize, nx: usize) -> Self {
        let mut p = FftPlanner::new();
        Fft2 {
            ny,
            nx,
            fx: p.plan_fft_forward(nx),
            fy: p.plan_fft_forward(ny),
            ix: p.plan_fft_inverse(nx),
            iy: p.plan_fft_inverse(ny),
        }
    }

    fn run(&self, a: &mut Array2<Complex64>, inverse: bool) {
        assert_eq!(a.dim(), (self.ny, self.nx));
        let (fx, fy) = if inverse { (&self.ix, &self.iy) } else { (&self.fx, &self.fy) };
        for mut row in a.rows_mut() {
            match row.as_slice_mut() {
                Some(s) => fx.process(s),
                None => {
                    let mut buf: Vec<_> = row.to_vec();
                    fx.process(&mut buf);
                    row.iter_mut().zip(buf).for_each(|(d, s)| *d = s);
                }
            }
        }
        let mut buf = vec![Complex64::default(); self.ny];
        for mut col in a.columns_mut() {
            buf.iter_mut().zip(col.iter()).for_each(|(d, s)| *d = *s);
            fy.process(&mut buf);
            col.iter_mut().zip(buf.iter()).for_each(|(d, s)| *d = *s);
        }
        if inverse {
            let s = 1.0 / (self.nx * self.ny) as f64;
            a.mapv_inplace(|v| v * s);
        }
    }

    /// Unnormalized forward transform in place.
    pub fn forward(&self, a: &mut Array2<Complex64>) {
        self.run(a, false)
    }

    /// Inverse transform (with `1/(nx*ny)`) in place.
    pub fn inverse(&self, a: &mut Array2<Complex64>) {
        self.run(a, true)
    }

    pub fn forward_real(&self, field: ndarray::ArrayView2<'_, f64>) -> Array2<Complex64> {
        let mut a = field.mapv(|v| Complex64::new(v, 0.0));
        self.forward(&mut a);
        a
    }

    pub fn inverse_real(&self, mut spec: Array2<Complex64>) -> Array2<f64> {
        self.inverse(&mut spec);
        spec.mapv(|c| c.re)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.ny, self.nx)
    }
}

/// Elementwise squared magnitude helper used by spectra.
pub(crate) fn power(a: &Array2<Complex64>) -> Array2<f64> {
    let mut p = Array2::zeros(a.dim());
    Zip::from(&mut p).and(a).for_each(|p, c| *p = c.norm_sqr());
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn delta_transforms_to_ones() {
        let mut d = Array1::<f64>::zeros(8);
        d[0] = 1.0;
        let s = dft_forward(d.view().into_dyn(), &[0]).unwrap();
        for c in s.data.iter() {
            assert!((c - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn single_harmonic() {
        let n = 16;
        let f = Array1::from_shape_fn(n, |x| (2.0 * PI * 3.0 * x as f64 / n as f64).cos());
        let s = dft_forward(f.view().into_dyn(), &[0]).unwrap();
        for (k, c) in s.data.iter().enumerate() {
            let want = if k == 3 || k == n - 3 { 8.0 } else { 0.0 };
            assert!((c.re - want).abs() < 1e-12 && c.im.abs() < 1e-12, "k={k} {c}");
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Array3::from_shape_fn((4, 4, 4), |_| rng.random_range(-1.0..1.0)).into_dyn();
        let s = dft_forward(f.view(), &[0, 1, 2]).unwrap();
        let back = dft_inverse(&s).unwrap();
        let scale = f.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let err = f.iter().zip(back.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err / scale < 1e-12);
        let e_field: f64 = f.iter().map(|v| v * v).sum();
        let e_spec: f64 = s.data.iter().map(|c| c.norm_sqr()).sum::<f64>() / 64.0;
        assert!((e_field - e_spec).abs() / e_field < 1e-12);
    }

    #[test]
    fn short_axis_rejected() {
        let f = ArrayD::<f64>::zeros(IxDyn(&[1, 4]));
        assert!(dft_forward(f.view(), &[0, 1]).is_err());
        assert!(dft_forward(f.view(), &[1, 1]).is_err());
    }

    fn harmonic2(ny: usize, nx: usize, ky: f64, kx: f64) -> ArrayD<f64> {
        ndarray::Array2::from_shape_fn((ny, nx), |(y, x)| {
            (2.0 * PI * (kx * x as f64 / nx as f64 + ky * y as f64 / ny as f64)).cos()
        })
        .into_dyn()
    }

    #[test]
    fn truncation_in_and_out_of_band() {
        let m = ModeSpec::spatial(4, 4);
        let inside = harmonic2(16, 16, 0.0, 3.0);
        let s = dft_forward(inside.view(), &[0, 1]).unwrap();
        let back = dft_inverse(&truncate_modes(&s, &m).unwrap()).unwrap();
        let err = inside.iter().zip(back.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);

        let outside = harmonic2(16, 16, 0.0, 5.0);
        let s = dft_forward(outside.view(), &[0, 1]).unwrap();
        let back = dft_inverse(&truncate_modes(&s, &m).unwrap()).unwrap();
        assert!(back.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn truncation_is_idempotent_and_keeps_output_real() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Array3::from_shape_fn((8, 8, 8), |_| rng.random_range(-1.0..1.0)).into_dyn();
        let m = ModeSpec::space_time(3, 2, 3);
        let s = dft_forward(f.view(), &[0, 1, 2]).unwrap();
        let once = truncate_modes(&s, &m).unwrap();
        let twice = truncate_modes(&once, &m).unwrap();
        assert_eq!(once, twice);
        let c = dft_inverse_complex(&once).unwrap();
        assert!(c.iter().all(|v| v.im.abs() < 1e-13));
    }

    #[test]
    fn fft2_matches_generic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Array2::from_shape_fn((6, 8), |_| rng.random_range(-1.0..1.0));
        let plan = Fft2::new(6, 8);
        let a = plan.forward_real(f.view());
        let b = dft_forward(f.view().into_dyn(), &[0, 1]).unwrap();
        for (x, y) in a.iter().zip(b.data.iter()) {
            assert!((x - y).norm() < 1e-12);
        }
        let back = plan.inverse_real(a);
        for (x, y) in back.iter().zip(f.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
