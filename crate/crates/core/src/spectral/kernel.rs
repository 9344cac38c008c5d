//! The spectral linear map `K v = F^-1(R . F(v))` and its exact adjoint.
//!
//! Only retained modes are ever materialized: the transforms are evaluated
//! as dense partial-DFT matrix products, which is cheaper than full FFTs
//! when most coefficients are discarded. The map is real-linear; the output
//! is real by construction because the `x` half-axis inverse keeps
//! `c_k * Re(Z_k e^{i theta})` with `c_0 = 1` and `c_k = 2` otherwise.

use std::f64::consts::PI;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, ArrayView4};
use rand::Rng;

use super::ModeSpec;
use crate::error::{Error, Result};

/// Complex weight tensor `R`, shape `[c_in, c_out, modes]` with modes in
/// `(omega,) ky, kx` order, stored as interleaved `(re, im)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralWeights {
    pub c_in: usize,
    pub c_out: usize,
    pub modes: ModeSpec,
    pub data: Vec<f64>,
}

impl SpectralWeights {
    pub fn zeros(c_in: usize, c_out: usize, modes: ModeSpec) -> Self {
        let len = 2 * c_in * c_out * modes.retained_coefficients();
        SpectralWeights {
            c_in,
            c_out,
            modes,
            data: vec![0.0; len],
        }
    }

    /// `alpha` on every retained mode and the identity in channels.
    pub fn diagonal(c: usize, modes: ModeSpec, alpha: f64) -> Self {
        let mut w = Self::zeros(c, c, modes);
        let m = modes.retained_coefficients();
        for i in 0..c {
            let base = (i * c + i) * m * 2;
            for k in 0..m {
                w.data[base + 2 * k] = alpha;
            }
        }
        w
    }

    pub fn n_modes(&self) -> usize {
        self.modes.retained_coefficients()
    }

    /// Shape `[c_in, c_out, (w,) 2*ky, kx]`.
    pub fn shape(&self) -> Vec<usize> {
        weight_shape(self.c_in, self.c_out, &self.modes)
    }
}

pub(crate) fn weight_shape(c_in: usize, c_out: usize, m: &ModeSpec) -> Vec<usize> {
    let mut s = vec![c_in, c_out];
    if let Some(w) = m.w_max {
        s.push(w);
    }
    s.push(2 * m.ky_max);
    s.push(m.kx_max);
    s
}

/// Uniform `(-s, s)` real and imaginary parts with `s = 1/(c_in*c_out)`.
pub fn init_spectral_weights<R: Rng + ?Sized>(
    c_in: usize,
    c_out: usize,
    modes: ModeSpec,
    rng: &mut R,
) -> SpectralWeights {
    let mut w = SpectralWeights::zeros(c_in, c_out, modes);
    let s = 1.0 / (c_in * c_out) as f64;
    for v in w.data.iter_mut() {
        *v = rng.random_range(-s..s);
    }
    w
}

fn twiddle(k: usize, n: usize, len: usize) -> f64 {
    2.0 * PI * ((k * n) % len) as f64 / len as f64
}

/// Stacked `[cos; sin]` partial-DFT matrix of shape `[2*idx.len(), n]`.
fn forward_basis(idx: &[usize], n: usize) -> Array2<f64> {
    let r = idx.len();
    Array2::from_shape_fn((2 * r, n), |(row, j)| {
        let th = twiddle(idx[row % r], j, n);
        if row < r {
            th.cos()
        } else {
            th.sin()
        }
    })
}

/// Stacked `[cos; sin]` of shape `[2*n, idx.len()]` for the inverse direction.
fn inverse_basis(idx: &[usize], n: usize) -> Array2<f64> {
    let r = idx.len();
    Array2::from_shape_fn((2 * n, r), |(row, k)| {
        let th = twiddle(idx[k], row % n, n);
        if row < n {
            th.cos()
        } else {
            th.sin()
        }
    })
}

/// Precomputed partial-DFT matrices for one `(modes, nt, ny, nx)` block.
#[derive(Debug, Clone)]
pub struct KernelPlan {
    modes: ModeSpec,
    nt: usize,
    ny: usize,
    nx: usize,
    kx: usize,
    ny_r: usize,
    /// Time slices (spatial kernel) or retained temporal modes (space-time).
    nt_r: usize,
    fx: Array2<f64>,
    ix: Array2<f64>,
    fy: Array2<f64>,
    iy: Array2<f64>,
    ft: Option<(Array2<f64>, Array2<f64>)>,
}

impl KernelPlan {
    pub fn new(modes: ModeSpec, nt: usize, ny: usize, nx: usize) -> Result<Self> {
        if nt == 0 {
            return Err(Error::invalid("kernel needs at least one time slice"));
        }
        modes.validate(nt, ny, nx)?;
        let kx = modes.x_count();
        let fx = Array2::from_shape_fn((nx, 2 * kx), |(n, c)| {
            let th = twiddle(c / 2, n, nx);
            if c % 2 == 0 {
                th.cos()
            } else {
                -th.sin()
            }
        });
        let ix = Array2::from_shape_fn((2 * kx, nx), |(c, n)| {
            let k = c / 2;
            let weight = if k == 0 { 1.0 } else { 2.0 } / nx as f64;
            let th = twiddle(k, n, nx);
            if c % 2 == 0 {
                weight * th.cos()
            } else {
                -weight * th.sin()
            }
        });
        let yi = modes.y_indices(ny);
        let (ft, nt_r) = if modes.is_space_time() {
            let ti = modes.t_indices(nt);
            let n = ti.len();
            (Some((forward_basis(&ti, nt), inverse_basis(&ti, nt))), n)
        } else {
            (None, nt)
        };
        Ok(KernelPlan {
            modes,
            nt,
            ny,
            nx,
            kx,
            ny_r: yi.len(),
            nt_r,
            fx,
            ix,
            fy: forward_basis(&yi, ny),
            iy: inverse_basis(&yi, ny),
            ft,
        })
    }

    pub fn modes(&self) -> &ModeSpec {
        &self.modes
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nt, self.ny, self.nx)
    }

    pub fn points(&self) -> usize {
        self.nt * self.ny * self.nx
    }

    /// Modes per weight slab.
    fn weight_modes(&self) -> usize {
        self.modes.retained_coefficients()
    }

    /// Independent slabs sharing one weight tensor: the time slices of a
    /// spatial kernel, or 1 for a space-time kernel.
    fn batches(&self) -> usize {
        if self.ft.is_some() {
            1
        } else {
            self.nt
        }
    }

    /// Complex coefficients per channel.
    pub fn spectrum_len(&self) -> usize {
        self.nt_r * self.ny_r * self.kx
    }

    fn inverse_scale(&self) -> f64 {
        let nt = if self.ft.is_some() { self.nt } else { 1 };
        1.0 / (self.ny * nt) as f64
    }

    fn x_analysis(&self, v: &[f64], c: usize, adjoint_of_synthesis: bool) -> Vec<f64> {
        let rows = c * self.nt * self.ny;
        let vin = ArrayView2::from_shape((rows, self.nx), v).expect("input length");
        let mut xs = Array2::<f64>::zeros((rows, 2 * self.kx));
        if adjoint_of_synthesis {
            general_mat_mul(1.0, &vin, &self.ix.t(), 0.0, &mut xs);
        } else {
            general_mat_mul(1.0, &vin, &self.fx, 0.0, &mut xs);
        }
        xs.into_raw_vec_and_offset().0
    }

    fn x_synthesis(&self, z: &[f64], c: usize, adjoint_of_analysis: bool) -> Vec<f64> {
        let rows = c * self.nt * self.ny;
        let zv = ArrayView2::from_shape((rows, 2 * self.kx), z).unwrap();
        let mut out = Array2::<f64>::zeros((rows, self.nx));
        if adjoint_of_analysis {
            general_mat_mul(1.0, &zv, &self.fx.t(), 0.0, &mut out);
        } else {
            general_mat_mul(1.0, &zv, &self.ix, 0.0, &mut out);
        }
        out.into_raw_vec_and_offset().0
    }

    /// Forward `y` then time stages on `[c, nt, ny, kx]` complex data.
    fn yt_forward(&self, xs: Vec<f64>, c: usize) -> Vec<f64> {
        let dims = [c, self.nt, self.ny, self.kx];
        let (ys, dims) = complex_axis(&xs, dims, 2, &self.fy, self.ny_r, true);
        match &self.ft {
            Some((ft, _)) => complex_axis(&ys, dims, 1, ft, self.nt_r, true).0,
            None => ys,
        }
    }

    /// Unnormalized inverse time then `y` stages back to `[c, nt, ny, kx]`.
    fn yt_inverse(&self, z: &[f64], c: usize) -> Vec<f64> {
        let dims = [c, self.nt_r, self.ny_r, self.kx];
        let (ts, dims) = match &self.ft {
            Some((_, it)) => complex_axis(z, dims, 1, it, self.nt, false),
            None => (z.to_vec(), dims),
        };
        complex_axis(&ts, dims, 2, &self.iy, self.ny, false).0
    }

    /// Unnormalized transform of real `[c, nt, ny, nx]` data to retained
    /// coefficients, interleaved `[c, nt_r, ny_r, kx]`.
    fn analysis(&self, v: &[f64], c: usize) -> Vec<f64> {
        self.yt_forward(self.x_analysis(v, c, false), c)
    }

    /// Adjoint of [`Self::analysis`]: unnormalized inverse along time and
    /// `y`, transpose of the `x` analysis matrix.
    fn analysis_adjoint(&self, z: &[f64], c: usize) -> Vec<f64> {
        self.x_synthesis(&self.yt_inverse(z, c), c, true)
    }

    /// Normalized synthesis of retained coefficients back to real data.
    fn synthesis(&self, z: &[f64], c: usize) -> Vec<f64> {
        let s = self.inverse_scale();
        let scaled: Vec<f64> = z.iter().map(|v| v * s).collect();
        self.x_synthesis(&self.yt_inverse(&scaled, c), c, false)
    }

    /// Adjoint of [`Self::synthesis`].
    fn synthesis_adjoint(&self, g: &[f64], c: usize) -> Vec<f64> {
        let mut z = self.yt_forward(self.x_analysis(g, c, true), c);
        let s = self.inverse_scale();
        z.iter_mut().for_each(|v| *v *= s);
        z
    }

    fn check_weights(&self, c_in: usize, c_out: usize, w: &[f64]) -> Result<()> {
        let want = 2 * c_in * c_out * self.weight_modes();
        if w.len() != want {
            return Err(Error::invalid(format!(
                "spectral weights hold {} values, expected {want}",
                w.len()
            )));
        }
        Ok(())
    }

    /// Forward map on flat `[c_in, nt*ny*nx]` data. Returns the output and
    /// the input's retained spectrum, which the adjoint needs.
    pub fn apply(&self, v: &[f64], c_in: usize, c_out: usize, weights: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_weights(c_in, c_out, weights)?;
        if v.len() != c_in * self.points() {
            return Err(Error::invalid(format!(
                "input holds {} values, expected {}",
                v.len(),
                c_in * self.points()
            )));
        }
        let z = self.analysis(v, c_in);
        let mut o = vec![0.0; 2 * c_out * self.spectrum_len()];
        mix(weights, &z, &mut o, c_in, c_out, self.batches(), self.weight_modes());
        Ok((self.synthesis(&o, c_out), z))
    }

    /// Reverse-mode pass: given the saved input spectrum and the output
    /// cotangent, returns the input cotangent and accumulates the weight
    /// cotangent into `weight_grad`.
    pub fn adjoint(
        &self,
        spectrum: &[f64],
        grad_out: &[f64],
        c_in: usize,
        c_out: usize,
        weights: &[f64],
        weight_grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        self.check_weights(c_in, c_out, weights)?;
        self.check_weights(c_in, c_out, weight_grad)?;
        if grad_out.len() != c_out * self.points() {
            return Err(Error::invalid("cotangent shape mismatch"));
        }
        let og = self.synthesis_adjoint(grad_out, c_out);
        let mut zg = vec![0.0; 2 * c_in * self.spectrum_len()];
        mix_adjoint(
            weights,
            spectrum,
            &og,
            &mut zg,
            weight_grad,
            c_in,
            c_out,
            self.batches(),
            self.weight_modes(),
        );
        Ok(self.analysis_adjoint(&zg, c_in))
    }
}

/// Complex partial DFT along `axis` of a 4-D array of complex values stored
/// as interleaved `(re, im)` pairs. The axis is moved to the front so the
/// whole stage is one matrix product. `basis` stacks `[cos; sin]` rows; the
/// forward direction uses `e^{-i theta}`, the inverse `e^{+i theta}`.
fn complex_axis(
    data: &[f64],
    dims: [usize; 4],
    axis: usize,
    basis: &Array2<f64>,
    n_out: usize,
    forward: bool,
) -> (Vec<f64>, [usize; 4]) {
    let n_in = dims[axis];
    debug_assert_eq!(basis.dim(), (2 * n_out, n_in));
    let mut perm = [axis, 0, 0, 0];
    let mut k = 1;
    for d in 0..4 {
        if d != axis {
            perm[k] = d;
            k += 1;
        }
    }
    let (pairs, tail) = data.as_chunks::<2>();
    debug_assert!(tail.is_empty());
    let view = ArrayView4::from_shape(dims, pairs).expect("stage input length");
    let moved = view.permuted_axes(perm);
    let moved = moved.as_standard_layout();
    let flat = moved.as_slice().unwrap().as_flattened();
    let rest = data.len() / n_in;
    let mat = ArrayView2::from_shape((n_in, rest), flat).unwrap();
    let mut tmp = Array2::<f64>::zeros((2 * n_out, rest));
    general_mat_mul(1.0, basis, &mat, 0.0, &mut tmp);
    let t = tmp.as_slice().unwrap();
    let (g, h) = t.split_at(n_out * rest);
    let mut out = vec![0.0; n_out * rest];
    for ((o, g), h) in out.chunks_exact_mut(2).zip(g.chunks_exact(2)).zip(h.chunks_exact(2)) {
        if forward {
            o[0] = g[0] + h[1];
            o[1] = g[1] - h[0];
        } else {
            o[0] = g[0] - h[1];
            o[1] = g[1] + h[0];
        }
    }
    let mut out_dims = dims;
    out_dims[axis] = n_out;
    if axis == 0 {
        return (out, out_dims);
    }
    let moved_shape = [out_dims[perm[0]], out_dims[perm[1]], out_dims[perm[2]], out_dims[perm[3]]];
    let pairs: Vec<[f64; 2]> = out.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    let back = Array4::from_shape_vec(moved_shape, pairs).unwrap();
    let mut inv = [0usize; 4];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let restored = back.permuted_axes(inv).as_standard_layout().into_owned();
    (restored.into_raw_vec_and_offset().0.into_flattened(), out_dims)
}

/// `out[o, b, m] = sum_i R[i, o, m] * z[i, b, m]` over complex pairs.
fn mix(r: &[f64], z: &[f64], out: &mut [f64], c_in: usize, c_out: usize, nb: usize, m: usize) {
    let m2 = 2 * m;
    for i in 0..c_in {
        for o in 0..c_out {
            let w = &r[(i * c_out + o) * m2..(i * c_out + o + 1) * m2];
            for b in 0..nb {
                let zi = &z[(i * nb + b) * m2..(i * nb + b + 1) * m2];
                let oo = &mut out[(o * nb + b) * m2..(o * nb + b + 1) * m2];
                for ((oc, wc), zc) in oo.chunks_exact_mut(2).zip(w.chunks_exact(2)).zip(zi.chunks_exact(2)) {
                    oc[0] += wc[0] * zc[0] - wc[1] * zc[1];
                    oc[1] += wc[0] * zc[1] + wc[1] * zc[0];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn mix_adjoint(
    r: &[f64],
    z: &[f64],
    og: &[f64],
    zg: &mut [f64],
    rg: &mut [f64],
    c_in: usize,
    c_out: usize,
    nb: usize,
    m: usize,
) {
    let m2 = 2 * m;
    for i in 0..c_in {
        for o in 0..c_out {
            let w = &r[(i * c_out + o) * m2..(i * c_out + o + 1) * m2];
            let wg = &mut rg[(i * c_out + o) * m2..(i * c_out + o + 1) * m2];
            for b in 0..nb {
                let zi = &z[(i * nb + b) * m2..(i * nb + b + 1) * m2];
                let ob = &og[(o * nb + b) * m2..(o * nb + b + 1) * m2];
                let zgi = &mut zg[(i * nb + b) * m2..(i * nb + b + 1) * m2];
                for k in 0..m {
                    let (wr, wi) = (w[2 * k], w[2 * k + 1]);
                    let (gr, gi) = (ob[2 * k], ob[2 * k + 1]);
                    let (zr, zim) = (zi[2 * k], zi[2 * k + 1]);
                    // conj(R) * g
                    zgi[2 * k] += wr * gr + wi * gi;
                    zgi[2 * k + 1] += wr * gi - wi * gr;
                    // g * conj(z)
                    wg[2 * k] += gr * zr + gi * zim;
                    wg[2 * k + 1] += gi * zr - gr * zim;
                }
            }
        }
    }
}

fn check_pair(v: &ArrayView4<'_, f64>, w: &SpectralWeights, m: &ModeSpec) -> Result<KernelPlan> {
    if w.modes != *m {
        return Err(Error::invalid("weight modes differ from the requested mode spec"));
    }
    let (c, nt, ny, nx) = v.dim();
    if c != w.c_in {
        return Err(Error::invalid(format!(
            "input has {c} channels, weights expect {}",
            w.c_in
        )));
    }
    KernelPlan::new(*m, nt, ny, nx)
}

/// `F^-1(R . F(v))` on `[c_in, t, y, x]` input.
///
/// Spatial mode specs transform each time slice independently with shared
/// weights; space-time specs transform the whole `(t, y, x)` block.
pub fn spectral_linear(v: ArrayView4<'_, f64>, weights: &SpectralWeights, m: &ModeSpec) -> Result<Array4<f64>> {
    let plan = check_pair(&v, weights, m)?;
    let (_, nt, ny, nx) = v.dim();
    let flat = v.as_standard_layout();
    let (out, _) = plan.apply(flat.as_slice().unwrap(), weights.c_in, weights.c_out, &weights.data)?;
    Ok(Array4::from_shape_vec((weights.c_out, nt, ny, nx), out).unwrap())
}

/// Reverse-mode gradients `(dv, dR)` of [`spectral_linear`] for cotangent `g`.
pub fn spectral_linear_vjp(
    v: ArrayView4<'_, f64>,
    weights: &SpectralWeights,
    m: &ModeSpec,
    g: ArrayView4<'_, f64>,
) -> Result<(Array4<f64>, SpectralWeights)> {
    let plan = check_pair(&v, weights, m)?;
    let (c, nt, ny, nx) = v.dim();
    if g.dim() != (weights.c_out, nt, ny, nx) {
        return Err(Error::invalid("cotangent shape mismatch"));
    }
    let flat = v.as_standard_layout();
    let z = plan.analysis(flat.as_slice().unwrap(), c);
    let gflat = g.as_standard_layout();
    let mut rg = SpectralWeights::zeros(weights.c_in, weights.c_out, *m);
    let dv = plan.adjoint(&z, gflat.as_slice().unwrap(), c, weights.c_out, &weights.data, &mut rg.data)?;
    Ok((Array4::from_shape_vec((c, nt, ny, nx), dv).unwrap(), rg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{dft_forward, dft_inverse, truncate_modes};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Band-limited random field: random field pushed through the full-FFT
    /// truncation with a strictly smaller mode set.
    fn band_limited(c: usize, nt: usize, ny: usize, nx: usize, m: &ModeSpec, seed: u64) -> Array4<f64> {
        let raw = random4((c, nt, ny, nx), seed);
        let inner = ModeSpec {
            kx_max: m.kx_max,
            ky_max: m.ky_max - 1,
            w_max: m.w_max.map(|w| if w % 2 == 0 { w - 1 } else { w }),
        };
        let mut out = Array4::zeros((c, nt, ny, nx));
        for ci in 0..c {
            let ch = raw.index_axis(ndarray::Axis(0), ci).to_owned().into_dyn();
            let b = if m.is_space_time() {
                let s = dft_forward(ch.view(), &[0, 1, 2]).unwrap();
                dft_inverse(&truncate_modes(&s, &inner).unwrap()).unwrap()
            } else {
                let mut acc = ch.clone();
                for t in 0..nt {
                    let plane = ch.index_axis(ndarray::Axis(0), t).to_owned();
                    let s = dft_forward(plane.view(), &[0, 1]).unwrap();
                    let back = dft_inverse(&truncate_modes(&s, &inner).unwrap()).unwrap();
                    acc.index_axis_mut(ndarray::Axis(0), t).assign(&back);
                }
                acc
            };
            out.index_axis_mut(ndarray::Axis(0), ci)
                .assign(&b.into_dimensionality::<ndarray::Ix3>().unwrap());
        }
        out
    }

    fn max_rel(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
        let scale = b.iter().map(|v| v.abs()).fold(1e-300, f64::max);
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
    }

    #[test]
    fn identity_on_band_limited_input() {
        for m in [ModeSpec::spatial(3, 3), ModeSpec::space_time(3, 3, 3)] {
            let nt = if m.is_space_time() { 6 } else { 1 };
            let v = band_limited(2, nt, 8, 10, &m, 7);
            let w = SpectralWeights::diagonal(2, m, 1.0);
            let out = spectral_linear(v.view(), &w, &m).unwrap();
            assert!(max_rel(&out, &v) < 1e-12, "{m:?}");
        }
    }

    #[test]
    fn zero_weights_give_zero() {
        let m = ModeSpec::space_time(2, 2, 2);
        let v = random4((2, 4, 8, 8), 1);
        let w = SpectralWeights::zeros(2, 3, m);
        let out = spectral_linear(v.view(), &w, &m).unwrap();
        assert_eq!(out.dim(), (3, 4, 8, 8));
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_weight_scales_in_band_harmonic() {
        // brute-force oracle: a 16-point harmonic at kx = 2 is in band for
        // kx_max = 4, so a constant real weight alpha scales it by alpha.
        let m = ModeSpec::spatial(4, 2);
        let alpha = -0.625;
        let v = Array4::from_shape_fn((1, 1, 4, 16), |(_, _, _, x)| (2.0 * PI * 2.0 * x as f64 / 16.0).sin());
        let w = SpectralWeights::diagonal(1, m, alpha);
        let out = spectral_linear(v.view(), &w, &m).unwrap();
        let want = v.mapv(|x| alpha * x);
        assert!(max_rel(&out, &want) < 1e-12);
    }

    #[test]
    fn matches_full_fft_route() {
        // independent route: rustfft forward, per-mode multiply on the
        // retained half-spectrum, zero elsewhere, inverse with real part of
        // the Hermitian completion.
        let m = ModeSpec::space_time(3, 2, 3);
        let (c_in, c_out, nt, ny, nx) = (2, 3, 6, 8, 8);
        let v = random4((c_in, nt, ny, nx), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = init_spectral_weights(c_in, c_out, m, &mut rng);
        let fast = spectral_linear(v.view(), &w, &m).unwrap();

        let ti = m.t_indices(nt);
        let yi = m.y_indices(ny);
        let nm = m.retained_coefficients();
        let mut slow = Array4::<f64>::zeros((c_out, nt, ny, nx));
        let specs: Vec<_> = (0..c_in)
            .map(|i| dft_forward(v.index_axis(ndarray::Axis(0), i).to_owned().into_dyn().view(), &[0, 1, 2]).unwrap())
            .collect();
        for o in 0..c_out {
            let mut acc = ndarray::ArrayD::<num_complex::Complex64>::zeros(ndarray::IxDyn(&[nt, ny, nx]));
            for (a, &t) in ti.iter().enumerate() {
                for (b, &y) in yi.iter().enumerate() {
                    for x in 0..m.kx_max {
                        let mode = (a * yi.len() + b) * m.kx_max + x;
                        let mut sum = num_complex::Complex64::default();
                        for (i, s) in specs.iter().enumerate() {
                            let base = ((i * c_out + o) * nm + mode) * 2;
                            let r = num_complex::Complex64::new(w.data[base], w.data[base + 1]);
                            sum += r * s.data[[t, y, x]];
                        }
                        let weight = if x == 0 { 1.0 } else { 2.0 };
                        acc[[t, y, x]] = sum * weight;
                    }
                }
            }
            let full = crate::spectral::dft_inverse_complex(&crate::spectral::ComplexSpectrum {
                data: acc,
                axes: vec![0, 1, 2],
            })
            .unwrap();
            for ((t, y, x), val) in full.into_dimensionality::<ndarray::Ix3>().unwrap().indexed_iter() {
                slow[[o, t, y, x]] = val.re;
            }
        }
        assert!(max_rel(&fast, &slow) < 1e-12);
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let m = ModeSpec::spatial(2, 2);
        let v = random4((1, 1, 8, 8), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = init_spectral_weights(1, 1, m, &mut rng);
        let g = random4((1, 1, 8, 8), 12);
        let (dv, dw) = spectral_linear_vjp(v.view(), &w, &m, g.view()).unwrap();
        let f = |v: &Array4<f64>, w: &SpectralWeights| {
            dot(spectral_linear(v.view(), w, &m).unwrap().as_slice().unwrap(), g.as_slice().unwrap())
        };
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..64 {
            let mut p = v.clone();
            let mut q = v.clone();
            p.as_slice_mut().unwrap()[i] += eps;
            q.as_slice_mut().unwrap()[i] -= eps;
            let fd = (f(&p, &w) - f(&q, &w)) / (2.0 * eps);
            let an = dv.as_slice().unwrap()[i];
            worst = worst.max((fd - an).abs() / an.abs().max(1e-3));
        }
        for i in 0..w.data.len() {
            let mut p = w.clone();
            let mut q = w.clone();
            p.data[i] += eps;
            q.data[i] -= eps;
            let fd = (f(&v, &p) - f(&v, &q)) / (2.0 * eps);
            let an = dw.data[i];
            worst = worst.max((fd - an).abs() / an.abs().max(1e-3));
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn vjp_is_linear_in_cotangent() {
        let m = ModeSpec::space_time(2, 2, 2);
        let v = random4((2, 4, 8, 8), 20);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = init_spectral_weights(2, 2, m, &mut rng);
        let g = random4((2, 4, 8, 8), 22);
        let (dv1, dw1) = spectral_linear_vjp(v.view(), &w, &m, g.view()).unwrap();
        let g2 = g.mapv(|x| 2.0 * x);
        let (dv2, dw2) = spectral_linear_vjp(v.view(), &w, &m, g2.view()).unwrap();
        assert!(max_rel(&dv2, &dv1.mapv(|x| 2.0 * x)) < 1e-13);
        for (a, b) in dw2.data.iter().zip(&dw1.data) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
        let zero = Array4::zeros(g.dim());
        let (dv0, dw0) = spectral_linear_vjp(v.view(), &w, &m, zero.view()).unwrap();
        assert!(dv0.iter().all(|&x| x == 0.0) && dw0.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn adjoint_identity_space_time() {
        // <K v, g> = <v, K^T g> for the input part of the adjoint.
        let m = ModeSpec::space_time(3, 2, 3);
        let v = random4((2, 6, 8, 10), 30);
        let g = random4((3, 6, 8, 10), 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let w = init_spectral_weights(2, 3, m, &mut rng);
        let kv = spectral_linear(v.view(), &w, &m).unwrap();
        let (dv, _) = spectral_linear_vjp(v.view(), &w, &m, g.view()).unwrap();
        let lhs = dot(kv.as_slice().unwrap(), g.as_slice().unwrap());
        let rhs = dot(v.as_slice().unwrap(), dv.as_slice().unwrap());
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = ModeSpec::spatial(2, 2);
        let v = random4((2, 1, 8, 8), 1);
        let w = SpectralWeights::zeros(3, 1, m);
        assert!(spectral_linear(v.view(), &w, &m).is_err());
        let w = SpectralWeights::zeros(2, 1, ModeSpec::spatial(2, 3));
        assert!(spectral_linear(v.view(), &w, &m).is_err());
    }
}
