//! Pointwise layers with hand-written reverse-mode gradients, the parameter
//! store, and a central finite-difference gradient checker.
//!
//! Fields are flat `[c, P]` matrices where `P` is the number of grid points
//! (`tau * ny * nx`); every op here acts on each column independently.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Real,
    /// Interleaved `(re, im)` pairs; `shape` counts complex entries.
    Complex,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    /// Number of real scalars (complex entries count twice).
    pub fn count(&self) -> usize {
        self.data.len()
    }
}

/// Named parameters in a fixed insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, kind: ParamKind, shape: Vec<usize>, data: Vec<f64>) -> Result<usize> {
        let name = name.into();
        let mult = if kind == ParamKind::Complex { 2 } else { 1 };
        let want = shape.iter().product::<usize>() * mult;
        if data.len() != want {
            return Err(Error::invalid(format!(
                "parameter {name}: {} values for shape {shape:?}",
                data.len()
            )));
        }
        if self.index_of(&name).is_some() {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.params.push(Param { name, kind, shape, data });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn at(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total real scalars.
    pub fn total_count(&self) -> usize {
        self.params.iter().map(Param::count).sum()
    }

    /// Same names and shapes, all zeros: the gradient slot layout.
    pub fn zeros_like(&self) -> Self {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    data: vec![0.0; p.data.len()],
                    ..p.clone()
                })
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.kind == b.kind && a.shape == b.shape)
    }

    /// `self += other`; layouts must match.
    pub fn add_assign(&mut self, other: &ParamStore) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::invalid("parameter layouts differ"));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for p in &mut self.params {
            p.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|x| x.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Uniform `(-1/sqrt(c_in), 1/sqrt(c_in))` samples for a real layer.
pub fn init_uniform<R: Rng + ?Sized>(n: usize, c_in: usize, rng: &mut R) -> Vec<f64> {
    let s = 1.0 / (c_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-s..s)).collect()
}

fn check_affine(v: &ArrayView2<'_, f64>, a: &ArrayView2<'_, f64>, bias: Option<ArrayView1<'_, f64>>) -> Result<()> {
    if a.ncols() != v.nrows() {
        return Err(Error::invalid(format!(
            "affine weight has {} inputs, field has {} channels",
            a.ncols(),
            v.nrows()
        )));
    }
    if let Some(b) = bias {
        if b.len() != a.nrows() {
            return Err(Error::invalid(format!(
                "bias has {} entries, expected {}",
                b.len(),
                a.nrows()
            )));
        }
    }
    Ok(())
}

/// `out[:, p] = A v[:, p] + bias` at every grid point.
pub fn pointwise_affine(
    v: ArrayView2<'_, f64>,
    a: ArrayView2<'_, f64>,
    bias: Option<ArrayView1<'_, f64>>,
) -> Result<Array2<f64>> {
    check_affine(&v, &a, bias)?;
    let mut out = match bias {
        Some(b) => b
            .insert_axis(Axis(1))
            .broadcast((a.nrows(), v.ncols()))
            .unwrap()
            .to_owned(),
        None => Array2::zeros((a.nrows(), v.ncols())),
    };
    general_mat_mul(1.0, &a, &v, 1.0, &mut out);
    Ok(out)
}

/// Gradients of [`pointwise_affine`]: `(dv, dA, dbias)`.
pub fn pointwise_affine_vjp(
    v: ArrayView2<'_, f64>,
    a: ArrayView2<'_, f64>,
    g: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, Array2<f64>, Array1<f64>)> {
    check_affine(&v, &a, None)?;
    if g.dim() != (a.nrows(), v.ncols()) {
        return Err(Error::invalid("affine cotangent shape mismatch"));
    }
    let mut dv = Array2::zeros(v.dim());
    general_mat_mul(1.0, &a.t(), &g, 0.0, &mut dv);
    let mut da = Array2::zeros(a.dim());
    general_mat_mul(1.0, &g, &v.t(), 0.0, &mut da);
    Ok((dv, da, g.sum_axis(Axis(1))))
}

/// Pointwise nonlinearity. `Identity` is a diagnostic mode that makes the
/// whole network linear.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation. Not monotone: it dips to about -0.17 near
/// x = -0.75 before returning to 0 at -inf.
///
/// Evaluated through the identity `(1 + tanh z) / 2 = 1 / (1 + e^{-2z})`,
/// which costs one `exp` instead of a `tanh`.
pub fn gelu(x: f64) -> f64 {
    x * logistic(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    gelu_and_grad(x).1
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * GELU_C * (x + GELU_A * x * x * x)).exp())
}

fn gelu_and_grad(x: f64) -> (f64, f64) {
    let s = logistic(x);
    // 1 - tanh^2 = 4 s (1 - s)
    let d = s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    (x * s, d)
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Identity => x,
        }
    }

    pub fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_grad(x),
            Activation::Identity => 1.0,
        }
    }

    /// Applies in place and returns the elementwise derivative at the
    /// original values.
    pub fn apply_with_grad(self, v: &mut [f64]) -> Vec<f64> {
        match self {
            Activation::Identity => vec![1.0; v.len()],
            Activation::Gelu => v
                .iter_mut()
                .map(|x| {
                    let (y, d) = gelu_and_grad(*x);
                    *x = y;
                    d
                })
                .collect(),
        }
    }
}

/// Elementwise activation on any slice.
pub fn activation(v: &[f64], act: Activation) -> Vec<f64> {
    v.iter().map(|&x| act.apply(x)).collect()
}

/// Parameters of the pointwise MLP `fc2(sigma(fc1 v))`, hidden width = `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl MlpParams {
    pub fn zeros(c: usize) -> Self {
        MlpParams {
            w1: Array2::zeros((c, c)),
            b1: Array1::zeros(c),
            w2: Array2::zeros((c, c)),
            b2: Array1::zeros(c),
        }
    }
}

/// Saved state of one MLP evaluation.
#[derive(Debug, Clone)]
pub struct MlpCache {
    hidden: Array2<f64>,
    dact: Vec<f64>,
}

/// Applies the MLP at every grid point.
pub fn pointwise_mlp(v: ArrayView2<'_, f64>, p: &MlpParams, act: Activation) -> Result<(Array2<f64>, MlpCache)> {
    if p.w1.dim() != (v.nrows(), v.nrows()) || p.w2.dim() != (v.nrows(), v.nrows()) {
        return Err(Error::invalid("MLP weights must be square in the channel width"));
    }
    let mut hidden = pointwise_affine(v, p.w1.view(), Some(p.b1.view()))?;
    let dact = act.apply_with_grad(hidden.as_slice_mut().unwrap());
    let out = pointwise_affine(hidden.view(), p.w2.view(), Some(p.b2.view()))?;
    Ok((out, MlpCache { hidden, dact }))
}

/// Gradients of [`pointwise_mlp`]: input cotangent and parameter cotangents.
pub fn pointwise_mlp_vjp(
    v: ArrayView2<'_, f64>,
    p: &MlpParams,
    cache: &MlpCache,
    g: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, MlpParams)> {
    let (mut dh, dw2, db2) = pointwise_affine_vjp(cache.hidden.view(), p.w2.view(), g)?;
    dh.as_slice_mut()
        .unwrap()
        .iter_mut()
        .zip(&cache.dact)
        .for_each(|(x, d)| *x *= d);
    let (dv, dw1, db1) = pointwise_affine_vjp(v, p.w1.view(), dh.view())?;
    Ok((
        dv,
        MlpParams {
            w1: dw1,
            b1: db1,
            w2: dw2,
            b2: db2,
        },
    ))
}

/// Worst componentwise relative error between analytic gradients and
/// central differences of a scalar objective.
///
/// `f` evaluates the objective at a full set of input tensors; `grads`
/// holds the analytic gradient of each tensor. At most `samples` randomly
/// chosen coordinates are probed per tensor (all of them when the tensor
/// is smaller). The relative error of one coordinate is
/// `|fd - g| / max(|fd|, |g|, 1e-3 * max|grad of that tensor|)`, so
/// coordinates whose gradient is negligible against the tensor's scale are
/// judged in absolute terms.
pub fn finite_diff_check<F, R>(
    mut f: F,
    inputs: &[Vec<f64>],
    grads: &[Vec<f64>],
    eps: f64,
    samples: usize,
    rng: &mut R,
) -> Result<f64>
where
    F: FnMut(&[Vec<f64>]) -> Result<f64>,
    R: Rng + ?Sized,
{
    if !(1e-8..=1e-4).contains(&eps) {
        return Err(Error::invalid(format!("eps {eps} outside [1e-8, 1e-4]")));
    }
    if samples < 32 {
        return Err(Error::invalid("at least 32 coordinates per tensor must be probed"));
    }
    if inputs.len() != grads.len() || inputs.iter().zip(grads).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::invalid("inputs and gradients differ in layout"));
    }
    let mut work: Vec<Vec<f64>> = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (ti, grad) in grads.iter().enumerate() {
        let n = grad.len();
        if n == 0 {
            continue;
        }
        let coords: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            rand::seq::index::sample(rng, n, samples).into_vec()
        };
        let scale = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        for i in coords {
            let x0 = work[ti][i];
            work[ti][i] = x0 + eps;
            let fp = f(&work)?;
            work[ti][i] = x0 - eps;
            let fm = f(&work)?;
            work[ti][i] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::CheckFailed(format!(
                    "non-finite objective probing tensor {ti} coordinate {i}"
                )));
            }
            let fd = (fp - fm) / (2.0 * eps);
            let denom = fd.abs().max(grad[i].abs()).max(1e-3 * scale);
            if denom > 0.0 {
                worst = worst.max((fd - grad[i]).abs() / denom);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand2(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn affine_identity_and_arithmetic() {
        let v = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = pointwise_affine(v.view(), Array2::eye(2).view(), None).unwrap();
        assert_eq!(out, v);
        let v = Array2::from_shape_vec((2, 1), vec![2.0, 5.0]).unwrap();
        let a = Array2::from_shape_vec((1, 2), vec![1.0, 1.0]).unwrap();
        let b = Array1::from(vec![3.0]);
        let out = pointwise_affine(v.view(), a.view(), Some(b.view())).unwrap();
        assert_eq!(out[[0, 0]], 10.0);
    }

    #[test]
    fn affine_shape_mismatch() {
        let v = Array2::<f64>::zeros((3, 4));
        let a = Array2::<f64>::zeros((2, 2));
        assert!(matches!(
            pointwise_affine(v.view(), a.view(), None),
            Err(Error::InvalidArgument(_))
        ));
        let a = Array2::<f64>::zeros((2, 3));
        let b = Array1::<f64>::zeros(3);
        assert!(pointwise_affine(v.view(), a.view(), Some(b.view())).is_err());
    }

    fn affine_check(corrupt: f64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // 3x2 weight on a 2 x (4*4) field
        let v = rand2(2, 16, &mut rng);
        let a = rand2(3, 2, &mut rng);
        let b: Array1<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = rand2(3, 16, &mut rng);
        let (dv, da, db) = pointwise_affine_vjp(v.view(), a.view(), g.view()).unwrap();
        let grads = vec![
            dv.iter().map(|x| x * corrupt).collect(),
            da.iter().cloned().collect(),
            db.to_vec(),
        ];
        let inputs = vec![v.iter().cloned().collect(), a.iter().cloned().collect(), b.to_vec()];
        let g2 = g.clone();
        finite_diff_check(
            |x| {
                let v = ArrayView2::from_shape((2, 16), &x[0]).unwrap();
                let a = ArrayView2::from_shape((3, 2), &x[1]).unwrap();
                let b = ArrayView1::from(&x[2]);
                Ok(dot(&pointwise_affine(v, a, Some(b))?, &g2))
            },
            &inputs,
            &grads,
            1e-4,
            32,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn affine_gradient_is_exact() {
        assert!(affine_check(1.0) < 1e-9);
    }

    #[test]
    fn checker_flags_corrupted_gradient() {
        assert!(affine_check(1.1) > 1e-2);
    }

    #[test]
    fn checker_rejects_bad_eps_and_nonfinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = vec![vec![1.0]];
        assert!(finite_diff_check(|_| Ok(0.0), &x, &x, 1e-2, 32, &mut rng).is_err());
        assert!(finite_diff_check(|_| Ok(0.0), &x, &x, 1e-6, 8, &mut rng).is_err());
        let r = finite_diff_check(|_| Ok(f64::NAN), &x, &x, 1e-6, 32, &mut rng);
        assert!(matches!(r, Err(Error::CheckFailed(_))));
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        // the tanh term saturates to exactly 1.0 in f64 well before x = 10,
        // so the asymptotic value is reached with equality
        let g = gelu(10.0);
        assert!(g > 9.99 && g <= 10.0, "{g}");
        let dip = gelu(-0.75);
        assert!(dip < 0.0 && dip < gelu(-2.0) && dip < gelu(-0.3));
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for x in [-2.0, -0.5, 0.3, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            let an = gelu_grad(x);
            assert!((fd - an).abs() / an.abs() < 1e-6, "x={x}");
            let mut v = [x];
            let d = Activation::Gelu.apply_with_grad(&mut v);
            assert_eq!(v[0], gelu(x));
            assert_eq!(d[0], an);
        }
    }

    #[test]
    fn mlp_zero_params_and_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut v = rand2(3, 5, &mut rng);
        let (out, _) = pointwise_mlp(v.view(), &MlpParams::zeros(3), Activation::Gelu).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
        let col = v.column(0).to_owned();
        v.column_mut(3).assign(&col);
        let p = MlpParams {
            w1: rand2(3, 3, &mut rng),
            b1: Array1::from(vec![0.1, -0.2, 0.3]),
            w2: rand2(3, 3, &mut rng),
            b2: Array1::from(vec![0.0, 0.5, -0.5]),
        };
        let (out, _) = pointwise_mlp(v.view(), &p, Activation::Gelu).unwrap();
        assert_eq!(out.column(0), out.column(3));
    }

    #[test]
    fn mlp_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 4;
        let v = rand2(c, 16, &mut rng);
        let p = MlpParams {
            w1: rand2(c, c, &mut rng),
            b1: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            w2: rand2(c, c, &mut rng),
            b2: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let g = rand2(c, 16, &mut rng);
        let (_, cache) = pointwise_mlp(v.view(), &p, Activation::Gelu).unwrap();
        let (dv, dp) = pointwise_mlp_vjp(v.view(), &p, &cache, g.view()).unwrap();
        let flat = |a: &Array2<f64>| a.iter().cloned().collect::<Vec<_>>();
        let inputs = vec![flat(&v), flat(&p.w1), p.b1.to_vec(), flat(&p.w2), p.b2.to_vec()];
        let grads = vec![flat(&dv), flat(&dp.w1), dp.b1.to_vec(), flat(&dp.w2), dp.b2.to_vec()];
        let err = finite_diff_check(
            |x| {
                let q = MlpParams {
                    w1: Array2::from_shape_vec((c, c), x[1].clone()).unwrap(),
                    b1: Array1::from(x[2].clone()),
                    w2: Array2::from_shape_vec((c, c), x[3].clone()).unwrap(),
                    b2: Array1::from(x[4].clone()),
                };
                let v = ArrayView2::from_shape((c, 16), &x[0]).unwrap();
                Ok(dot(&pointwise_mlp(v, &q, Activation::Gelu)?.0, &g))
            },
            &inputs,
            &grads,
            1e-6,
            32,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn param_store_layout() {
        let mut s = ParamStore::new();
        s.push("a", ParamKind::Real, vec![2, 3], vec![1.0; 6]).unwrap();
        s.push("r", ParamKind::Complex, vec![2], vec![0.5; 4]).unwrap();
        assert!(s.push("a", ParamKind::Real, vec![1], vec![0.0]).is_err());
        assert!(s.push("b", ParamKind::Real, vec![2], vec![0.0]).is_err());
        assert_eq!(s.total_count(), 10);
        let mut z = s.zeros_like();
        assert!(z.same_layout(&s));
        z.add_assign(&s).unwrap();
        z.scale(2.0);
        assert_eq!(z.get("r").unwrap().data, vec![1.0; 4]);
        assert_eq!(s.index_of("r"), Some(1));
    }
}
