//! The Fourier-layer network in its two variants.
//!
//! ```text
//! u_0     = P x
//! u_{l+1} = sigma(W_l u_l + M_l(K_l u_l + b_l))      l = 0..L-1
//! out     = Q u_L
//! ```
//!
//! `K_l` is the spectral linear map, `M_l` a pointwise two-layer MLP, `W_l`
//! a pointwise skip without bias and `b_l` a per-channel bias. The standard
//! FNO maps one time slice to the next; FNOtD maps a `tau`-step window to
//! the following `tau` steps with space-time kernels.

use ndarray::{Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FieldStack;
pub use crate::nnops::Activation;
use crate::nnops::{
    init_uniform, pointwise_affine, pointwise_affine_vjp, pointwise_mlp, pointwise_mlp_vjp, MlpCache, MlpParams,
    ParamKind, ParamStore,
};
use crate::spectral::{init_spectral_weights, KernelPlan, ModeSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Fno,
    Fnotd,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Fno => "fno",
            Variant::Fnotd => "fnotd",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fno" => Ok(Variant::Fno),
            "fnotd" => Ok(Variant::Fnotd),
            _ => Err(Error::invalid(format!("unknown variant {s:?} (expected fno or fnotd)"))),
        }
    }
}

fn default_layers() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub width: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    pub modes: ModeSpec,
    pub tau: usize,
    /// Seconds between consecutive time slices.
    pub dt: f64,
    pub in_channels: Vec<String>,
    pub out_channels: Vec<String>,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelConfig {
    /// Standard FNO: one slice in, the next slice out.
    pub fn fno(width: usize, modes: (usize, usize), dt: f64, in_channels: Vec<String>, out_channels: Vec<String>) -> Self {
        ModelConfig {
            variant: Variant::Fno,
            width,
            layers: default_layers(),
            modes: ModeSpec::spatial(modes.0, modes.1),
            tau: 1,
            dt,
            in_channels,
            out_channels,
            activation: Activation::Gelu,
        }
    }

    pub fn fnotd(
        width: usize,
        modes: (usize, usize, usize),
        tau: usize,
        dt: f64,
        in_channels: Vec<String>,
        out_channels: Vec<String>,
    ) -> Self {
        ModelConfig {
            variant: Variant::Fnotd,
            width,
            layers: default_layers(),
            modes: ModeSpec::space_time(modes.0, modes.1, modes.2),
            tau,
            dt,
            in_channels,
            out_channels,
            activation: Activation::Gelu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 {
            return Err(Error::invalid("layers and width must be >= 1"));
        }
        if self.in_channels.is_empty() || self.out_channels.is_empty() {
            return Err(Error::invalid("model needs at least one input and one output channel"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if self.modes.kx_max == 0 || self.modes.ky_max == 0 {
            return Err(Error::invalid("spatial mode counts must be >= 1"));
        }
        match self.variant {
            Variant::Fno => {
                if self.tau != 1 || self.modes.w_max.is_some() {
                    return Err(Error::invalid("FNO requires tau = 1 and no temporal modes"));
                }
            }
            Variant::Fnotd => {
                let w = self
                    .modes
                    .w_max
                    .ok_or_else(|| Error::invalid("FNOtD requires temporal modes w_max"))?;
                if self.tau < 2 {
                    return Err(Error::invalid("FNOtD requires tau >= 2"));
                }
                if w == 0 || w > self.tau.div_ceil(2) {
                    return Err(Error::invalid(format!(
                        "w_max {w} must lie in [1, ceil(tau/2) = {}]",
                        self.tau.div_ceil(2)
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn c_in(&self) -> usize {
        self.in_channels.len()
    }

    pub fn c_out(&self) -> usize {
        self.out_channels.len()
    }
}

const PER_LAYER: usize = 7;
const W_: usize = 0;
const B_: usize = 1;
const R_: usize = 2;
const FC1_W: usize = 3;
const FC1_B: usize = 4;
const FC2_W: usize = 5;
const FC2_B: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

/// Names, kinds and shapes in storage order.
fn layout(cfg: &ModelConfig) -> Vec<(String, ParamKind, Vec<usize>)> {
    let w = cfg.width;
    let mut out = vec![
        ("P.weight".to_string(), ParamKind::Real, vec![w, cfg.c_in()]),
        ("P.bias".to_string(), ParamKind::Real, vec![w]),
    ];
    for l in 0..cfg.layers {
        let p = format!("layers.{l}");
        out.push((format!("{p}.W"), ParamKind::Real, vec![w, w]));
        out.push((format!("{p}.b"), ParamKind::Real, vec![w]));
        out.push((
            format!("{p}.R"),
            ParamKind::Complex,
            crate::spectral::weight_shape(w, w, &cfg.modes),
        ));
        out.push((format!("{p}.M.fc1.weight"), ParamKind::Real, vec![w, w]));
        out.push((format!("{p}.M.fc1.bias"), ParamKind::Real, vec![w]));
        out.push((format!("{p}.M.fc2.weight"), ParamKind::Real, vec![w, w]));
        out.push((format!("{p}.M.fc2.bias"), ParamKind::Real, vec![w]));
    }
    out.push(("Q.weight".to_string(), ParamKind::Real, vec![cfg.c_out(), w]));
    out.push(("Q.bias".to_string(), ParamKind::Real, vec![cfg.c_out()]));
    out
}

/// Validates the config and draws parameters from `rng`.
pub fn build_model<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Model> {
    config.validate()?;
    Ok(build_unchecked(config, rng))
}

pub(crate) fn build_unchecked<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Model {
    let mut params = ParamStore::new();
    for (name, kind, shape) in layout(&config) {
        let data = match kind {
            ParamKind::Complex => init_spectral_weights(config.width, config.width, config.modes, rng).data,
            ParamKind::Real => {
                // fan-in: last dimension for matrices, the layer's input width for biases
                let fan_in = if name.starts_with("P.") {
                    config.c_in()
                } else {
                    config.width
                };
                init_uniform(shape.iter().product(), fan_in, rng)
            }
        };
        params.push(name, kind, shape, data).expect("layout is consistent");
    }
    Model { config, params }
}

pub fn param_count(model: &Model) -> usize {
    model.params.total_count()
}

/// Saved activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    dims: (usize, usize, usize),
    x: Array2<f64>,
    layers: Vec<LayerCache>,
    last: Array2<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    u: Array2<f64>,
    spectrum: Vec<f64>,
    kb: Array2<f64>,
    mlp: MlpCache,
    dact: Vec<f64>,
}

impl Model {
    /// Wraps existing parameters; names and shapes must match the config.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let want = layout(&config);
        let ok = want.len() == params.len()
            && want
                .iter()
                .zip(params.iter())
                .all(|((n, k, s), p)| *n == p.name && *k == p.kind && *s == p.shape);
        if !ok {
            return Err(Error::invalid("parameters do not match the model configuration"));
        }
        if !params.all_finite() {
            return Err(Error::numeric("model parameters contain non-finite values"));
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.total_count()
    }

    /// Real scalars held by the spectral weights of all layers.
    pub fn spectral_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Complex)
            .map(|p| p.count())
            .sum()
    }

    fn mat(&self, i: usize) -> ArrayView2<'_, f64> {
        let p = self.params.at(i);
        ArrayView2::from_shape((p.shape[0], p.shape[1]), &p.data).unwrap()
    }

    fn vec(&self, i: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params.at(i).data[..])
    }

    fn layer_base(l: usize) -> usize {
        2 + l * PER_LAYER
    }

    fn q_base(&self) -> usize {
        2 + self.config.layers * PER_LAYER
    }

    fn mlp(&self, l: usize) -> MlpParams {
        let b = Self::layer_base(l);
        MlpParams {
            w1: self.mat(b + FC1_W).to_owned(),
            b1: self.vec(b + FC1_B).to_owned(),
            w2: self.mat(b + FC2_W).to_owned(),
            b2: self.vec(b + FC2_B).to_owned(),
        }
    }

    fn check_input(&self, x: &ArrayView4<'_, f64>) -> Result<()> {
        let (c, t, _, _) = x.dim();
        if c != self.config.c_in() {
            return Err(Error::invalid(format!(
                "input has {c} channels, model expects {}",
                self.config.c_in()
            )));
        }
        if t != self.config.tau {
            return Err(Error::invalid(format!(
                "input has {t} time slices, model expects tau = {}",
                self.config.tau
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView4<'_, f64>) -> Result<Array4<f64>> {
        Ok(self.forward_with_cache(x)?.0)
    }

    /// Forward pass that also returns what [`Model::backward`] needs.
    pub fn forward_with_cache(&self, x: ArrayView4<'_, f64>) -> Result<(Array4<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let (_, nt, ny, nx) = x.dim();
        let plan = KernelPlan::new(self.config.modes, nt, ny, nx)?;
        let npts = nt * ny * nx;
        let w = self.config.width;
        let act = self.config.activation;
        let x2 = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.config.c_in(), npts))
            .unwrap();
        let mut u = pointwise_affine(x2.view(), self.mat(0), Some(self.vec(1)))?;
        let mut layers = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let b = Self::layer_base(l);
            let (k, spectrum) = plan.apply(u.as_slice().unwrap(), w, w, &self.params.at(b + R_).data)?;
            let mut kb = Array2::from_shape_vec((w, npts), k).unwrap();
            kb += &self.vec(b + B_).insert_axis(Axis(1));
            let (m, mlp) = pointwise_mlp(kb.view(), &self.mlp(l), act)?;
            let mut pre = pointwise_affine(u.view(), self.mat(b + W_), None)?;
            pre += &m;
            let dact = act.apply_with_grad(pre.as_slice_mut().unwrap());
            if pre.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("non-finite activations in layer {l}")));
            }
            layers.push(LayerCache {
                u: std::mem::replace(&mut u, pre),
                spectrum,
                kb,
                mlp,
                dact,
            });
        }
        let q = self.q_base();
        let out = pointwise_affine(u.view(), self.mat(q), Some(self.vec(q + 1)))?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite output after layer {}",
                self.config.layers
            )));
        }
        let out = out.into_shape_with_order((self.config.c_out(), nt, ny, nx)).unwrap();
        Ok((
            out,
            ForwardCache {
                dims: (nt, ny, nx),
                x: x2,
                layers,
                last: u,
            },
        ))
    }

    /// Reverse pass: gradients for every parameter and for the input.
    pub fn backward(&self, cache: &ForwardCache, g: ArrayView4<'_, f64>) -> Result<(ParamStore, Array4<f64>)> {
        let (nt, ny, nx) = cache.dims;
        if g.dim() != (self.config.c_out(), nt, ny, nx) {
            return Err(Error::invalid("output cotangent shape mismatch"));
        }
        let npts = nt * ny * nx;
        let w = self.config.width;
        let plan = KernelPlan::new(self.config.modes, nt, ny, nx)?;
        let mut grads = self.params.zeros_like();
        let g2 = g
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.config.c_out(), npts))
            .unwrap();
        let q = self.q_base();
        let (mut du, dq, dqb) = pointwise_affine_vjp(cache.last.view(), self.mat(q), g2.view())?;
        set(&mut grads, q, dq.into_raw_vec_and_offset().0);
        set(&mut grads, q + 1, dqb.to_vec());
        for l in (0..self.config.layers).rev() {
            let lc = &cache.layers[l];
            let b = Self::layer_base(l);
            du.as_slice_mut()
                .unwrap()
                .iter_mut()
                .zip(&lc.dact)
                .for_each(|(x, d)| *x *= d);
            let (du_skip, dw, _) = pointwise_affine_vjp(lc.u.view(), self.mat(b + W_), du.view())?;
            let (dkb, dm) = pointwise_mlp_vjp(lc.kb.view(), &self.mlp(l), &lc.mlp, du.view())?;
            set(&mut grads, b + W_, dw.into_raw_vec_and_offset().0);
            set(&mut grads, b + B_, dkb.sum_axis(Axis(1)).to_vec());
            set(&mut grads, b + FC1_W, dm.w1.into_raw_vec_and_offset().0);
            set(&mut grads, b + FC1_B, dm.b1.to_vec());
            set(&mut grads, b + FC2_W, dm.w2.into_raw_vec_and_offset().0);
            set(&mut grads, b + FC2_B, dm.b2.to_vec());
            let du_k = plan.adjoint(
                &lc.spectrum,
                dkb.as_slice().unwrap(),
                w,
                w,
                &self.params.at(b + R_).data,
                &mut grads.at_mut(b + R_).data,
            )?;
            du = du_skip + Array2::from_shape_vec((w, npts), du_k).unwrap();
        }
        let (dx, dp, dpb) = pointwise_affine_vjp(cache.x.view(), self.mat(0), du.view())?;
        set(&mut grads, 0, dp.into_raw_vec_and_offset().0);
        set(&mut grads, 1, dpb.to_vec());
        let dx = dx.into_shape_with_order((self.config.c_in(), nt, ny, nx)).unwrap();
        Ok((grads, dx))
    }

    /// Forward pass on a normalized stack whose channels match the config.
    /// The output stack starts `tau` steps after the input's first slice.
    pub fn forward_fields(&self, x: &FieldStack) -> Result<FieldStack> {
        if x.channels() != self.config.in_channels.as_slice() {
            return Err(Error::invalid(format!(
                "input channels {:?} differ from model channels {:?}",
                x.channels(),
                self.config.in_channels
            )));
        }
        let out = self.forward(x.data())?;
        FieldStack::new(
            out,
            self.config.out_channels.clone(),
            x.dt(),
            x.t0() + self.config.tau as f64 * x.dt(),
            x.grid().clone(),
        )
    }
}

fn set(store: &mut ParamStore, i: usize, data: Vec<f64>) {
    let p = store.at_mut(i);
    debug_assert_eq!(p.data.len(), data.len());
    p.data = data;
}
