//! Adam with bias correction and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnops::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Complex parameters are stored as
/// interleaved pairs, so real and imaginary parts update independently.
pub fn adam_step(params: &mut ParamStore, grads: &ParamStore, state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) || !params.same_layout(&state.v) {
        return Err(Error::invalid("parameter, gradient and moment layouts differ"));
    }
    if let Some(p) = grads.iter().find(|p| p.data.iter().any(|g| !g.is_finite())) {
        return Err(Error::numeric(format!("non-finite gradient in {}", p.name)));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = &grads.at(i).data;
        let m = &mut state.m.at_mut(i).data;
        for (mk, gk) in m.iter_mut().zip(g) {
            *mk = cfg.beta1 * *mk + (1.0 - cfg.beta1) * gk;
        }
        let v = &mut state.v.at_mut(i).data;
        for (vk, gk) in v.iter_mut().zip(g) {
            *vk = cfg.beta2 * *vk + (1.0 - cfg.beta2) * gk * gk;
        }
        let (m, v) = (&state.m.at(i).data, &state.v.at(i).data);
        for ((p, mk), vk) in params.at_mut(i).data.iter_mut().zip(m).zip(v) {
            *p -= lr * (mk / c1) / ((vk / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `lr_min + (lr0 - lr_min) (1 + cos(pi e / (E - 1))) / 2`; a single-epoch
/// schedule stays at `lr0`.
pub fn cosine_lr(epoch: usize, epochs: usize, lr0: f64, lr_min: f64) -> f64 {
    if epochs <= 1 {
        return lr0;
    }
    let phase = std::f64::consts::PI * epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + phase.cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnops::ParamKind;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.push("p", ParamKind::Real, vec![vals.len()], vals.to_vec()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = store(&[0.5, -1.0]);
        let g = store(&[0.0, 0.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(p.at(0).data, vec![0.5, -1.0]);
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamConfig::default();
        for g0 in [3.0, -0.02, 1e-6] {
            let mut p = store(&[0.0]);
            let mut st = AdamState::new(&p);
            adam_step(&mut p, &store(&[g0]), &mut st, 1e-3, &cfg).unwrap();
            // m_hat = g, v_hat = g^2
            let want = 1e-3 * g0.abs() / (g0.abs() + cfg.eps);
            assert!((p.at(0).data[0].abs() - want).abs() < 1e-18);
            assert!(p.at(0).data[0] * g0 < 0.0);
        }
    }

    #[test]
    fn symmetric_gradients_give_opposite_updates() {
        let mut p = store(&[0.0, 0.0]);
        let mut st = AdamState::new(&p);
        for _ in 0..3 {
            adam_step(&mut p, &store(&[0.7, -0.7]), &mut st, 1e-2, &AdamConfig::default()).unwrap();
        }
        let d = &p.at(0).data;
        assert_eq!(d[0], -d[1]);
        assert!(d[0] < 0.0);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = store(&[0.0]);
        let mut st = AdamState::new(&p);
        let r = adam_step(&mut p, &store(&[f64::NAN]), &mut st, 1e-3, &AdamConfig::default());
        assert!(matches!(r, Err(Error::NumericFailure { .. })));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn cosine_schedule_values() {
        assert_eq!(cosine_lr(0, 50, 1e-3, 0.0), 1e-3);
        assert!((cosine_lr(49, 50, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(10, 21, 1e-3, 1e-4) - 5.5e-4).abs() < 1e-15);
        let lrs: Vec<f64> = (0..20).map(|e| cosine_lr(e, 20, 1e-3, 0.0)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
