use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::scalar::Real;

use super::params::{GradBuffer, ParamStore};
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 1.0 }
    }
}

/// Adaptive-moment optimizer state for one parameter store.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }
}

/// Applies one bias-corrected Adam update in place.
pub fn optimizer_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &GradBuffer<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    ensure!(
        grads.grads.len() == params.len() && state.m.len() == params.len(),
        "optimizer: {} params, {} grads, {} moment buffers",
        params.len(),
        grads.grads.len(),
        state.m.len()
    );
    for (id, g) in params.ids().zip(&grads.grads) {
        ensure!(
            params.get(id).shape() == g.shape(),
            "optimizer: gradient {:?} for parameter {} of shape {:?}",
            g.shape(),
            params.name(id),
            params.get(id).shape()
        );
    }
    let c = state.config;
    let clip = if c.clip_norm > 0.0 {
        let n = grads.norm().as_f64();
        if n > c.clip_norm {
            c.clip_norm / n
        } else {
            1.0
        }
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let bc1 = T::one() - T::lit(c.beta1.powi(t));
    let bc2 = T::one() - T::lit(c.beta2.powi(t));
    let (lr, eps, clip) = (T::lit(c.lr), T::lit(c.eps), T::lit(clip));
    for (i, id) in params.ids().enumerate() {
        let p = params.get_mut(id).data_mut();
        let g = grads.grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let gj = g[j] * clip;
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            p[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
