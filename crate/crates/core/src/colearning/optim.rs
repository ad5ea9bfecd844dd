use std::f64::consts::PI;

use crate::encoders::{ModelParams, ParamGroup};
use crate::error::{bail, Result};
use crate::numerics::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// `base * (1 + cos(pi t / horizon)) / 2`, zero from `t = horizon` on.
pub fn cosine_lr(base: f64, t: u64, horizon: u64) -> f64 {
    if horizon == 0 || t >= horizon {
        return 0.0;
    }
    base * 0.5 * (1.0 + (PI * t as f64 / horizon as f64).cos())
}

/// Adam moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    /// Completed updates.
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = || params.store.entries().iter().map(|e| Tensor::zeros(e.tensor.shape().to_vec())).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

/// One Adam update of a flat slice. `t` is the 1-based update count used for
/// bias correction.
pub fn adam_slice(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, t: u64) {
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        p[i] -= lr * mhat / (vhat.sqrt() + EPS);
    }
}

/// Applies one update to every parameter with its group's learning rate.
pub fn adam_update(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut AdamState,
    lr_backbone: f64,
    lr_new: f64,
) -> Result<()> {
    if grads.len() != params.store.len() {
        bail!(Contract, "{} gradients for {} parameters", grads.len(), params.store.len());
    }
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        bail!(NonFinite, "gradient of {} is not finite", params.store.entries()[i].name);
    }
    state.step += 1;
    let t = state.step;
    let ids: Vec<_> = params.store.ids().collect();
    for id in ids {
        let i = id.index();
        let lr = match params.store.entries()[i].group {
            ParamGroup::Backbone => lr_backbone,
            ParamGroup::New => lr_new,
        };
        let p = params.store.get_mut(id).data_mut();
        adam_slice(p, grads[i].data(), state.m[i].data_mut(), state.v[i].data_mut(), lr, t);
    }
    params.clamp_tau();
    Ok(())
}
