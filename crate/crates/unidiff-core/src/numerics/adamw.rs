//! AdamW with decoupled weight decay.
//!
//! Decay is applied to the parameter before the moment-based update and never
//! enters the moment estimates. Bias correction follows the standard
//! formulation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::{GradMap, ParameterStore};
use super::scalar::Scalar;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, weight_decay: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(params: &ParameterStore<T>) -> Self {
        let zeros = |p: &ParameterStore<T>| -> BTreeMap<String, Tensor<T>> {
            p.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec()))).collect()
        };
        AdamWState { m: zeros(params), v: zeros(params), step: 0 }
    }
}

/// One optimizer step over every parameter, in name order.
pub fn adamw_step<T: Scalar>(
    params: &mut ParameterStore<T>,
    grads: &GradMap<T>,
    state: &mut AdamWState<T>,
    cfg: &AdamWConfig,
) -> Result<()> {
    if cfg.lr <= 0.0 {
        return Err(Error::config("lr", "learning rate must be positive"));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let grad = grads
            .get(&name)
            .ok_or_else(|| Error::MissingGrad { name: name.clone() })?;
        let p = params.get_mut(&name)?;
        if grad.shape() != p.shape() {
            return Err(Error::shape("adamw", format!("grad shape for `{name}`")));
        }
        let m = state.m.get_mut(&name).expect("moment state tracks params");
        let v = state.v.get_mut(&name).expect("moment state tracks params");
        let b1 = T::from_f64(cfg.beta1);
        let b2 = T::from_f64(cfg.beta2);
        let one = T::one();
        let lr = T::from_f64(cfg.lr);
        let wd = T::from_f64(cfg.weight_decay);
        let eps = T::from_f64(cfg.eps);
        let bc1 = T::from_f64(bc1);
        let bc2 = T::from_f64(bc2);
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        let gd = grad.data();
        for i in 0..pd.len() {
            // decoupled decay first; moments see only the raw gradient
            pd[i] = pd[i] * (one - lr * wd);
            md[i] = b1 * md[i] + (one - b1) * gd[i];
            vd[i] = b2 * vd[i] + (one - b2) * gd[i] * gd[i];
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
