use std::collections::BTreeMap;

use super::params::{Gradients, ParamStore};
use super::tensor::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Moment estimates, persisted alongside checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

fn check_grads<T: Scalar>(store: &ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
    for (name, g) in grads {
        let p = store.get(name)?;
        if p.len() != g.len() {
            return Err(Error::dim("optimizer", format!("gradient for `{name}` has {} entries, parameter {}", g.len(), p.len())));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric { location: format!("gradient of parameter `{name}`") });
        }
    }
    Ok(())
}

/// `p <- p - lr * g`
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::config("optim.lr", "learning rate must be positive"));
    }
    check_grads(store, grads)?;
    let lr = T::c(lr);
    for (name, g) in grads {
        for (p, &d) in store.get_mut(name)?.data_mut().iter_mut().zip(g) {
            *p -= lr * d;
        }
    }
    Ok(())
}

/// Bias-corrected Adam update. Validation happens for every gradient before
/// any parameter is touched, so a rejected step leaves the store unchanged.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if cfg.lr <= 0.0 {
        return Err(Error::config("optim.lr", "learning rate must be positive"));
    }
    check_grads(store, grads)?;
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let step = T::c(cfg.lr / bc1);
    let bc2 = T::c(bc2);
    let eps = T::c(cfg.eps);
    let wd = T::c(cfg.weight_decay);
    for (name, g) in grads {
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
        let p = store.get_mut(name)?.data_mut();
        for i in 0..g.len() {
            let gi = g[i] + wd * p[i];
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            p[i] -= step * m[i] / ((v[i] / bc2).sqrt() + eps);
        }
    }
    Ok(())
}
