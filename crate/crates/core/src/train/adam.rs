use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::graph::ParamGrads;
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(config_err!("Adam needs betas in [0, 1) and eps > 0, got {self:?}"));
        }
        Ok(())
    }
}

/// First and second moments per parameter (aligned with the store) and the
/// shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<E: Element = f32> {
    pub t: u64,
    pub m: Vec<Option<Tensor<E>>>,
    pub v: Vec<Option<Tensor<E>>>,
}

impl<E: Element> AdamState<E> {
    pub fn new(num_params: usize) -> Self {
        Self {
            t: 0,
            m: vec![None; num_params],
            v: vec![None; num_params],
        }
    }
}

/// One bias-corrected Adam update of `param` in place, at step `t` (1-based).
pub fn adam_update<E: Element>(param: &mut [E], grad: &[E], m: &mut [E], v: &mut [E], t: u64, lr: f64, cfg: &AdamConfig) {
    let c = |x: f64| E::from_f64_lossy(x);
    let (b1, b2) = (c(cfg.beta1), c(cfg.beta2));
    let (one_b1, one_b2) = (E::one() - b1, E::one() - b2);
    let t = i32::try_from(t).unwrap_or(i32::MAX);
    let bc1 = E::one() - b1.powi(t);
    let bc2 = E::one() - b2.powi(t);
    let (lr, eps) = (c(lr), c(cfg.eps));
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + one_b1 * g;
        *v = b2 * *v + one_b2 * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Applies one Adam step to every parameter that has a gradient. The step
/// counter advances even when all gradients are zero. A non-finite gradient
/// aborts before any parameter is touched.
pub fn adam_step<E: Element>(
    params: &mut ParamStore<E>,
    grads: &ParamGrads<E>,
    state: &mut AdamState<E>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(config_err!("learning rate must be positive, got {lr}"));
    }
    if state.m.len() != params.len() {
        return Err(Error::State(format!(
            "optimizer state covers {} parameters, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (id, g) in grads.iter() {
        if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
            let p = params.param(id);
            return Err(Error::NonFinite(format!(
                "gradient of {} (shape {:?}) has {} at element {bad} before step {}",
                p.name,
                g.shape(),
                g.data()[bad],
                state.t + 1
            )));
        }
    }
    state.t += 1;
    for (id, g) in grads.iter() {
        let i = id.0;
        let shape = g.shape().to_vec();
        let m = state.m[i].get_or_insert_with(|| Tensor::zeros(shape.clone()));
        let v = state.v[i].get_or_insert_with(|| Tensor::zeros(shape));
        adam_update(params.tensor_mut(id).data_mut(), g.data(), m.data_mut(), v.data_mut(), state.t, lr, cfg);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let (mut p, mut m, mut v) = ([1.0f64], [0.0], [0.0]);
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1, 1e-3, &AdamConfig::default());
        assert!((p[0] - (1.0 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let (mut p, mut m, mut v) = ([0.5f32], [0.0], [0.0]);
        adam_update(&mut p, &[0.0], &mut m, &mut v, 1, 1e-3, &AdamConfig::default());
        assert_eq!(p[0], 0.5);
    }
}
