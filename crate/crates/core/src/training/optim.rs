use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamGroup, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// Global L2 norm of all gradients.
pub fn grad_norm(params: &ParamStore) -> f64 {
    params
        .ids()
        .map(|id| params.grad(id).data().iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales every gradient by `min(1, max_norm / ‖g‖)` and returns the
/// factor.
pub fn clip_gradients(params: &mut ParamStore, max_norm: f64) -> Result<f64> {
    if let Some(id) = params.ids().find(|&id| !params.grad(id).is_finite()) {
        return Err(Error::Numeric {
            name: format!("gradient of {}", params.name(id)),
        });
    }
    let norm = grad_norm(params);
    if norm <= max_norm || norm == 0.0 {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        params.grad_mut(id).data_mut().iter_mut().for_each(|g| *g *= scale);
    }
    Ok(scale)
}

fn group_lr(params: &ParamStore, id: crate::tensor::ParamId, lr: f64, decoder_lr_ratio: f64) -> f64 {
    match params.group(id) {
        ParamGroup::Encoder => lr,
        ParamGroup::Decoder => lr * decoder_lr_ratio,
    }
}

/// `θ ← θ − η·g` with `η = lr` for encoder parameters and
/// `lr · decoder_lr_ratio` for decoder parameters, then zeroes gradients.
pub fn sgd_step(params: &mut ParamStore, lr: f64, decoder_lr_ratio: f64) {
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let eta = group_lr(params, id, lr, decoder_lr_ratio);
        let grad = params.grad(id).data().to_vec();
        for (w, g) in params.value_mut(id).data_mut().iter_mut().zip(grad) {
            *w -= eta * g;
        }
    }
    params.zero_grads();
}

/// Adam with bias correction, honoring the same learning-rate groups.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.value(id).len()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, lr: f64, decoder_lr_ratio: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let eta = group_lr(params, id, lr, decoder_lr_ratio);
            let grad = params.grad(id).data().to_vec();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, g)) in params.value_mut(id).data_mut().iter_mut().zip(grad).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                *w -= eta * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        params.zero_grads();
    }
}

pub enum Optimizer {
    Sgd,
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamStore) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(params)),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, lr: f64, decoder_lr_ratio: f64) {
        match self {
            Optimizer::Sgd => sgd_step(params, lr, decoder_lr_ratio),
            Optimizer::Adam(a) => a.step(params, lr, decoder_lr_ratio),
        }
    }
}
