use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamStore, Tensor};

/// Linear ramp to `peak` over `warmup` steps, then a half cosine to zero
/// at `total`.
pub fn warmup_cosine_lr(step: usize, warmup: usize, total: usize, peak: f64) -> Result<f64> {
    if total <= warmup {
        return Err(Error::config("total_steps", format!("{total} must exceed warm-up steps {warmup}")));
    }
    let step = step.min(total);
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Adam moments aligned with the entries of one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = store.iter().map(|(_, e)| Tensor::zeros(e.value.shape().to_vec())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Gradients<f32>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Contract("optimizer state does not match parameter store".into()));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.param(store, id) else { continue };
            let g = g.data().to_vec();
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.value_mut(id).data_mut();
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                p[j] -= step * m[j] / (v[j].sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Optimizer state for the trainable model.
#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Adam(Adam),
    Sgd,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, store: &ParamStore<f32>) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(store)),
            OptimizerKind::Sgd => Optimizer::Sgd,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Gradients<f32>, lr: f64) -> Result<()> {
        match self {
            Optimizer::Adam(a) => a.step(store, grads, lr),
            Optimizer::Sgd => {
                let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
                for id in ids {
                    if let Some(g) = grads.param(store, id) {
                        let g = g.data().to_vec();
                        for (p, gv) in store.value_mut(id).data_mut().iter_mut().zip(g) {
                            *p -= lr as f32 * gv;
                        }
                    }
                }
                Ok(())
            }
        }
    }
}
