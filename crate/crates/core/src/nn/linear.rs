use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Rng, Tape, Var};

use super::scaled_uniform;

/// `y = x · Wᵀ + b` over the last axis, with `W` stored as `[out × in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, in_dim: usize, out_dim: usize, trainable: bool, rng: &mut Rng) -> Self {
        let weight = store.insert(format!("{name}.weight"), scaled_uniform(&[out_dim, in_dim], in_dim, rng), trainable);
        let bias = store.insert(format!("{name}.bias"), scaled_uniform(&[out_dim], in_dim, rng), trainable);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::dim("linear", &shape, &[self.out_dim, self.in_dim]));
        }
        let rows = shape[..shape.len() - 1].iter().product();
        let flat = tape.reshape(x, &[rows, self.in_dim])?;
        let w = tape.param(store, self.weight);
        let wt = tape.transpose(w)?;
        let y = tape.matmul(flat, wt)?;
        let b = tape.param(store, self.bias);
        let y = tape.add_bias(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        tape.reshape(y, &out_shape)
    }
}
