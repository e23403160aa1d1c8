use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Rng, Tape, Tensor, Var};

use super::Linear;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply<S: Real>(self, tape: &mut Tape<S>, x: Var) -> Var {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// Post-norm feed-forward block: `norm(x + contract(act(expand(x))))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FfnBlock {
    pub expand: Linear,
    pub contract: Linear,
    pub activation: Activation,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub eps: f64,
}

impl FfnBlock {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        ratio: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::config("ffn_ratio", "must be at least 1"));
        }
        let expand = Linear::new(store, &format!("{name}.expand"), dim, ratio * dim, true, rng);
        let contract = Linear::new(store, &format!("{name}.contract"), ratio * dim, dim, true, rng);
        let norm_gain = store.insert(format!("{name}.norm.gain"), Tensor::full([dim], S::one()), true);
        let norm_bias = store.insert(format!("{name}.norm.bias"), Tensor::zeros([dim]), true);
        Ok(Self {
            expand,
            contract,
            activation,
            norm_gain,
            norm_bias,
            eps: 1e-5,
        })
    }

    pub fn dim(&self) -> usize {
        self.expand.in_dim
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let h = self.expand.forward(tape, store, x)?;
        let h = self.activation.apply(tape, h);
        let h = self.contract.forward(tape, store, h)?;
        let y = tape.add(x, h)?;
        let gain = tape.param(store, self.norm_gain);
        let bias = tape.param(store, self.norm_bias);
        tape.layer_norm(y, gain, bias, S::lit(self.eps))
    }
}
