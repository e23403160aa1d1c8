use crate::error::Result;
use crate::metrics::linear_cost;
use crate::nn::Linear;
use crate::tensor::{ParamId, ParamStore, Real, Rng, Tape, Var};

/// Light MLP head: GAP, then Linear → ReLU → Linear.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Decoder {
    pub hidden: Linear,
    pub out: Linear,
}

impl Decoder {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, in_dim: usize, hidden: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), in_dim, hidden, true, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden, out_dim, true, rng),
        }
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.hidden.weight, self.hidden.bias, self.out.weight, self.out.bias]
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim
    }

    /// `e: [b × c × h × w]`; returns the pooled `[b × c]` input and the
    /// `[b × out]` prediction.
    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, e: Var) -> Result<(Var, Var)> {
        let pooled = tape.gap(e)?;
        let h = self.hidden.forward(tape, store, pooled)?;
        let h = tape.relu(h);
        let pred = self.out.forward(tape, store, h)?;
        Ok((pooled, pred))
    }

    /// Per-sample cost on a `c × h × w` map.
    pub fn cost(&self, spatial: usize) -> u64 {
        let (c, hid, out) = (self.hidden.in_dim, self.hidden.out_dim, self.out.out_dim);
        (c * spatial) as u64 + linear_cost(1, c, hid) + hid as u64 + linear_cost(1, hid, out)
    }
}
