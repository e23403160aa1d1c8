use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real, Rng, Tape, Var};

use super::Linear;

/// Denominator inside the attention softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScaling {
    /// `1/sqrt(d / heads)`
    #[default]
    PerHead,
    /// `1/sqrt(d)`
    FullDim,
}

/// Multi-head self-attention with a residual connection:
/// `x + W_o · concat_h softmax(Q_h K_hᵀ · scale) V_h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MhsaLayer {
    pub heads: usize,
    pub dim: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub scaling: AttentionScaling,
}

impl MhsaLayer {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        scaling: AttentionScaling,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(
                "heads",
                format!("token width {dim} is not divisible by {heads} heads"),
            ));
        }
        Ok(Self {
            heads,
            dim,
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
            scaling,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn scale_factor(&self) -> f64 {
        match self.scaling {
            AttentionScaling::PerHead => 1.0 / (self.head_dim() as f64).sqrt(),
            AttentionScaling::FullDim => 1.0 / (self.dim as f64).sqrt(),
        }
    }

    /// `tokens` is `[s × d]` or `[b × s × d]`; the output has the same shape.
    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, tokens: Var) -> Result<Var> {
        let shape = tape.shape(tokens).to_vec();
        let (b, s) = match shape[..] {
            [s, d] if d == self.dim => (1, s),
            [b, s, d] if d == self.dim => (b, s),
            _ => return Err(Error::dim("mhsa", &shape, &[self.dim])),
        };
        if s == 0 {
            return Err(Error::Contract("attention over an empty sequence".into()));
        }
        let (h, dh) = (self.heads, self.head_dim());
        let x = tape.reshape(tokens, &[b, s, self.dim])?;

        let split = |tape: &mut Tape<S>, proj: &Linear| -> Result<Var> {
            let y = proj.forward(tape, store, x)?;
            let y = tape.reshape(y, &[b, s, h, dh])?;
            let y = tape.permute(y, &[0, 2, 1, 3])?;
            tape.reshape(y, &[b * h, s, dh])
        };
        let q = split(tape, &self.q)?;
        let k = split(tape, &self.k)?;
        let v = split(tape, &self.v)?;

        let kt = tape.transpose(k)?;
        let scores = tape.bmm(q, kt)?;
        let scores = tape.scale(scores, S::lit(self.scale_factor()));
        let weights = tape.softmax(scores)?;
        let ctx = tape.bmm(weights, v)?;
        let ctx = tape.reshape(ctx, &[b, h, s, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, s, self.dim])?;
        let attended = self.out.forward(tape, store, ctx)?;
        let y = tape.add(x, attended)?;
        tape.reshape(y, &shape)
    }
}
