use serde::{Deserialize, Serialize};

use super::{DropThreshold, PriorTokenSet};
use crate::error::{Error, Result};
use crate::nn::{Activation, AttentionScaling, FfnBlock, MhsaLayer, PositionalTable};
use crate::tensor::{ParamId, ParamStore, Real, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuserMode {
    #[default]
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuserConfig {
    pub token_dim: usize,
    pub n_tasks: usize,
    pub canonical_index: usize,
    pub theta: DropThreshold,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub mode: FuserMode,
    pub scaling: AttentionScaling,
    pub activation: Activation,
    /// Initial gain of the output layer norm.
    pub norm_gain_init: f64,
}

impl Default for FuserConfig {
    fn default() -> Self {
        Self {
            token_dim: 64,
            n_tasks: 4,
            canonical_index: 0,
            theta: DropThreshold::default(),
            heads: 4,
            ffn_ratio: 2,
            mode: FuserMode::Train,
            scaling: AttentionScaling::PerHead,
            activation: Activation::Gelu,
            norm_gain_init: 1.0,
        }
    }
}

impl FuserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_dim == 0 {
            return Err(Error::config("token_dim", "must be positive"));
        }
        if self.n_tasks == 0 {
            return Err(Error::config("n_tasks", "must be positive"));
        }
        if self.canonical_index >= self.n_tasks {
            return Err(Error::config(
                "canonical_index",
                format!("{} is not below n_tasks = {}", self.canonical_index, self.n_tasks),
            ));
        }
        if self.heads == 0 || !self.token_dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!("token_dim {} is not divisible by {} heads", self.token_dim, self.heads),
            ));
        }
        if !self.norm_gain_init.is_finite() {
            return Err(Error::config("norm_gain_init", "must be finite"));
        }
        if self.ffn_ratio == 0 {
            return Err(Error::config("ffn_ratio", "must be at least 1"));
        }
        Ok(())
    }

    /// Sequence length seen by attention: ensemble token plus priors.
    pub fn sequence_len(&self, mode: FuserMode) -> usize {
        match mode {
            FuserMode::Train => self.n_tasks + 1,
            FuserMode::Infer => 2,
        }
    }
}

/// The two fused outputs, each `[b × d]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusedTokens {
    pub ensemble: Var,
    pub canonical: Var,
}

/// Ensemble token, positional table, attention and feed-forward block.
#[derive(Clone, Debug, PartialEq)]
pub struct EtFuser {
    pub cfg: FuserConfig,
    pub ensemble: ParamId,
    pub positional: PositionalTable,
    pub attention: MhsaLayer,
    pub ffn: FfnBlock,
}

impl EtFuser {
    pub fn new<S: Real>(store: &mut ParamStore<S>, cfg: FuserConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.token_dim;
        let ensemble = store.insert("fuser.ensemble", crate::nn::scaled_uniform(&[d], d, rng), true);
        let positional = PositionalTable::new(store, "fuser.positional", cfg.n_tasks, d, rng);
        let attention = MhsaLayer::new(store, "fuser.attention", d, cfg.heads, cfg.scaling, rng)?;
        let ffn = FfnBlock::new(store, "fuser.ffn", d, cfg.ffn_ratio, cfg.activation, rng)?;
        store.set_value(ffn.norm_gain, Tensor::full([d], S::lit(cfg.norm_gain_init)))?;
        Ok(Self {
            cfg,
            ensemble,
            positional,
            attention,
            ffn,
        })
    }

    /// Every parameter owned by the fuser.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let a = &self.attention;
        let mut ids = vec![self.ensemble, self.positional.table];
        for lin in [a.q, a.k, a.v, a.out, self.ffn.expand, self.ffn.contract] {
            ids.extend([lin.weight, lin.bias]);
        }
        ids.extend([self.ffn.norm_gain, self.ffn.norm_bias]);
        ids
    }

    /// Runs the block on an (already masked) prior-token set.
    ///
    /// In train mode the attended sequence is reduced to the ensemble and
    /// canonical rows before the feed-forward block. In infer mode the set
    /// must hold the canonical token alone, so the sequence already is that
    /// pair and no selection happens.
    pub fn fuse<S: Real>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        masked: &PriorTokenSet<S>,
        mode: FuserMode,
    ) -> Result<FusedTokens> {
        let d = self.cfg.token_dim;
        if masked.dim() != d {
            return Err(Error::dim("fuse", masked.tokens.shape(), &[masked.batch(), masked.len(), d]));
        }
        if masked.canonical_index != self.cfg.canonical_index {
            return Err(Error::Contract(format!(
                "token set is canonical for task {}, fuser for task {}",
                masked.canonical_index, self.cfg.canonical_index
            )));
        }
        let c_row = masked
            .canonical_row()
            .ok_or_else(|| Error::Contract("canonical token missing from prior set".into()))?;
        if mode == FuserMode::Infer && masked.len() != 1 {
            return Err(Error::Contract(format!(
                "inference expects the canonical token alone, got {} tokens",
                masked.len()
            )));
        }
        let b = masked.batch();

        let tk = tape.param(store, self.ensemble);
        let tk = tape.reshape(tk, &[1, 1, d])?;
        let tk = tape.repeat_leading(tk, b);
        let tk = tape.reshape(tk, &[b, 1, d])?;
        let priors = tape.constant(masked.tokens.clone());
        let seq = tape.concat(&[tk, priors], 1)?;

        let mut indices = Vec::with_capacity(masked.len() + 1);
        indices.push(self.positional.ensemble_index());
        indices.extend_from_slice(&masked.task_indices);
        let seq = self.positional.forward(tape, store, seq, &indices)?;
        let attended = self.attention.forward(tape, store, seq)?;

        let pair = match mode {
            FuserMode::Train => tape.select(attended, 1, &[0, 1 + c_row])?,
            FuserMode::Infer => attended,
        };
        let out = self.ffn.forward(tape, store, pair)?;
        let ensemble = tape.select(out, 1, &[0])?;
        let ensemble = tape.reshape(ensemble, &[b, d])?;
        let canonical = tape.select(out, 1, &[1])?;
        let canonical = tape.reshape(canonical, &[b, d])?;
        Ok(FusedTokens { ensemble, canonical })
    }
}

/// `ê_c = e_c + (t̂_k + t̂_c)`, broadcast over the spatial axes of
/// `e_c: [b × d × h × w]`.
pub fn enrich_embedding<S: Real>(tape: &mut Tape<S>, e_c: Var, fused: FusedTokens) -> Result<Var> {
    let sum = tape.add(fused.ensemble, fused.canonical)?;
    let (es, fs) = (tape.shape(e_c).to_vec(), tape.shape(sum).to_vec());
    if es.len() != 4 || es[..2] != fs[..] {
        return Err(Error::dim("enrich_embedding", &es, &fs));
    }
    tape.add_prefix(e_c, sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fuser::{apply_drop_mask, DropMask};
    use crate::tensor::ops;

    fn config(n: usize, d: usize, c: usize) -> FuserConfig {
        FuserConfig {
            token_dim: d,
            n_tasks: n,
            canonical_index: c,
            heads: 2,
            ..FuserConfig::default()
        }
    }

    fn random_set(n: usize, b: usize, d: usize, c: usize, rng: &mut Rng) -> PriorTokenSet<f64> {
        let pooled: Vec<Tensor<f64>> = (0..n).map(|_| Tensor::from_fn([b, d], |_| rng.normal())).collect();
        let refs: Vec<(usize, &Tensor<f64>)> = pooled.iter().enumerate().collect();
        PriorTokenSet::from_pooled(&refs, c, d).unwrap()
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(config(3, 8, 3).validate().is_err());
        assert!(config(3, 7, 0).validate().is_err());
        assert!(config(0, 8, 0).validate().is_err());
        assert!(config(3, 8, 2).validate().is_ok());
    }

    #[test]
    fn train_with_canonical_only_mask_equals_infer() {
        let mut rng = Rng::new(9);
        let mut store = ParamStore::<f32>::new();
        let fuser = EtFuser::new(&mut store, config(4, 8, 2), &mut rng).unwrap();
        let full = random_set(4, 3, 8, 2, &mut rng);
        let full = PriorTokenSet {
            tokens: full.tokens.cast(),
            task_indices: full.task_indices,
            canonical_index: 2,
            pad_widths: full.pad_widths,
        };
        let masked = apply_drop_mask(&full, &DropMask::canonical_only(4, 2)).unwrap();

        let mut t1 = Tape::new();
        let a = fuser.fuse(&mut t1, &store, &masked, FuserMode::Train).unwrap();
        let mut t2 = Tape::new();
        let b = fuser.fuse(&mut t2, &store, &masked, FuserMode::Infer).unwrap();
        assert_eq!(t1.value(a.ensemble), t2.value(b.ensemble));
        assert_eq!(t1.value(a.canonical), t2.value(b.canonical));
    }

    #[test]
    fn infer_rejects_extra_tokens() {
        let mut rng = Rng::new(1);
        let mut store = ParamStore::<f64>::new();
        let fuser = EtFuser::new(&mut store, config(3, 4, 0), &mut rng).unwrap();
        let set = random_set(3, 1, 4, 0, &mut rng);
        let mut tape = Tape::new();
        assert!(matches!(
            fuser.fuse(&mut tape, &store, &set, FuserMode::Infer),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn dead_network_normalises_inputs() {
        let mut rng = Rng::new(4);
        let mut store = ParamStore::<f64>::new();
        let fuser = EtFuser::new(&mut store, config(3, 4, 1), &mut rng).unwrap();
        for id in fuser.param_ids() {
            if id == fuser.ensemble || id == fuser.ffn.norm_gain || id == fuser.ffn.norm_bias {
                continue;
            }
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(shape)).unwrap();
        }
        let set = random_set(3, 2, 4, 1, &mut rng);
        let mut tape = Tape::new();
        let out = fuser.fuse(&mut tape, &store, &set, FuserMode::Train).unwrap();
        let (g, z) = (Tensor::full([4], 1.0), Tensor::zeros([4]));
        let tk = store.value(fuser.ensemble).reshape([1, 4]).unwrap();
        let ln_tk = ops::layer_norm_last(&tk, &g, &z, 1e-5).unwrap().out;
        for b in 0..2 {
            assert_eq!(tape.value(out.ensemble).row(b), ln_tk.data());
            let tc = Tensor::new([1, 4], set.unpadded(b, 1).to_vec()).unwrap();
            let ln_tc = ops::layer_norm_last(&tc, &g, &z, 1e-5).unwrap().out;
            assert_eq!(tape.value(out.canonical).row(b), ln_tc.data());
        }
    }

    #[test]
    fn ensemble_token_receives_gradient() {
        let mut rng = Rng::new(6);
        let mut store = ParamStore::<f64>::new();
        let fuser = EtFuser::new(&mut store, config(3, 4, 0), &mut rng).unwrap();
        let set = random_set(3, 2, 4, 0, &mut rng);
        let mut tape = Tape::new();
        let out = fuser.fuse(&mut tape, &store, &set, FuserMode::Train).unwrap();
        let e = tape.constant(Tensor::from_fn([2, 4, 2, 2], |i| (i as f64 * 0.1).cos()));
        let rich = enrich_embedding(&mut tape, e, out).unwrap();
        let sq = tape.mul(rich, rich).unwrap();
        let loss = tape.mean(sq);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.param(&store, fuser.ensemble).unwrap().l2_norm() > 0.0);
    }

    #[test]
    fn enrichment_commutes_with_pooling() {
        let mut rng = Rng::new(8);
        let mut tape = Tape::<f64>::new();
        let e_val = Tensor::from_fn([2, 3, 4, 4], |_| rng.normal());
        let e = tape.constant(e_val.clone());
        let tk = tape.constant(Tensor::from_fn([2, 3], |_| rng.normal()));
        let tc = tape.constant(Tensor::from_fn([2, 3], |_| rng.normal()));
        let rich = enrich_embedding(
            &mut tape,
            e,
            FusedTokens {
                ensemble: tk,
                canonical: tc,
            },
        )
        .unwrap();
        let lhs = ops::gap(tape.value(rich)).unwrap();
        let pooled = ops::gap(&e_val).unwrap();
        for i in 0..6 {
            let rhs = pooled.data()[i] + tape.value(tk).data()[i] + tape.value(tc).data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_fused_tokens_leave_embedding_unchanged() {
        let mut tape = Tape::<f64>::new();
        let e_val = Tensor::from_fn([1, 2, 1, 1], |i| i as f64 + 0.5);
        let e = tape.constant(e_val.clone());
        let z = tape.constant(Tensor::zeros([1, 2]));
        let rich = enrich_embedding(&mut tape, e, FusedTokens { ensemble: z, canonical: z }).unwrap();
        assert_eq!(tape.value(rich), &e_val);
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(Tensor::zeros([1, 3, 2, 2]));
        let z = tape.constant(Tensor::zeros([1, 2]));
        let r = enrich_embedding(&mut tape, e, FusedTokens { ensemble: z, canonical: z });
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }
}
