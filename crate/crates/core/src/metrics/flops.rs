use serde::{Deserialize, Serialize};

use crate::fuser::{FuserConfig, FuserMode};
use crate::nn::Activation;

/// How a multiply-accumulate is counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    #[default]
    MacsAs2,
    MacsAs1,
}

impl Convention {
    pub fn factor(self) -> u64 {
        match self {
            Convention::MacsAs2 => 2,
            Convention::MacsAs1 => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Convention::MacsAs2 => "macs-as-2-flops",
            Convention::MacsAs1 => "macs-as-1-flop",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub convention: Convention,
    /// Count the `s²` score, scaling, softmax and context terms.
    pub include_attention_quadratic: bool,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            convention: Convention::MacsAs2,
            include_attention_quadratic: true,
        }
    }
}

/// Per-component counts in multiply-accumulate units for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub convention: Convention,
    pub components: Vec<(String, u64)>,
}

impl FlopBreakdown {
    pub fn macs(&self) -> u64 {
        self.components.iter().map(|(_, c)| c).sum()
    }

    pub fn total(&self) -> u64 {
        self.macs() * self.convention.factor()
    }

    pub fn component(&self, name: &str) -> Option<u64> {
        self.components
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, c)| c * self.convention.factor())
    }

    pub fn with_convention(&self, convention: Convention) -> Self {
        Self {
            convention,
            components: self.components.clone(),
        }
    }
}

/// Fuser cost for the sequence length implied by `cfg.mode`.
pub fn count_flops(cfg: &FuserConfig, model: CostModel) -> FlopBreakdown {
    fuser_cost(cfg, cfg.sequence_len(cfg.mode), cfg.mode, model)
}

/// Fuser cost for an attended sequence of `s` tokens (ensemble included).
/// The feed-forward block sees the ensemble/canonical pair only.
pub fn fuser_cost(cfg: &FuserConfig, s: usize, mode: FuserMode, model: CostModel) -> FlopBreakdown {
    let (d, h, r) = (cfg.token_dim as u64, cfg.heads as u64, cfg.ffn_ratio as u64);
    let s = s as u64;
    let p = match mode {
        FuserMode::Train => s.min(2),
        FuserMode::Infer => s,
    };
    let q = if model.include_attention_quadratic { s * s } else { 0 };
    let act = match cfg.activation {
        Activation::Gelu => 3,
        Activation::Relu => 1,
    };
    let components = vec![
        ("positional", s * d),
        ("qkv_projection", 3 * (s * d * d + s * d)),
        ("attention_scores", q * d),
        ("attention_scale", q * h),
        ("softmax", 3 * q * h),
        ("attention_context", q * d),
        ("output_projection", s * d * d + s * d),
        ("attention_residual", s * d),
        ("ffn_expand", p * d * r * d + p * r * d),
        ("ffn_activation", act * p * r * d),
        ("ffn_contract", p * r * d * d + p * d),
        ("ffn_residual", p * d),
        ("layer_norm", 4 * p * d),
    ];
    FlopBreakdown {
        convention: model.convention,
        components: components.into_iter().map(|(n, c)| (n.to_string(), c)).collect(),
    }
}

/// Convolution with bias: `out_elems · (in_ch · k² + 1)`.
pub fn conv_cost(out_elems: usize, in_ch: usize, kernel: usize) -> u64 {
    (out_elems * (in_ch * kernel * kernel + 1)) as u64
}

/// Dense layer with bias on `rows` inputs.
pub fn linear_cost(rows: usize, in_dim: usize, out_dim: usize) -> u64 {
    (rows * out_dim * (in_dim + 1)) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wide_fuser() -> FuserConfig {
        FuserConfig {
            token_dim: 1024,
            mode: FuserMode::Infer,
            ..FuserConfig::default()
        }
    }

    #[test]
    fn inference_at_width_1024() {
        let b = count_flops(&wide_fuser(), CostModel::default());
        assert_eq!(b.macs(), 16_826_432);
        assert_eq!(b.total(), 33_652_864);
    }

    #[test]
    fn empty_sequence_costs_nothing() {
        let b = fuser_cost(&wide_fuser(), 0, FuserMode::Train, CostModel::default());
        assert_eq!(b.total(), 0);
    }

    #[test]
    fn inference_independent_of_task_count() {
        let base = count_flops(&wide_fuser(), CostModel::default()).total();
        for n in 2..=16 {
            let cfg = FuserConfig {
                n_tasks: n,
                ..wide_fuser()
            };
            assert_eq!(count_flops(&cfg, CostModel::default()).total(), base);
        }
    }
}
