use serde::{Deserialize, Serialize};

use super::PriorTokenSet;
use crate::error::{Error, Result};
use crate::tensor::{ops, Real, Rng};

/// RNG stream reserved for drop-mask draws; block `t` holds step `t`'s mask.
pub const MASK_STREAM: u64 = 0x6d61736b;

/// Drop threshold θ in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct DropThreshold(f64);

impl DropThreshold {
    pub fn new(theta: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&theta) {
            Ok(Self(theta))
        } else {
            Err(Error::config("theta", format!("{theta} is outside [0, 1]")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// 0.75: at 0.5 and below the decoder learns to lean on priors that are
/// absent at inference, and the fused model trails the baseline on landmarks.
impl Default for DropThreshold {
    fn default() -> Self {
        Self(0.75)
    }
}

impl TryFrom<f64> for DropThreshold {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<DropThreshold> for f64 {
    fn from(t: DropThreshold) -> f64 {
        t.0
    }
}

/// Keep bits, one per prior-token row (rows are in task-index order).
#[derive(Clone, Debug, PartialEq)]
pub struct DropMask {
    pub bits: Vec<bool>,
    pub theta: DropThreshold,
}

impl DropMask {
    /// Mask keeping only the canonical token.
    pub fn canonical_only(n: usize, canonical_index: usize) -> Self {
        Self {
            bits: (0..n).map(|i| i == canonical_index).collect(),
            theta: DropThreshold(1.0),
        }
    }

    pub fn keep_all(n: usize) -> Self {
        Self {
            bits: vec![true; n],
            theta: DropThreshold(0.0),
        }
    }

    pub fn survivors(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }
}

/// `m_i = 1` iff `x_i > θ` or `i` is canonical, with `x_i` uniform in (0, 1).
/// One draw is consumed per task, canonical included.
pub fn sample_drop_mask(rng: &mut Rng, n: usize, canonical_index: usize, theta: DropThreshold) -> DropMask {
    let bits = (0..n)
        .map(|i| {
            let x = rng.uniform() as f64;
            x > theta.0 || i == canonical_index
        })
        .collect();
    DropMask { bits, theta }
}

/// Keeps the rows whose task's bit is set. Surviving rows retain their task
/// indices; the canonical row always survives.
pub fn apply_drop_mask<S: Real>(set: &PriorTokenSet<S>, mask: &DropMask) -> Result<PriorTokenSet<S>> {
    if mask.bits.len() != set.len() {
        return Err(Error::Contract(format!(
            "drop mask has {} bits for {} prior tokens",
            mask.bits.len(),
            set.len()
        )));
    }
    let rows: Vec<usize> = set
        .task_indices
        .iter()
        .enumerate()
        .filter(|&(row, &t)| mask.bits[row] || t == set.canonical_index)
        .map(|(row, _)| row)
        .collect();
    Ok(PriorTokenSet {
        tokens: ops::index_select(&set.tokens, 1, &rows)?,
        task_indices: rows.iter().map(|&r| set.task_indices[r]).collect(),
        canonical_index: set.canonical_index,
        pad_widths: rows.iter().map(|&r| set.pad_widths[r]).collect(),
    })
}
