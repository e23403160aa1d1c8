use crate::error::{Error, Result};
use crate::tensor::{ops, Real, Tensor};

/// GAP-pooled, zero-padded prior tokens for a batch, rows in ascending task
/// index.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorTokenSet<S: Real = f32> {
    /// `[b × s × d]`
    pub tokens: Tensor<S>,
    pub task_indices: Vec<usize>,
    pub canonical_index: usize,
    pub pad_widths: Vec<usize>,
}

impl<S: Real> PriorTokenSet<S> {
    /// Assembles a set from already pooled `[b × c_i]` vectors.
    pub fn from_pooled(pooled: &[(usize, &Tensor<S>)], canonical_index: usize, dim: usize) -> Result<Self> {
        let mut order: Vec<usize> = (0..pooled.len()).collect();
        order.sort_by_key(|&i| pooled[i].0);
        if order.windows(2).any(|w| pooled[w[0]].0 == pooled[w[1]].0) {
            return Err(Error::Contract("duplicate task index among prior tokens".into()));
        }
        if !pooled.iter().any(|(t, _)| *t == canonical_index) {
            return Err(Error::Contract(format!("no prior token for canonical task {canonical_index}")));
        }
        let batch = pooled.first().map(|(_, p)| p.shape()[0]).unwrap_or(0);
        let s = pooled.len();
        let mut data = vec![S::zero(); batch * s * dim];
        let mut task_indices = Vec::with_capacity(s);
        let mut pad_widths = Vec::with_capacity(s);
        for (row, &i) in order.iter().enumerate() {
            let (task, v) = pooled[i];
            let sh = v.shape();
            if sh.len() != 2 || sh[0] != batch {
                return Err(Error::dim("prior token", sh, &[batch, dim]));
            }
            let c = sh[1];
            if c > dim {
                return Err(Error::Capacity { channels: c, width: dim });
            }
            for b in 0..batch {
                let dst = (b * s + row) * dim;
                data[dst..dst + c].copy_from_slice(v.row(b));
            }
            task_indices.push(task);
            pad_widths.push(dim - c);
        }
        Ok(Self {
            tokens: Tensor::new([batch, s, dim], data)?,
            task_indices,
            canonical_index,
            pad_widths,
        })
    }

    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.task_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_indices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }

    /// Row holding the canonical token.
    pub fn canonical_row(&self) -> Option<usize> {
        self.task_indices.iter().position(|&t| t == self.canonical_index)
    }

    /// Token of row `row` for batch item `b`, with padding stripped.
    pub fn unpadded(&self, b: usize, row: usize) -> &[S] {
        let (s, d) = (self.len(), self.dim());
        let start = (b * s + row) * d;
        &self.tokens.data()[start..start + d - self.pad_widths[row]]
    }
}

/// Pools each `[b × c × h × w]` embedding and zero-pads it to width `dim`.
pub fn build_prior_tokens<S: Real>(embeddings: &[(usize, &Tensor<S>)], canonical_index: usize, dim: usize) -> Result<PriorTokenSet<S>> {
    let pooled = embeddings
        .iter()
        .map(|&(t, e)| {
            if e.rank() != 4 {
                return Err(Error::dim("build_prior_tokens", e.shape(), &[0, dim, 0, 0]));
            }
            Ok((t, ops::gap(e)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<(usize, &Tensor<S>)> = pooled.iter().map(|(t, p)| (*t, p)).collect();
    PriorTokenSet::from_pooled(&refs, canonical_index, dim)
}
