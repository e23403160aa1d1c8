use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Rng, Tape, Var};

use super::scaled_uniform;

/// Learnable `[(N + 1) × d]` table: one row per task index plus a reserved
/// last row for the ensemble token. Rows are addressed by task index, never
/// by a token's position in a filtered sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PositionalTable {
    pub table: ParamId,
    pub n_tasks: usize,
    pub dim: usize,
}

impl PositionalTable {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, n_tasks: usize, dim: usize, rng: &mut Rng) -> Self {
        let table = store.insert(name.to_string(), scaled_uniform(&[n_tasks + 1, dim], dim, rng), true);
        Self { table, n_tasks, dim }
    }

    /// Row reserved for the ensemble token.
    pub fn ensemble_index(&self) -> usize {
        self.n_tasks
    }

    /// `out[.., j, :] = tokens[.., j, :] + table[indices[j]]`.
    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, tokens: Var, indices: &[usize]) -> Result<Var> {
        let shape = tape.shape(tokens).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != self.dim {
            return Err(Error::dim("positional_embed", &shape, &[self.n_tasks + 1, self.dim]));
        }
        if shape[r - 2] != indices.len() {
            return Err(Error::Contract(format!(
                "{} task indices for a sequence of {} tokens",
                indices.len(),
                shape[r - 2]
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i > self.n_tasks) {
            return Err(Error::Contract(format!(
                "task index {bad} outside positional table of {} rows",
                self.n_tasks + 1
            )));
        }
        let table = tape.param(store, self.table);
        let rows = tape.select(table, 0, indices)?;
        tape.add_bias(tokens, rows)
    }
}
