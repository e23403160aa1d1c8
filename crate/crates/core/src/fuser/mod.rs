//! Prior-token assembly, stochastic drop masking and the ensemble-token
//! fusion block.
//!
//! Training sees every prior token that survives the per-step drop mask;
//! inference sees only the canonical token. The two paths share every
//! arithmetic step, so under a canonical-only mask they agree bit for bit.

mod block;
mod mask;
mod tokens;

pub use block::{enrich_embedding, EtFuser, FusedTokens, FuserConfig, FuserMode};
pub use mask::{apply_drop_mask, sample_drop_mask, DropMask, DropThreshold, MASK_STREAM};
pub use tokens::{build_prior_tokens, PriorTokenSet};
