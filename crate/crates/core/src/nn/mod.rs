//! Parameterised layers shared by the fuser, the decoders and the toy
//! encoders. Layers hold only [`ParamId`](crate::tensor::ParamId)s, so one
//! layer description works against an `f32` store for training and an `f64`
//! cast of the same store for gradient checks.

mod attention;
mod conv;
mod ffn;
mod linear;
mod positional;

pub use attention::{AttentionScaling, MhsaLayer};
pub use conv::Conv2dLayer;
pub use ffn::{Activation, FfnBlock};
pub use linear::Linear;
pub use positional::PositionalTable;

use crate::tensor::{Real, Rng, Tensor};

/// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn scaled_uniform<S: Real>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<S> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| S::lit(rng.uniform_range(-bound, bound)))
}
