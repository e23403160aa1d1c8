//! Synthetic multi-task benchmark: a latent-factor image generator, toy
//! frozen encoders, the canonical decoder, losses, optimizers and the
//! selective fine-tuning loop.

mod data;
mod decoder;
mod encoder;
mod losses;
mod optim;
mod pipeline;

pub use data::{
    default_tasks, generate_dataset, Dataset, Labels, LatentModel, SyntheticDatasetSpec, TaskKind, TaskSpec, AGE_SCALE, LANDMARK_CANVAS,
};
pub use decoder::Decoder;
pub use encoder::{pretrain_prior, FrozenEncoder, PretrainConfig, Structure, TrainableEncoder, WidthClass};
pub use losses::{cross_entropy, prediction_loss, task_loss, wing, wing_loss, wing_scale, LossConfig};
pub use optim::{warmup_cosine_lr, Adam, Optimizer, OptimizerKind};
pub use pipeline::{
    encode_split, evaluate, gather_rows, inference_cost, score_predictions, split_loss, train, train_until, CanonicalView, EncodedSplit,
    EvalConfig, Evaluation, Model, TaskBundle, TrainConfig, TrainOutcome, TrainState, REFERENCE_LR,
};
