//! Evaluation metrics for landmark, scalar, classification and identity
//! tasks, report serialisation and the analytic cost model.

mod classification;
mod flops;
mod identity;
mod regression;
mod report;

pub use classification::{accuracy, f1_macro};
pub use flops::{conv_cost, count_flops, fuser_cost, linear_cost, Convention, CostModel, FlopBreakdown};
pub use identity::{intra_class_variance, tar_at_far, TarAtFar};
pub use regression::{cs_at, mae, nme, Point};
pub use report::{read_embeddings, write_embeddings, EmbeddingRow, MetricReport, ReportMeta};
