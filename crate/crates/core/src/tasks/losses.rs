use serde::{Deserialize, Serialize};

use super::data::{Labels, TaskKind, AGE_SCALE, LANDMARK_CANVAS};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub wing_width: f64,
    pub wing_curvature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            wing_width: 10.0,
            wing_curvature: 2.0,
        }
    }
}

/// Units the Wing loss is evaluated in: landmark coordinates on a
/// 224-pixel canvas, ages in years.
pub fn wing_scale(kind: TaskKind) -> f64 {
    match kind {
        TaskKind::Landmark { .. } => LANDMARK_CANVAS,
        _ => AGE_SCALE,
    }
}

fn check_wing(w: f64, eps: f64) -> Result<()> {
    if !(w > 0.0) || !(eps > 0.0) {
        return Err(Error::config("wing", format!("width {w} and curvature {eps} must be positive")));
    }
    Ok(())
}

/// Wing loss of a single residual.
pub fn wing(x: f64, w: f64, eps: f64) -> f64 {
    let a = x.abs();
    if a < w {
        w * (1.0 + a / eps).ln()
    } else {
        a - (w - w * (1.0 + w / eps).ln())
    }
}

/// Mean Wing loss over elements of `pred - target`.
pub fn wing_loss(pred: &[f64], target: &[f64], w: f64, eps: f64) -> Result<f64> {
    check_wing(w, eps)?;
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::dim("wing_loss", &[pred.len()], &[target.len()]));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| wing(p - t, w, eps)).sum::<f64>() / pred.len() as f64)
}

/// Mean negative log-softmax of the true class, via log-sum-exp.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::dim("cross_entropy", &[logits.len()], &[labels.len()]));
    }
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        if y >= row.len() {
            return Err(Error::Contract(format!("label {y} not below {} classes", row.len())));
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// Loss of the canonical head on the batch rows `batch` of `labels`.
pub fn task_loss(tape: &mut Tape<f32>, pred: Var, kind: TaskKind, labels: &Labels, batch: &[usize], cfg: &LossConfig) -> Result<Var> {
    match kind {
        TaskKind::Landmark { .. } | TaskKind::Scalar => {
            let width = kind.output_dim();
            let mut target = Vec::with_capacity(batch.len() * width);
            for &i in batch {
                target.extend_from_slice(labels.target(i));
            }
            let target = Tensor::new([batch.len(), width], target)?;
            tape.wing_loss(
                pred,
                &target,
                cfg.wing_width as f32,
                cfg.wing_curvature as f32,
                wing_scale(kind) as f32,
            )
        }
        TaskKind::Classification { .. } | TaskKind::Identity { .. } => {
            let ids: Vec<usize> = batch
                .iter()
                .map(|&i| {
                    labels
                        .class(i)
                        .ok_or_else(|| Error::Contract("class task without class labels".into()))
                })
                .collect::<Result<_>>()?;
            tape.cross_entropy(pred, &ids)
        }
    }
}

/// Same loss evaluated in `f64` on collected predictions.
pub fn prediction_loss(preds: &[Vec<f64>], kind: TaskKind, labels: &Labels, rows: &[usize], cfg: &LossConfig) -> Result<f64> {
    if kind.is_regression() {
        let s = wing_scale(kind);
        let mut p = Vec::new();
        let mut t = Vec::new();
        for (pred, &i) in preds.iter().zip(rows) {
            p.extend(pred.iter().map(|v| v * s));
            t.extend(labels.target(i).iter().map(|&v| v as f64 * s));
        }
        wing_loss(&p, &t, cfg.wing_width, cfg.wing_curvature)
    } else {
        let ids: Vec<usize> = rows.iter().map(|&i| labels.class(i).unwrap_or(usize::MAX)).collect();
        cross_entropy(preds, &ids)
    }
}
