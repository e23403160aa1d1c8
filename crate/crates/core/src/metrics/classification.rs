use crate::error::{Error, Result};

fn check(pred: &[usize], gt: &[usize], k: usize) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::dim("classification metric", &[pred.len()], &[gt.len()]));
    }
    if let Some(&bad) = pred.iter().chain(gt).find(|&&c| c >= k) {
        return Err(Error::Contract(format!("class id {bad} not below {k}")));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::dim("accuracy", &[pred.len()], &[gt.len()]));
    }
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Unweighted mean of per-class F1 over all `k` classes; a class with no
/// true positives contributes 0.
pub fn f1_macro(pred: &[usize], gt: &[usize], k: usize) -> Result<f64> {
    check(pred, gt, k)?;
    if k == 0 {
        return Err(Error::Contract("macro F1 over zero classes".into()));
    }
    let mut tp = vec![0usize; k];
    let mut pred_count = vec![0usize; k];
    let mut gt_count = vec![0usize; k];
    for (&p, &g) in pred.iter().zip(gt) {
        pred_count[p] += 1;
        gt_count[g] += 1;
        if p == g {
            tp[p] += 1;
        }
    }
    let total: f64 = (0..k)
        .map(|c| {
            let denom = pred_count[c] + gt_count[c];
            if tp[c] == 0 || denom == 0 {
                0.0
            } else {
                // 2PR/(P+R) == 2TP/(#pred + #gt)
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / k as f64)
}
