use crate::error::{Error, Result};

pub type Point = [f64; 2];

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mean point error normalised by the inter-ocular distance, in percent.
pub fn nme(pred: &[Point], gt: &[Point], left_eye: Point, right_eye: Point) -> Result<f64> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::dim("nme", &[pred.len()], &[gt.len()]));
    }
    let iod = dist(left_eye, right_eye);
    if !(iod > 0.0) {
        return Err(Error::Degenerate("zero inter-ocular distance".into()));
    }
    let total: f64 = pred.iter().zip(gt).map(|(&p, &g)| dist(p, g)).sum();
    Ok(100.0 * total / (pred.len() as f64 * iod))
}

/// Percentage of errors with `|e| <= tolerance`.
pub fn cs_at(errors: &[f64], tolerance: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Contract("cumulative score of an empty error list".into()));
    }
    if !(tolerance >= 0.0) {
        return Err(Error::config("cs_tolerance", format!("{tolerance} is negative")));
    }
    let hits = errors.iter().filter(|e| e.abs() <= tolerance).count();
    Ok(100.0 * hits as f64 / errors.len() as f64)
}

pub fn mae(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Contract("mean absolute error of an empty list".into()));
    }
    Ok(errors.iter().map(|e| e.abs()).sum::<f64>() / errors.len() as f64)
}
