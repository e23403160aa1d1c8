use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Mean over classes of the mean squared distance to the class centroid,
/// after L2-normalising every embedding.
pub fn intra_class_variance(embeddings: &[(&[f64], usize)]) -> Result<f64> {
    if embeddings.is_empty() {
        return Err(Error::Contract("intra-class variance of no embeddings".into()));
    }
    let dim = embeddings[0].0.len();
    let mut classes: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for &(v, c) in embeddings {
        if v.len() != dim {
            return Err(Error::dim("intra_class_variance", &[dim], &[v.len()]));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::Degenerate("zero embedding cannot be normalised".into()));
        }
        classes.entry(c).or_default().push(v.iter().map(|x| x / norm).collect());
    }
    let per_class: f64 = classes
        .values()
        .map(|members| {
            let n = members.len() as f64;
            let centroid: Vec<f64> = (0..dim).map(|j| members.iter().map(|m| m[j]).sum::<f64>() / n).collect();
            members
                .iter()
                .map(|m| m.iter().zip(&centroid).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .sum::<f64>()
                / n
        })
        .sum();
    Ok(per_class / classes.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TarAtFar {
    pub tar: f64,
    /// Impostor score the genuine scores must exceed; `None` when every
    /// impostor may be accepted.
    pub threshold: Option<f64>,
    pub warning: Option<String>,
}

/// True-acceptance rate at the loosest threshold whose false-acceptance
/// rate does not exceed `far_target`.
///
/// With impostor scores sorted descending and `a = floor(far · n)`, any
/// threshold above the `a`-th score (0-based) accepts at most `a`
/// impostors, so the accepted genuine scores are those strictly above it.
pub fn tar_at_far(genuine: &[f64], impostor: &[f64], far_target: f64) -> Result<TarAtFar> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Contract("TAR@FAR needs genuine and impostor scores".into()));
    }
    if !(far_target > 0.0 && far_target < 1.0) {
        return Err(Error::config("far_target", format!("{far_target} is outside (0, 1)")));
    }
    let n = impostor.len();
    let warning = ((n as f64) < 1.0 / far_target).then(|| {
        format!(
            "{n} impostor pairs cannot resolve FAR {far_target}; at least {} needed",
            (1.0 / far_target).ceil()
        )
    });
    let mut imp = impostor.to_vec();
    imp.sort_by(|a, b| b.total_cmp(a));
    let allowed = (far_target * n as f64 * (1.0 + 1e-12)).floor() as usize;
    let (tar, threshold) = if allowed >= n {
        (1.0, None)
    } else {
        let t = imp[allowed];
        let hits = genuine.iter().filter(|&&g| g > t).count();
        (hits as f64 / genuine.len() as f64, Some(t))
    };
    Ok(TarAtFar { tar, threshold, warning })
}
