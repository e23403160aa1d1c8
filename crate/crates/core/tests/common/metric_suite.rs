//! Brute-force oracles for the evaluation metrics.

#![allow(clippy::needless_range_loop)]

use et_fuser::metrics::{cs_at, f1_macro, intra_class_variance, nme, tar_at_far};
use et_fuser::tasks::wing;
use et_fuser::tensor::Rng;

pub const NME_TOL: f64 = 1e-6;
pub const F1_TOL: f64 = 1e-9;
pub const ICV_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct MetricCheck {
    pub name: &'static str,
    pub instances: usize,
    pub max_err: f64,
    pub tolerance: f64,
}

impl MetricCheck {
    pub fn passed(&self) -> bool {
        if self.tolerance == 0.0 {
            self.max_err == 0.0
        } else {
            self.max_err < self.tolerance
        }
    }
}

fn nme_oracle(pred: &[[f64; 2]], gt: &[[f64; 2]], le: [f64; 2], re: [f64; 2]) -> f64 {
    let iod = ((le[0] - re[0]).powi(2) + (le[1] - re[1]).powi(2)).sqrt();
    let mut total = 0.0;
    for i in 0..pred.len() {
        total += ((pred[i][0] - gt[i][0]).powi(2) + (pred[i][1] - gt[i][1]).powi(2)).sqrt() / iod;
    }
    100.0 * total / pred.len() as f64
}

fn cs_oracle(errors: &[f64], l: f64) -> f64 {
    let mut hits = 0;
    for e in errors {
        if -l <= *e && *e <= l {
            hits += 1;
        }
    }
    100.0 * hits as f64 / errors.len() as f64
}

fn f1_oracle(pred: &[usize], gt: &[usize], k: usize) -> f64 {
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &g) in pred.iter().zip(gt) {
        confusion[g][p] += 1;
    }
    let mut sum = 0.0;
    for c in 0..k {
        let tp = confusion[c][c] as f64;
        let predicted: usize = (0..k).map(|g| confusion[g][c]).sum();
        let actual: usize = confusion[c].iter().sum();
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
        if precision + recall > 0.0 {
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    sum / k as f64
}

/// Two passes per class: centroid, then squared deviations.
fn icv_oracle(vecs: &[Vec<f64>], classes: &[usize]) -> f64 {
    let unit: Vec<Vec<f64>> = vecs
        .iter()
        .map(|v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    let mut ids: Vec<usize> = classes.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut total = 0.0;
    for &c in &ids {
        let members: Vec<&Vec<f64>> = unit.iter().zip(classes).filter(|(_, &k)| k == c).map(|(v, _)| v).collect();
        let dim = members[0].len();
        let mut centroid = vec![0.0; dim];
        for m in &members {
            for j in 0..dim {
                centroid[j] += m[j] / members.len() as f64;
            }
        }
        let mut ss = 0.0;
        for m in &members {
            for j in 0..dim {
                ss += (m[j] - centroid[j]).powi(2);
            }
        }
        total += ss / members.len() as f64;
    }
    total / ids.len() as f64
}

/// Scans every candidate threshold: "just above" each impostor score, and
/// below everything. Picks the smallest one whose FAR is within target.
fn tar_oracle(genuine: &[f64], impostor: &[f64], far: f64) -> f64 {
    let mut candidates: Vec<f64> = impostor.iter().map(|x| x.next_up()).collect();
    candidates.push(f64::NEG_INFINITY);
    candidates.sort_by(f64::total_cmp);
    for t in candidates {
        let accepted = impostor.iter().filter(|&&s| s >= t).count();
        if accepted as f64 <= far * impostor.len() as f64 * (1.0 + 1e-12) {
            return genuine.iter().filter(|&&g| g >= t).count() as f64 / genuine.len() as f64;
        }
    }
    unreachable!("the largest candidate accepts no impostor")
}

/// Each metric against its oracle on `instances` random cases.
pub fn metric_suite(instances: usize, seed: u64) -> Vec<MetricCheck> {
    let mut rng = Rng::with_stream(seed, 0x6d65);
    let mut worst = [0.0f64; 5];
    for _ in 0..instances {
        let k = 5 + rng.below(60);
        let pts = |rng: &mut Rng| -> Vec<[f64; 2]> {
            (0..k)
                .map(|_| [rng.uniform_range(0.0, 224.0), rng.uniform_range(0.0, 224.0)])
                .collect()
        };
        let (pred, gt) = (pts(&mut rng), pts(&mut rng));
        let (le, re) = ([rng.uniform_range(60.0, 100.0), 90.0], [rng.uniform_range(120.0, 160.0), 92.0]);
        worst[0] = worst[0].max((nme(&pred, &gt, le, re).unwrap() - nme_oracle(&pred, &gt, le, re)).abs());

        let errors: Vec<f64> = (0..1000).map(|_| (rng.uniform_range(-12.0, 12.0) * 4.0).round() / 4.0).collect();
        let l = [0.0, 2.0, 5.0, 7.25][rng.below(4)];
        worst[1] = worst[1].max((cs_at(&errors, l).unwrap() - cs_oracle(&errors, l)).abs());

        let classes = 2 + rng.below(7);
        let gtc: Vec<usize> = (0..100).map(|_| rng.below(classes)).collect();
        let predc: Vec<usize> = gtc
            .iter()
            .map(|&g| if rng.below(3) == 0 { rng.below(classes) } else { g })
            .collect();
        worst[2] = worst[2].max((f1_macro(&predc, &gtc, classes).unwrap() - f1_oracle(&predc, &gtc, classes)).abs());

        let n = 4 + rng.below(40);
        let vecs: Vec<Vec<f64>> = (0..n).map(|_| (0..6).map(|_| rng.normal()).collect()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
        let items: Vec<(&[f64], usize)> = vecs.iter().zip(&labels).map(|(v, &c)| (v.as_slice(), c)).collect();
        worst[3] = worst[3].max((intra_class_variance(&items).unwrap() - icv_oracle(&vecs, &labels)).abs());

        let ng = 1 + rng.below(500);
        let ni = 1 + rng.below(10_000);
        // Quantised scores so ties are common.
        let genuine: Vec<f64> = (0..ng).map(|_| ((rng.normal() + 2.0) * 20.0).round()).collect();
        let impostor: Vec<f64> = (0..ni).map(|_| (rng.normal() * 20.0).round()).collect();
        let far = [0.001, 0.01, 0.1, 0.25][rng.below(4)];
        worst[4] = worst[4].max((tar_at_far(&genuine, &impostor, far).unwrap().tar - tar_oracle(&genuine, &impostor, far)).abs());
    }
    let names = ["nme", "cs_at", "f1_macro", "intra_class_variance", "tar_at_far"];
    let tols = [NME_TOL, 0.0, F1_TOL, ICV_TOL, 0.0];
    names
        .iter()
        .zip(worst)
        .zip(tols)
        .map(|((&name, max_err), tolerance)| MetricCheck {
            name,
            instances,
            max_err,
            tolerance,
        })
        .collect()
}

/// |left - right| of the Wing loss at the branch point, over a grid of
/// widths and curvatures.
pub fn wing_continuity_gap() -> f64 {
    let mut worst = 0.0f64;
    for w in [0.5, 1.0, 5.0, 10.0, 20.0] {
        for eps in [0.5, 1.0, 2.0, 4.0] {
            for sign in [-1.0, 1.0] {
                let x = sign * w;
                let inside = wing(x * (1.0 - 1e-12), w, eps);
                let at = wing(x, w, eps);
                worst = worst.max((inside - at).abs());
                let left = at;
                let right = wing(x * (1.0 + 1e-12), w, eps);
                worst = worst.max((left - right).abs());
            }
        }
    }
    worst
}
