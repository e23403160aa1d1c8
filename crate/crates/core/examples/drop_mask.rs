//! Empirical keep rates of the stochastic prior-token mask.

use et_fuser::fuser::{sample_drop_mask, DropThreshold, MASK_STREAM};
use et_fuser::tensor::Rng;
use et_fuser::Result;

fn main() -> Result<()> {
    let (n, canonical, draws) = (4, 1, 20_000);
    println!("{n} tasks, canonical {canonical}, {draws} steps");
    for theta in [0.0, 0.25, 0.5, 0.75, 0.9] {
        let th = DropThreshold::new(theta)?;
        let mut kept = vec![0usize; n];
        for step in 0..draws {
            // One mask per training step, derived from the step alone.
            let mask = sample_drop_mask(&mut Rng::keyed(0, MASK_STREAM, step), n, canonical, th);
            for i in mask.survivors() {
                kept[i] += 1;
            }
        }
        let rates: Vec<String> = kept.iter().map(|&k| format!("{:.3}", k as f64 / draws as f64)).collect();
        println!("theta {theta:<4}  expected {:.3}  observed [{}]", 1.0 - theta, rates.join(", "));
    }
    Ok(())
}
