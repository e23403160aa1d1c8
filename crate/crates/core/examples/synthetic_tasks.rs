//! The synthetic four-task benchmark: one latent factor drives landmarks,
//! age, emotion and identity labels of 32x32 inputs.

use et_fuser::tasks::{generate_dataset, Labels, SyntheticDatasetSpec};
use et_fuser::Result;

fn main() -> Result<()> {
    let spec = SyntheticDatasetSpec {
        samples: 500,
        ..SyntheticDatasetSpec::default()
    };
    let data = generate_dataset(&spec)?;
    let (train, val) = data.split(spec.seed, 0.8);
    println!(
        "{} samples of shape {:?}; split {} / {}",
        data.len(),
        data.input_shape(),
        train.len(),
        val.len()
    );

    for (task, labels) in spec.tasks.iter().zip(&data.labels) {
        match labels {
            Labels::Points { points, values } => {
                let mean = values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64;
                println!("{:<10} {points} landmarks, mean coordinate {mean:.2}", task.name);
            }
            Labels::Scalar(v) => {
                let (lo, hi) = v.iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
                println!("{:<10} scalar in [{lo:.1}, {hi:.1}]", task.name);
            }
            Labels::Class(c) => {
                let k = task.kind.classes().unwrap_or(0);
                let mut counts = vec![0usize; k];
                for &y in c {
                    counts[y] += 1;
                }
                println!("{:<10} {k} classes, counts {counts:?}", task.name);
            }
        }
    }
    Ok(())
}
