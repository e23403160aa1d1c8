//! Reverse-mode differentiation of a small two-layer network, checked
//! against central differences in double precision.

use et_fuser::tensor::{Rng, Tape, Tensor};
use et_fuser::Result;

fn loss(x: &Tensor<f64>, w1: &Tensor<f64>, w2: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let (x, w1, w2) = (tape.constant(x.clone()), tape.constant(w1.clone()), tape.constant(w2.clone()));
    let h = tape.matmul(x, w1)?;
    let h = tape.gelu(h);
    let y = tape.matmul(h, w2)?;
    let l = tape.mean(y);
    tape.value(l).item()
}

fn main() -> Result<()> {
    let mut rng = Rng::new(1);
    let x = Tensor::<f64>::from_fn([4, 3], |_| rng.normal());
    let w1 = Tensor::<f64>::from_fn([3, 5], |_| rng.normal());
    let w2 = Tensor::<f64>::from_fn([5, 2], |_| rng.normal());

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w1v = tape.leaf(w1.clone(), true);
    let w2v = tape.constant(w2.clone());
    let h = tape.matmul(xv, w1v)?;
    let h = tape.gelu(h);
    let y = tape.matmul(h, w2v)?;
    let l = tape.mean(y);
    let grads = tape.backward(l)?;
    let analytic = grads.wrt(w1v).expect("w1 is a leaf with a gradient");
    println!(
        "loss {:.6}, recorded nodes {}, MACs {}",
        tape.value(l).item()?,
        tape.len(),
        tape.flops()
    );

    let step = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..w1.numel() {
        let mut plus = w1.clone();
        plus.data_mut()[i] += step;
        let mut minus = w1.clone();
        minus.data_mut()[i] -= step;
        let numeric = (loss(&x, &plus, &w2)? - loss(&x, &minus, &w2)?) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
    }
    println!("dL/dW1 over {} entries: worst relative error {worst:.2e}", w1.numel());
    Ok(())
}
