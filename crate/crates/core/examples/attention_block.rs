//! Multi-head self-attention on a short token sequence, with the two
//! score scalings side by side.

use et_fuser::nn::{AttentionScaling, MhsaLayer};
use et_fuser::tensor::{ParamStore, Rng, Tape, Tensor};
use et_fuser::Result;

fn main() -> Result<()> {
    let (s, d, heads) = (5, 16, 4);
    let mut rng = Rng::new(3);
    let tokens = Tensor::<f32>::from_fn([s, d], |_| rng.normal() as f32);

    for scaling in [AttentionScaling::PerHead, AttentionScaling::FullDim] {
        let mut store = ParamStore::<f32>::new();
        let layer = MhsaLayer::new(&mut store, "attn", d, heads, scaling, &mut Rng::new(7))?;
        let mut tape = Tape::new();
        let x = tape.constant(tokens.clone());
        let y = layer.forward(&mut tape, &store, x)?;
        let out = tape.value(y);
        println!(
            "{scaling:?}: scale {:.4}, output {:?}, norm {:.4}, {} MACs",
            layer.scale_factor(),
            out.shape(),
            out.l2_norm(),
            tape.flops()
        );
    }

    // Reordering the tokens reorders the output rows and nothing else.
    let mut store = ParamStore::<f32>::new();
    let layer = MhsaLayer::new(&mut store, "attn", d, heads, AttentionScaling::PerHead, &mut Rng::new(7))?;
    let run = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let x = tape.constant(t.clone());
        let y = layer.forward(&mut tape, &store, x)?;
        Ok(tape.value(y).clone())
    };
    let perm = [4, 2, 0, 3, 1];
    let shuffled = Tensor::from_fn([s, d], |i| tokens.row(perm[i / d])[i % d]);
    let (a, b) = (run(&tokens)?, run(&shuffled)?);
    let gap = perm
        .iter()
        .enumerate()
        .flat_map(|(i, &p)| b.row(i).iter().zip(a.row(p)).map(|(x, y)| (x - y).abs()))
        .fold(0.0f32, f32::max);
    println!("permutation equivariance gap {gap:.2e}");
    Ok(())
}
