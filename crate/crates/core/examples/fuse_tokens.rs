//! One pass through the fuser in both modes. Priors of different widths
//! are zero padded, attended with the ensemble token, and the two fused
//! tokens are added onto the canonical spatial map.

use et_fuser::fuser::{apply_drop_mask, enrich_embedding, DropMask, EtFuser, FuserConfig, FuserMode, PriorTokenSet};
use et_fuser::tensor::{ParamStore, Rng, Tape, Tensor};
use et_fuser::Result;

fn main() -> Result<()> {
    let cfg = FuserConfig {
        token_dim: 8,
        heads: 2,
        n_tasks: 3,
        canonical_index: 2,
        ..FuserConfig::default()
    };
    let mut rng = Rng::new(11);
    let mut store = ParamStore::<f32>::new();
    let fuser = EtFuser::new(&mut store, cfg.clone(), &mut rng)?;

    // Batch of two; prior widths 4, 6 and 8 (the canonical one is full width).
    let widths = [4, 6, 8];
    let pooled: Vec<(usize, Tensor<f32>)> = widths
        .iter()
        .enumerate()
        .map(|(t, &w)| (t, Tensor::from_fn([2, w], |_| rng.normal() as f32)))
        .collect();
    let refs: Vec<(usize, &Tensor<f32>)> = pooled.iter().map(|(t, x)| (*t, x)).collect();
    let set = PriorTokenSet::from_pooled(&refs, cfg.canonical_index, cfg.token_dim)?;
    println!(
        "prior set: {} rows of width {}, canonical row {:?}",
        set.len(),
        set.dim(),
        set.canonical_row()
    );

    let e_c = Tensor::<f32>::from_fn([2, 8, 3, 3], |_| rng.normal() as f32);
    let run = |set: &PriorTokenSet<f32>, mode| -> Result<(Tensor<f32>, u64)> {
        let mut tape = Tape::new();
        let e = tape.constant(e_c.clone());
        let fused = fuser.fuse(&mut tape, &store, set, mode)?;
        let y = enrich_embedding(&mut tape, e, fused)?;
        Ok((tape.value(y).clone(), tape.flops()))
    };

    let (train, train_macs) = run(&set, FuserMode::Train)?;
    println!("train, all priors kept: enriched map {:?}, {train_macs} MACs", train.shape());

    let lone = apply_drop_mask(&set, &DropMask::canonical_only(cfg.n_tasks, cfg.canonical_index))?;
    let (a, _) = run(&lone, FuserMode::Train)?;
    let canonical_pooled = [(cfg.canonical_index, &pooled[2].1)];
    let infer_set = PriorTokenSet::from_pooled(&canonical_pooled, cfg.canonical_index, cfg.token_dim)?;
    let (b, infer_macs) = run(&infer_set, FuserMode::Infer)?;
    println!(
        "infer: {infer_macs} MACs; equals training under the canonical-only mask: {}",
        a == b
    );
    Ok(())
}
