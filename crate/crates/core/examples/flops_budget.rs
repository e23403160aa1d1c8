//! Analytic fuser cost at a few widths and task counts, and the counter on
//! a real tape agreeing with it.

use et_fuser::fuser::{EtFuser, FuserConfig, FuserMode, PriorTokenSet};
use et_fuser::metrics::{fuser_cost, Convention, CostModel};
use et_fuser::tensor::{ParamStore, Rng, Tape, Tensor};
use et_fuser::Result;

fn main() -> Result<()> {
    println!(
        "{:>6} {:>3} {:>14} {:>14} {:>14}",
        "d", "N", "infer MACs", "infer 2xMACs", "train MACs"
    );
    for d in [64, 256, 1024] {
        for n in [2, 4, 8] {
            let cfg = FuserConfig {
                token_dim: d,
                n_tasks: n,
                ..FuserConfig::default()
            };
            let infer = fuser_cost(&cfg, cfg.sequence_len(FuserMode::Infer), FuserMode::Infer, CostModel::default());
            let train = fuser_cost(&cfg, cfg.sequence_len(FuserMode::Train), FuserMode::Train, CostModel::default());
            println!(
                "{d:>6} {n:>3} {:>14} {:>14} {:>14}",
                infer.macs(),
                infer.with_convention(Convention::MacsAs2).total(),
                train.macs()
            );
        }
    }

    let cfg = FuserConfig {
        token_dim: 256,
        ..FuserConfig::default()
    };
    let mut rng = Rng::new(0);
    let mut store = ParamStore::<f32>::new();
    let fuser = EtFuser::new(&mut store, cfg.clone(), &mut rng)?;
    let pooled: Vec<(usize, Tensor<f32>)> = (0..cfg.n_tasks)
        .map(|t| (t, Tensor::from_fn([1, 256], |_| rng.normal() as f32)))
        .collect();
    let refs: Vec<(usize, &Tensor<f32>)> = pooled.iter().map(|(t, x)| (*t, x)).collect();
    let set = PriorTokenSet::from_pooled(&refs, cfg.canonical_index, 256)?;
    let mut tape = Tape::new();
    fuser.fuse(&mut tape, &store, &set, FuserMode::Train)?;
    let formula = fuser_cost(&cfg, set.len() + 1, FuserMode::Train, CostModel::default()).macs();
    println!("d=256 training pass: tape counted {}, formula {formula}", tape.flops());
    Ok(())
}
