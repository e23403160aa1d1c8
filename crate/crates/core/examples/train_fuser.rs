//! Selective fine-tuning of the fuser and canonical decoder on top of
//! frozen prior encoders, against the plain canonical baseline.
//!
//! `cargo run --release --example train_fuser -- [canonical] [steps]`

use et_fuser::cli::RunConfig;
use et_fuser::metrics::ReportMeta;
use et_fuser::tasks::{evaluate, generate_dataset, train, Model, TaskBundle, TrainState};
use et_fuser::Result;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let canonical: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(2);
    let steps: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(600);

    let mut cfg = RunConfig::default();
    cfg.fuser.canonical_index = canonical;
    cfg.train.total_steps = steps;
    cfg.train.warmup_steps = steps / 10;

    let data = generate_dataset(&cfg.dataset)?;
    let (tr, va) = data.split(cfg.dataset.seed, cfg.train_fraction);
    let bundle = TaskBundle::build(&data, &tr, canonical, cfg.structure, &cfg.pretrain, &cfg.train.loss, cfg.train.seed)?;
    println!("canonical task {:?}, encoders frozen with digests:", bundle.canonical_kind());
    for d in bundle.digests() {
        println!("  {}", &d[..16]);
    }

    let view = data.canonical_view(canonical);
    for run in [cfg.as_baseline(), cfg.clone()] {
        let model = Model::new(&bundle, run.fuser_config(), run.train.decoder_hidden, run.train.seed)?;
        let mut state = TrainState::new(model, run.train.optimizer);
        let out = train(&bundle, &mut state, &view, &tr, &va, &run.train)?;
        bundle.reset_calls();
        let meta = ReportMeta {
            seed: run.train.seed,
            config_digest: run.digest(),
            split: "val".into(),
            samples: va.len(),
            f1_averaging: "macro".into(),
        };
        let ev = evaluate(&bundle, &state.model, &view, &va, &run.train.loss, &run.eval, meta)?;
        println!(
            "{:<10} val loss {:.4} -> {:.4}   encoder calls at eval {:?}",
            run.structure.to_string(),
            out.initial_val_loss,
            out.final_val_loss,
            bundle.encoder_calls()
        );
        for (name, v) in &ev.report.metrics {
            println!("    {name:<22} {v:.4}");
        }
    }
    println!("frozen encoders untouched: {}", bundle.verify_frozen());
    Ok(())
}
