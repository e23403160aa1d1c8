//! Train briefly through the command layer, reload the checkpoint, and
//! check that it rebuilds the same model and resumes exactly.

use et_fuser::cli::{self, Checkpoint, RunConfig, TrainArgs, CHECKPOINT_FILE};
use et_fuser::Result;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join(format!("etf-roundtrip-{}", std::process::id()));
    let mut cfg = RunConfig::default();
    cfg.dataset.samples = 400;
    cfg.pretrain.steps = 40;
    cfg.train.total_steps = 60;
    cfg.train.warmup_steps = 6;
    std::fs::create_dir_all(&dir)?;
    let config = dir.join("config.json");
    std::fs::write(&config, cfg.to_json()?)?;

    let mut log = std::io::stdout();
    let full = TrainArgs {
        config: Some(config.clone()),
        out: Some(dir.join("full")),
        ..TrainArgs::default()
    };
    cli::train(&full, &mut log)?;
    let half = TrainArgs {
        config: Some(config),
        out: Some(dir.join("half")),
        stop_at: Some(30),
        ..TrainArgs::default()
    };
    cli::train(&half, &mut log)?;
    let resume = TrainArgs {
        resume: Some(dir.join("half").join(CHECKPOINT_FILE)),
        ..TrainArgs::default()
    };
    cli::train(&resume, &mut log)?;

    let bytes = std::fs::read(dir.join("full").join(CHECKPOINT_FILE))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    println!(
        "checkpoint: {} bytes, {} tensors, step {}, config digest {}",
        bytes.len(),
        ckpt.manifest.tensors.len(),
        ckpt.manifest.step,
        &ckpt.manifest.config_digest[..16]
    );
    let bundle = ckpt.bundle()?;
    let state = ckpt.state(&bundle)?;
    let again = Checkpoint::capture(&ckpt.manifest.config, &bundle, &state).to_bytes()?;
    println!("re-serialised identically: {}", again == bytes);
    println!(
        "stopped + resumed equals uninterrupted: {}",
        std::fs::read(dir.join("half").join(CHECKPOINT_FILE))? == bytes
    );
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
