use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, RunConfig};
use crate::error::{Error, Result};
use crate::fuser::FuserMode;
use crate::metrics::{fuser_cost, write_embeddings, Convention, CostModel, ReportMeta};
use crate::tasks::{evaluate, generate_dataset, train_until, Dataset, Evaluation, Model, TaskBundle, TrainState};

pub const CHECKPOINT_FILE: &str = "checkpoint.etfc";

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// JSON run config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub total_steps: Option<usize>,
    /// Use the reference learning rate (1e-4) instead of `train.peak_lr`.
    #[arg(long)]
    pub paper_lr: bool,
    /// Continue from a checkpoint; its config wins over `--config`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Halt (and checkpoint) before this step without changing the schedule.
    #[arg(long)]
    pub stop_at: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Split {
    Train,
    #[default]
    Val,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    pub split: Split,
    /// Metric report path (JSON); a CSV copy is written next to it.
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
    #[arg(long)]
    pub export_embeddings: Option<PathBuf>,
    /// Config to check against the checkpoint digest. Its `eval` section is
    /// used for scoring.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Evaluate despite a digest mismatch.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct FlopsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub token_dim: Option<usize>,
    /// Number of tasks N.
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CompareArgs {
    /// Configs A and B. One config compares its baseline (A) against
    /// itself (B); none compares the default baseline against the default.
    #[arg(num_args = 0..=2)]
    pub configs: Vec<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// First seed; seed `i` of the sweep is `first_seed + i`.
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_digest: String,
    pub seed: u64,
    pub canonical_task: String,
    pub fused: bool,
    pub start_step: usize,
    pub end_step: usize,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub encoder_digests: Vec<String>,
    pub encoders_unchanged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub a_val_loss: f64,
    pub b_val_loss: f64,
    pub a_metrics: BTreeMap<String, f64>,
    pub b_metrics: BTreeMap<String, f64>,
}

impl SeedComparison {
    /// B minus A; negative favours B.
    pub fn delta(&self) -> f64 {
        self.b_val_loss - self.a_val_loss
    }

    pub fn b_wins(&self) -> bool {
        self.b_val_loss < self.a_val_loss
    }

    pub fn a_wins(&self) -> bool {
        self.a_val_loss < self.b_val_loss
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub canonical_task: String,
    pub a: String,
    pub b: String,
    pub a_digest: String,
    pub b_digest: String,
    pub seeds: Vec<SeedComparison>,
}

impl CompareReport {
    pub fn b_wins(&self) -> usize {
        self.seeds.iter().filter(|s| s.b_wins()).count()
    }

    pub fn a_wins(&self) -> usize {
        self.seeds.iter().filter(|s| s.a_wins()).count()
    }
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn splits(cfg: &RunConfig) -> Result<(Dataset, Vec<usize>, Vec<usize>)> {
    let data = generate_dataset(&cfg.dataset)?;
    let (train_rows, val_rows) = data.split(cfg.dataset.seed, cfg.train_fraction);
    Ok((data, train_rows, val_rows))
}

fn write_loss_curve(path: &Path, start: usize, curve: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss"])?;
    for (i, v) in curve.iter().enumerate() {
        w.write_record([(start + i).to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Builds (or resumes) a run, trains to `train.total_steps` and writes the
/// checkpoint, `loss_curve.csv` and `train_report.json`.
pub fn train(args: &TrainArgs, out: &mut dyn Write) -> Result<TrainReport> {
    let resumed = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut cfg = match &resumed {
        Some(ckpt) => ckpt.manifest.config.clone(),
        None => {
            let mut cfg = base_config(args.config.as_deref())?;
            if let Some(seed) = args.seed {
                cfg.train.seed = seed;
            }
            cfg.train.paper_lr |= args.paper_lr;
            cfg
        }
    };
    if let Some(t) = args.total_steps {
        cfg.train.total_steps = t;
    }
    match (&args.out, &args.resume) {
        (Some(o), _) => cfg.output_dir = o.clone(),
        (None, Some(ckpt)) => cfg.output_dir = ckpt.parent().map(Path::to_path_buf).unwrap_or_default(),
        (None, None) => {}
    }
    cfg.validate()?;

    let (data, train_rows, val_rows) = splits(&cfg)?;
    let c = cfg.canonical();
    let (bundle, mut state) = match &resumed {
        Some(ckpt) => {
            let bundle = ckpt.bundle()?;
            let state = ckpt.state(&bundle)?;
            (bundle, state)
        }
        None => {
            let bundle = TaskBundle::build(&data, &train_rows, c, cfg.structure, &cfg.pretrain, &cfg.train.loss, cfg.train.seed)?;
            let model = Model::new(&bundle, cfg.fuser_config(), cfg.train.decoder_hidden, cfg.train.seed)?;
            let state = TrainState::new(model, cfg.train.optimizer);
            (bundle, state)
        }
    };
    let start_step = state.step;
    let stop = args.stop_at.unwrap_or(cfg.train.total_steps);
    let view = data.canonical_view(c);
    let outcome = train_until(&bundle, &mut state, &view, &train_rows, &val_rows, &cfg.train, stop)?;

    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    Checkpoint::capture(&cfg, &bundle, &state).save(&dir.join(CHECKPOINT_FILE))?;
    write_loss_curve(&dir.join("loss_curve.csv"), start_step, &outcome.loss_curve)?;
    let report = TrainReport {
        config_digest: cfg.digest(),
        seed: cfg.train.seed,
        canonical_task: cfg.dataset.tasks[c].name.clone(),
        fused: state.model.is_fused(),
        start_step,
        end_step: state.step,
        initial_train_loss: outcome.initial_train_loss,
        final_train_loss: outcome.final_train_loss,
        initial_val_loss: outcome.initial_val_loss,
        final_val_loss: outcome.final_val_loss,
        encoder_digests: bundle.digests(),
        encoders_unchanged: bundle.verify_frozen(),
    };
    std::fs::write(dir.join("train_report.json"), serde_json::to_string_pretty(&report)?)?;
    writeln!(
        out,
        "trained {} ({}) steps {}..{}: val loss {:.4} -> {:.4}",
        report.canonical_task, cfg.structure, start_step, state.step, report.initial_val_loss, report.final_val_loss
    )?;
    writeln!(out, "wrote {}", dir.display())?;
    Ok(report)
}

/// Scores a checkpoint through the inference path. The report carries
/// `prior_encoder_calls`, which must be zero.
pub fn eval(args: &EvalArgs, out: &mut dyn Write) -> Result<Evaluation> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut cfg = ckpt.manifest.config.clone();
    if let Some(path) = &args.config {
        let given = RunConfig::load(path)?;
        ckpt.check_config(&given, args.force)?;
        cfg.eval = given.eval;
    }
    let bundle = ckpt.bundle()?;
    let state = ckpt.state(&bundle)?;
    let (data, train_rows, val_rows) = splits(&cfg)?;
    let rows = match args.split {
        Split::Train => &train_rows,
        Split::Val => &val_rows,
    };
    let c = cfg.canonical();
    let meta = ReportMeta {
        seed: cfg.train.seed,
        config_digest: ckpt.manifest.config_digest.clone(),
        split: args.split.name().into(),
        samples: rows.len(),
        f1_averaging: "macro".into(),
    };
    bundle.reset_calls();
    let mut evaluation = evaluate(
        &bundle,
        &state.model,
        &data.canonical_view(c),
        rows,
        &cfg.train.loss,
        &cfg.eval,
        meta,
    )?;
    let prior_calls: usize = bundle
        .encoder_calls()
        .iter()
        .enumerate()
        .filter(|&(t, _)| t != c)
        .map(|(_, &n)| n)
        .sum();
    evaluation.report.insert("prior_encoder_calls", prior_calls as f64)?;
    evaluation.report.insert("macs_per_sample", evaluation.macs_per_sample as f64)?;

    let json = args
        .metrics_out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join(format!("metrics_{}.json", args.split.name())));
    if let Some(parent) = json.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    evaluation.report.write_json(&json)?;
    evaluation.report.write_csv(&json.with_extension("csv"))?;
    if let Some(path) = &args.export_embeddings {
        write_embeddings(path, &evaluation.embeddings)?;
    }
    for (name, value) in &evaluation.report.metrics {
        writeln!(out, "{name:>24} {value:.6}")?;
    }
    for w in &evaluation.report.warnings {
        writeln!(out, "warning: {w}")?;
    }
    Ok(evaluation)
}

/// Prints inference and training cost under both conventions, plus the
/// marginal training cost of one more task.
pub fn flops(args: &FlopsArgs, out: &mut dyn Write) -> Result<()> {
    let mut f = base_config(args.config.as_deref())?.fuser;
    if let Some(d) = args.token_dim {
        f.token_dim = d;
    }
    if let Some(n) = args.tasks {
        f.n_tasks = n;
        f.canonical_index = f.canonical_index.min(n.saturating_sub(1));
    }
    if let Some(h) = args.heads {
        f.heads = h;
    }
    f.validate()?;
    let n = f.n_tasks;
    writeln!(out, "d={} N={} heads={} ffn_ratio={}", f.token_dim, n, f.heads, f.ffn_ratio)?;
    for convention in [Convention::MacsAs1, Convention::MacsAs2] {
        let model = CostModel {
            convention,
            include_attention_quadratic: true,
        };
        let infer = fuser_cost(&f, f.sequence_len(FuserMode::Infer), FuserMode::Infer, model);
        let trn = fuser_cost(&f, f.sequence_len(FuserMode::Train), FuserMode::Train, model);
        let linear = CostModel {
            include_attention_quadratic: false,
            ..model
        };
        let slope = fuser_cost(&f, n + 2, FuserMode::Train, linear).total() - fuser_cost(&f, n + 1, FuserMode::Train, linear).total();
        writeln!(out, "[{}]", convention.label())?;
        writeln!(out, "  inference  {:>14} ({:.3} M)", infer.total(), infer.total() as f64 / 1e6)?;
        writeln!(out, "  training   {:>14} ({:.3} M)", trn.total(), trn.total() as f64 / 1e6)?;
        writeln!(out, "  per extra task (linear terms) {slope}")?;
    }
    writeln!(out, "inference breakdown (MACs):")?;
    let infer = fuser_cost(&f, 2, FuserMode::Infer, CostModel::default()).with_convention(Convention::MacsAs1);
    for (name, c) in &infer.components {
        writeln!(out, "  {name:<20} {c:>12}")?;
    }
    Ok(())
}

fn label(cfg: &RunConfig) -> String {
    if cfg.structure.fused {
        format!("{} theta={}", cfg.structure, cfg.fuser.theta.get())
    } else {
        cfg.structure.to_string()
    }
}

/// Trains A and B on the same dataset for each seed and reports canonical
/// validation loss and metrics of both.
pub fn compare(args: &CompareArgs, out: &mut dyn Write) -> Result<CompareReport> {
    let (mut a, mut b) = match &args.configs[..] {
        [] => (RunConfig::default().as_baseline(), RunConfig::default()),
        [one] => {
            let cfg = RunConfig::load(one)?;
            (cfg.as_baseline(), cfg)
        }
        [x, y, ..] => (RunConfig::load(x)?, RunConfig::load(y)?),
    };
    if let Some(o) = &args.out {
        a.output_dir = o.clone();
        b.output_dir = o.clone();
    }
    a.validate()?;
    b.validate()?;
    if args.seeds == 0 {
        return Err(Error::config("seeds", "must be at least 1"));
    }
    let seeds: Vec<u64> = (0..args.seeds).map(|i| args.first_seed + i).collect();
    let report = compare_configs(&a, &b, &seeds)?;

    let dir = &b.output_dir;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("compare.json"), serde_json::to_string_pretty(&report)?)?;
    let mut w = csv::Writer::from_path(dir.join("compare.csv"))?;
    w.write_record(["seed", "a_val_loss", "b_val_loss", "delta"])?;
    for s in &report.seeds {
        w.write_record([
            s.seed.to_string(),
            s.a_val_loss.to_string(),
            s.b_val_loss.to_string(),
            format!("{:+.4}", s.delta()),
        ])?;
    }
    w.flush()?;

    writeln!(out, "canonical task {}", report.canonical_task)?;
    writeln!(out, "A: {}\nB: {}", report.a, report.b)?;
    writeln!(out, "{:>6} {:>10} {:>20}", "seed", "A", "B (delta)")?;
    for s in &report.seeds {
        writeln!(
            out,
            "{:>6} {:>10.4} {:>10.4} ({:+.4})",
            s.seed,
            s.a_val_loss,
            s.b_val_loss,
            s.delta()
        )?;
    }
    let n = report.seeds.len();
    writeln!(out, "B wins {}/{n}, A wins {}/{n}", report.b_wins(), report.a_wins())?;
    Ok(report)
}

/// Library form of [`compare`]. Both configs must share the dataset, the
/// split and the canonical task.
pub fn compare_configs(a: &RunConfig, b: &RunConfig, seeds: &[u64]) -> Result<CompareReport> {
    if a.dataset != b.dataset || a.train_fraction != b.train_fraction {
        return Err(Error::config("dataset", "A and B must use the same dataset spec and split"));
    }
    if a.canonical() != b.canonical() {
        return Err(Error::config("fuser.canonical_index", "A and B must share the canonical task"));
    }
    let (data, train_rows, val_rows) = splits(a)?;
    let rows = seeds
        .par_iter()
        .map(|&seed| compare_seed(a, b, &data, &train_rows, &val_rows, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(CompareReport {
        canonical_task: a.dataset.tasks[a.canonical()].name.clone(),
        a: label(a),
        b: label(b),
        a_digest: a.digest(),
        b_digest: b.digest(),
        seeds: rows,
    })
}

/// Encoders pretrained for `cfg` can serve `other` too: same canonical
/// encoder, and the priors either match or go unused.
fn shares_encoders(cfg: &RunConfig, other: &RunConfig) -> bool {
    cfg.structure.canonical == other.structure.canonical
        && cfg.pretrain == other.pretrain
        && cfg.train.loss == other.train.loss
        && (!other.structure.fused || (cfg.structure.fused && cfg.structure.prior == other.structure.prior))
}

fn build_bundle(cfg: &RunConfig, data: &Dataset, train_rows: &[usize], seed: u64) -> Result<TaskBundle> {
    TaskBundle::build(
        data,
        train_rows,
        cfg.canonical(),
        cfg.structure,
        &cfg.pretrain,
        &cfg.train.loss,
        seed,
    )
}

fn run_one(
    cfg: &RunConfig,
    bundle: &TaskBundle,
    data: &Dataset,
    train_rows: &[usize],
    val_rows: &[usize],
    seed: u64,
) -> Result<(f64, BTreeMap<String, f64>)> {
    let c = cfg.canonical();
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    let view = data.canonical_view(c);
    let model = Model::new(bundle, cfg.fuser_config(), tcfg.decoder_hidden, seed)?;
    let mut state = TrainState::new(model, tcfg.optimizer);
    let outcome = crate::tasks::train(bundle, &mut state, &view, train_rows, val_rows, &tcfg)?;
    let meta = ReportMeta {
        seed,
        config_digest: cfg.digest(),
        split: "val".into(),
        samples: val_rows.len(),
        f1_averaging: "macro".into(),
    };
    let eval = evaluate(bundle, &state.model, &view, val_rows, &tcfg.loss, &cfg.eval, meta)?;
    Ok((outcome.final_val_loss, eval.report.metrics))
}

/// One seed of [`compare_configs`]. When possible A and B share one set of
/// pretrained encoders, so the only difference is the fuser itself.
pub fn compare_seed(
    a: &RunConfig,
    b: &RunConfig,
    data: &Dataset,
    train_rows: &[usize],
    val_rows: &[usize],
    seed: u64,
) -> Result<SeedComparison> {
    let (bundle_a, bundle_b) = if shares_encoders(b, a) {
        let shared = build_bundle(b, data, train_rows, seed)?;
        (shared.clone(), shared)
    } else if shares_encoders(a, b) {
        let shared = build_bundle(a, data, train_rows, seed)?;
        (shared.clone(), shared)
    } else {
        (build_bundle(a, data, train_rows, seed)?, build_bundle(b, data, train_rows, seed)?)
    };
    let (a_val_loss, a_metrics) = run_one(a, &bundle_a, data, train_rows, val_rows, seed)?;
    let (b_val_loss, b_metrics) = run_one(b, &bundle_b, data, train_rows, val_rows, seed)?;
    Ok(SeedComparison {
        seed,
        a_val_loss,
        b_val_loss,
        a_metrics,
        b_metrics,
    })
}
