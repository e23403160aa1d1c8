use serde::{Deserialize, Serialize};

use super::data::{Dataset, Labels, TaskKind, TaskSpec, AGE_SCALE, LANDMARK_CANVAS};
use super::decoder::Decoder;
use super::encoder::{pretrain_prior, FrozenEncoder, PretrainConfig, Structure, TrainableEncoder};
use super::losses::{prediction_loss, task_loss, LossConfig};
use super::optim::{warmup_cosine_lr, Optimizer, OptimizerKind};
use crate::error::{Error, Result};
use crate::fuser::{
    apply_drop_mask, enrich_embedding, sample_drop_mask, DropMask, EtFuser, FuserConfig, FuserMode, PriorTokenSet, MASK_STREAM,
};
use crate::metrics::{
    accuracy, cs_at, f1_macro, fuser_cost, intra_class_variance, mae, nme, tar_at_far, Convention, CostModel, EmbeddingRow, FlopBreakdown,
    MetricReport, ReportMeta,
};
use crate::tensor::{ops, ParamId, ParamStore, Rng, Tape, Tensor, Var};

const BATCH_STREAM: u64 = 0x626174;
const DECODER_STREAM: u64 = 0x646563;
const FUSER_STREAM: u64 = 0x667573;
const EVAL_CHUNK: usize = 250;

/// Stacks rows `rows` of a `[n × …]` tensor.
pub fn gather_rows(t: &Tensor<f32>, rows: &[usize]) -> Tensor<f32> {
    let width: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(rows.len() * width);
    for &i in rows {
        data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data).expect("gathered rows")
}

/// The canonical task's slice of a dataset: inputs plus canonical labels
/// only. Training and evaluation never see any other task's labels.
#[derive(Clone, Copy, Debug)]
pub struct CanonicalView<'a> {
    pub inputs: &'a Tensor<f32>,
    pub labels: &'a Labels,
    pub kind: TaskKind,
}

impl Dataset {
    pub fn canonical_view(&self, canonical: usize) -> CanonicalView<'_> {
        CanonicalView {
            inputs: &self.inputs,
            labels: &self.labels[canonical],
            kind: self.tasks[canonical].kind,
        }
    }
}

/// Frozen encoders, one per task, and the canonical task selection.
#[derive(Clone, Debug)]
pub struct TaskBundle {
    pub tasks: Vec<TaskSpec>,
    pub canonical: usize,
    pub encoders: Vec<FrozenEncoder>,
    pub input_shape: Vec<usize>,
}

impl TaskBundle {
    pub fn from_encoders(tasks: Vec<TaskSpec>, canonical: usize, encoders: Vec<FrozenEncoder>, input_shape: Vec<usize>) -> Result<Self> {
        if canonical >= tasks.len() {
            return Err(Error::config(
                "canonical_task",
                format!("index {canonical} but {} tasks", tasks.len()),
            ));
        }
        if encoders.len() != tasks.len() || encoders.iter().enumerate().any(|(i, e)| e.task != i) {
            return Err(Error::Contract("encoder bank must hold one encoder per task, in task order".into()));
        }
        Ok(Self {
            tasks,
            canonical,
            encoders,
            input_shape,
        })
    }

    /// Pre-trains one encoder per task on its own labels and freezes it.
    pub fn build(
        data: &Dataset,
        train_rows: &[usize],
        canonical: usize,
        structure: Structure,
        pretrain: &PretrainConfig,
        loss: &LossConfig,
        seed: u64,
    ) -> Result<Self> {
        let in_ch = data.input_shape()[0];
        let encoders = data
            .tasks
            .iter()
            .enumerate()
            .map(|(t, spec)| {
                let width = if t == canonical { structure.canonical } else { structure.prior };
                pretrain_prior(
                    TrainableEncoder::new(t, width, in_ch, seed),
                    spec,
                    data,
                    train_rows,
                    pretrain,
                    loss,
                    seed,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_encoders(data.tasks.clone(), canonical, encoders, data.input_shape().to_vec())
    }

    pub fn canonical_kind(&self) -> TaskKind {
        self.tasks[self.canonical].kind
    }

    pub fn canonical_encoder(&self) -> &FrozenEncoder {
        &self.encoders[self.canonical]
    }

    pub fn token_dim(&self) -> usize {
        self.canonical_encoder().channels()
    }

    pub fn digests(&self) -> Vec<String> {
        self.encoders.iter().map(|e| e.digest().to_string()).collect()
    }

    /// Every encoder still hashes to the digest recorded at freezing.
    pub fn verify_frozen(&self) -> bool {
        self.encoders.iter().all(FrozenEncoder::verify)
    }

    pub fn encoder_calls(&self) -> Vec<usize> {
        self.encoders.iter().map(FrozenEncoder::calls).collect()
    }

    pub fn reset_calls(&self) {
        self.encoders.iter().for_each(FrozenEncoder::reset_calls);
    }

    fn map_hw(&self) -> (usize, usize) {
        self.canonical_encoder().output_hw(&self.input_shape)
    }
}

/// Frozen-encoder outputs for a list of dataset rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSplit {
    /// Canonical maps `[n × d × h × w]`.
    pub maps: Tensor<f32>,
    /// Pooled `[n × c_t]` tokens of every task; empty without priors.
    pub pooled: Vec<Tensor<f32>>,
    pub canonical: usize,
    pub token_dim: usize,
}

impl EncodedSplit {
    pub fn len(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Maps and prior tokens for positions `pos` of the split.
    pub fn batch(&self, pos: &[usize]) -> Result<(Tensor<f32>, Option<PriorTokenSet<f32>>)> {
        let maps = gather_rows(&self.maps, pos);
        if self.pooled.is_empty() {
            return Ok((maps, None));
        }
        let rows: Vec<Tensor<f32>> = self.pooled.iter().map(|p| gather_rows(p, pos)).collect();
        let refs: Vec<(usize, &Tensor<f32>)> = rows.iter().enumerate().collect();
        let set = PriorTokenSet::from_pooled(&refs, self.canonical, self.token_dim)?;
        Ok((maps, Some(set)))
    }
}

/// Runs the canonical encoder (and, with `with_priors`, every other
/// encoder) over `rows` of `inputs`.
pub fn encode_split(bundle: &TaskBundle, inputs: &Tensor<f32>, rows: &[usize], with_priors: bool) -> Result<EncodedSplit> {
    let mut maps = Vec::new();
    let mut pooled: Vec<Vec<f32>> = vec![Vec::new(); if with_priors { bundle.encoders.len() } else { 0 }];
    for chunk in rows.chunks(EVAL_CHUNK) {
        let x = gather_rows(inputs, chunk);
        for (t, enc) in bundle.encoders.iter().enumerate() {
            if t != bundle.canonical && !with_priors {
                continue;
            }
            let e = enc.embed(&x)?;
            if with_priors {
                pooled[t].extend_from_slice(ops::gap(&e)?.data());
            }
            if t == bundle.canonical {
                maps.extend_from_slice(e.data());
            }
        }
    }
    let (h, w) = bundle.map_hw();
    let d = bundle.token_dim();
    let n = rows.len();
    Ok(EncodedSplit {
        maps: Tensor::new([n, d, h, w], maps)?,
        pooled: pooled
            .into_iter()
            .zip(&bundle.encoders)
            .map(|(p, e)| Tensor::new([n, e.channels()], p))
            .collect::<Result<_>>()?,
        canonical: bundle.canonical,
        token_dim: d,
    })
}

/// Trainable part of the system: the canonical decoder and, unless this is
/// a baseline, the fuser. Both live in one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore<f32>,
    pub decoder: Decoder,
    pub fuser: Option<EtFuser>,
}

impl Model {
    /// Decoder and fuser draw from separate streams, so a baseline and a
    /// fused model with the same seed start from the same decoder.
    pub fn new(bundle: &TaskBundle, fuser: Option<FuserConfig>, hidden: usize, seed: u64) -> Result<Self> {
        let d = bundle.token_dim();
        let mut store = ParamStore::new();
        let decoder = Decoder::new(
            &mut store,
            "decoder",
            d,
            hidden,
            bundle.canonical_kind().output_dim(),
            &mut Rng::with_stream(seed, DECODER_STREAM),
        );
        let fuser = match fuser {
            None => None,
            Some(cfg) => {
                if cfg.token_dim != d {
                    return Err(Error::config(
                        "fuser.token_dim",
                        format!("{} but the canonical encoder emits {d} channels", cfg.token_dim),
                    ));
                }
                if cfg.n_tasks != bundle.tasks.len() || cfg.canonical_index != bundle.canonical {
                    return Err(Error::config(
                        "fuser",
                        "task count or canonical index disagrees with the task bundle",
                    ));
                }
                if let Some(e) = bundle.encoders.iter().find(|e| e.channels() > d) {
                    return Err(Error::Capacity {
                        channels: e.channels(),
                        width: d,
                    });
                }
                Some(EtFuser::new(&mut store, cfg, &mut Rng::with_stream(seed, FUSER_STREAM))?)
            }
        };
        Ok(Self { store, decoder, fuser })
    }

    pub fn is_fused(&self) -> bool {
        self.fuser.is_some()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| self.store.is_trainable(id)).collect()
    }

    fn head(&self, tape: &mut Tape<f32>, e_c: Var, set: Option<(&PriorTokenSet<f32>, FuserMode)>) -> Result<(Var, Var)> {
        let e = match (&self.fuser, set) {
            (Some(f), Some((s, mode))) => {
                let fused = f.fuse(tape, &self.store, s, mode)?;
                enrich_embedding(tape, e_c, fused)?
            }
            (None, _) => e_c,
            (Some(_), None) => return Err(Error::Contract("fused model run without prior tokens".into())),
        };
        self.decoder.forward(tape, &self.store, e)
    }

    /// Training path: canonical maps and the full prior set, masked by
    /// `mask`. Returns the pooled enriched embedding and the prediction.
    pub fn forward_train(
        &self,
        tape: &mut Tape<f32>,
        maps: &Tensor<f32>,
        priors: Option<&PriorTokenSet<f32>>,
        mask: Option<&DropMask>,
    ) -> Result<(Var, Var)> {
        let e = tape.constant(maps.clone());
        match (&self.fuser, priors, mask) {
            (None, ..) => self.head(tape, e, None),
            (Some(_), Some(p), Some(m)) => {
                let masked = apply_drop_mask(p, m)?;
                self.head(tape, e, Some((&masked, FuserMode::Train)))
            }
            _ => Err(Error::Contract("fused training step needs prior tokens and a drop mask".into())),
        }
    }

    /// Inference path from a canonical map already on the tape.
    pub fn forward_infer_map(&self, tape: &mut Tape<f32>, e_c: Var, canonical: usize) -> Result<(Var, Var)> {
        match &self.fuser {
            None => self.head(tape, e_c, None),
            Some(f) => {
                let pooled = tape.gap(e_c)?;
                let pooled = tape.value(pooled).clone();
                let set = PriorTokenSet::from_pooled(&[(canonical, &pooled)], canonical, f.cfg.token_dim)?;
                self.head(tape, e_c, Some((&set, FuserMode::Infer)))
            }
        }
    }

    /// Inference path from raw inputs: the canonical encoder only.
    pub fn forward_infer(&self, tape: &mut Tape<f32>, bundle: &TaskBundle, x: &Tensor<f32>) -> Result<(Var, Var)> {
        let xv = tape.constant(x.clone());
        let e = bundle.canonical_encoder().forward(tape, xv)?;
        self.forward_infer_map(tape, e, bundle.canonical)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Use the small learning rate intended for large pretrained models.
    pub paper_lr: bool,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub decoder_hidden: usize,
    pub loss: LossConfig,
    /// Run every frozen encoder on each batch instead of once per split.
    pub recompute_encoders: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            peak_lr: 1e-3,
            paper_lr: false,
            warmup_steps: 100,
            total_steps: 2000,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            decoder_hidden: 64,
            loss: LossConfig::default(),
            recompute_encoders: false,
        }
    }
}

pub const REFERENCE_LR: f64 = 1e-5;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.total_steps > 0 && self.total_steps <= self.warmup_steps {
            return Err(Error::config(
                "train.total_steps",
                format!("{} must exceed warmup_steps = {}", self.total_steps, self.warmup_steps),
            ));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config("train.peak_lr", "must be finite and non-negative"));
        }
        if self.decoder_hidden == 0 {
            return Err(Error::config("train.decoder_hidden", "must be at least 1"));
        }
        if !(self.loss.wing_width > 0.0 && self.loss.wing_curvature > 0.0) {
            return Err(Error::config("train.loss", "wing width and curvature must be positive"));
        }
        Ok(())
    }

    pub fn effective_lr(&self) -> f64 {
        if self.paper_lr {
            REFERENCE_LR
        } else {
            self.peak_lr
        }
    }

    /// Learning rate of the update taking the model from `step` to `step + 1`.
    pub fn lr_for_update(&self, step: usize) -> Result<f64> {
        warmup_cosine_lr(step + 1, self.warmup_steps, self.total_steps, self.effective_lr())
    }

    /// Positions in the training split drawn at `step`; one shuffle per epoch.
    pub fn batch_positions(&self, step: usize, n: usize) -> Vec<usize> {
        let b = self.batch_size.min(n);
        let per_epoch = (n / b).max(1);
        let mut order: Vec<usize> = (0..n).collect();
        Rng::keyed(self.seed, BATCH_STREAM, (step / per_epoch) as u64).shuffle(&mut order);
        let at = (step % per_epoch) * b;
        order[at..at + b].to_vec()
    }

    pub fn drop_mask(&self, step: usize, fuser: &FuserConfig) -> DropMask {
        let mut rng = Rng::keyed(self.seed, MASK_STREAM, step as u64);
        sample_drop_mask(&mut rng, fuser.n_tasks, fuser.canonical_index, fuser.theta)
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Optimizer,
    pub step: usize,
}

impl TrainState {
    pub fn new(model: Model, kind: OptimizerKind) -> Self {
        let optimizer = Optimizer::new(kind, &model.store);
        Self { model, optimizer, step: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Batch loss before each update, indexed by step.
    pub loss_curve: Vec<f64>,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
}

fn param_stats(store: &ParamStore<f32>) -> String {
    store
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(_, e)| {
            let max = e.value.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
            format!("{} max|p|={max}", e.name)
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Loss of the inference path over a pre-encoded split.
pub fn split_loss(model: &Model, enc: &EncodedSplit, labels: &Labels, kind: TaskKind, rows: &[usize], loss: &LossConfig) -> Result<f64> {
    let mut preds = Vec::with_capacity(rows.len());
    let positions: Vec<usize> = (0..rows.len()).collect();
    for chunk in positions.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let e = tape.constant(gather_rows(&enc.maps, chunk));
        let (_, pred) = model.forward_infer_map(&mut tape, e, enc.canonical)?;
        let p = tape.value(pred);
        for r in 0..chunk.len() {
            preds.push(p.row(r).iter().map(|&v| v as f64).collect());
        }
    }
    prediction_loss(&preds, kind, labels, rows, loss)
}

/// Fine-tunes the fuser and canonical decoder from `state.step` up to
/// `cfg.total_steps`. Only the canonical labels are reachable from here.
pub fn train(
    bundle: &TaskBundle,
    state: &mut TrainState,
    view: &CanonicalView<'_>,
    train_rows: &[usize],
    val_rows: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_until(bundle, state, view, train_rows, val_rows, cfg, cfg.total_steps)
}

/// [`train`] halted before step `stop`. The schedule still spans
/// `cfg.total_steps`, so a run stopped here and resumed later matches an
/// uninterrupted one.
pub fn train_until(
    bundle: &TaskBundle,
    state: &mut TrainState,
    view: &CanonicalView<'_>,
    train_rows: &[usize],
    val_rows: &[usize],
    cfg: &TrainConfig,
    stop: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let stop = stop.min(cfg.total_steps);
    if train_rows.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let fused = state.model.fuser.clone();
    let with_priors = fused.is_some();
    let kind = view.kind;
    let cached = if cfg.recompute_encoders {
        None
    } else {
        Some(encode_split(bundle, view.inputs, train_rows, with_priors)?)
    };
    let train_enc = match &cached {
        Some(c) => c.clone(),
        None => encode_split(bundle, view.inputs, train_rows, false)?,
    };
    let val_enc = encode_split(bundle, view.inputs, val_rows, false)?;
    let eval_losses = |model: &Model| -> Result<(f64, f64)> {
        let tr = split_loss(model, &train_enc, view.labels, kind, train_rows, &cfg.loss)?;
        let va = if val_rows.is_empty() {
            f64::NAN
        } else {
            split_loss(model, &val_enc, view.labels, kind, val_rows, &cfg.loss)?
        };
        Ok((tr, va))
    };
    let (initial_train_loss, initial_val_loss) = eval_losses(&state.model)?;

    let mut curve = Vec::with_capacity(stop.saturating_sub(state.step));
    while state.step < stop {
        let step = state.step;
        let pos = cfg.batch_positions(step, train_rows.len());
        let rows: Vec<usize> = pos.iter().map(|&p| train_rows[p]).collect();
        let (maps, priors) = match &cached {
            Some(c) => c.batch(&pos)?,
            None => {
                let live = encode_split(bundle, view.inputs, &rows, with_priors)?;
                let all: Vec<usize> = (0..rows.len()).collect();
                live.batch(&all)?
            }
        };
        let mask = fused.as_ref().map(|f| cfg.drop_mask(step, &f.cfg));

        let mut tape = Tape::new();
        let (_, pred) = state.model.forward_train(&mut tape, &maps, priors.as_ref(), mask.as_ref())?;
        let loss = task_loss(&mut tape, pred, kind, view.labels, &rows, &cfg.loss)?;
        let value = tape.value(loss).item()? as f64;
        if !value.is_finite() {
            return Err(Error::Numeric {
                step,
                detail: format!("loss is {value}; {}", param_stats(&state.model.store)),
            });
        }
        let grads = tape.backward(loss)?;
        let lr = cfg.lr_for_update(step)?;
        state.optimizer.step(&mut state.model.store, &grads, lr)?;
        curve.push(value);
        state.step += 1;
    }

    let (final_train_loss, final_val_loss) = eval_losses(&state.model)?;
    Ok(TrainOutcome {
        loss_curve: curve,
        initial_train_loss,
        final_train_loss,
        initial_val_loss,
        final_val_loss,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Tolerance `L` of the cumulative score, in years.
    pub cs_tolerance: f64,
    pub far_target: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cs_tolerance: 5.0,
            far_target: 0.001,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub embeddings: Vec<EmbeddingRow>,
    pub predictions: Vec<Vec<f64>>,
    /// Tape cost of the inference forward pass, per sample.
    pub macs_per_sample: u64,
}

/// Task-appropriate metrics for collected predictions. `embeddings` feed
/// the identity metrics and may be empty otherwise.
#[allow(clippy::too_many_arguments)]
pub fn score_predictions(
    kind: TaskKind,
    preds: &[Vec<f64>],
    embeddings: &[Vec<f64>],
    labels: &Labels,
    rows: &[usize],
    loss: &LossConfig,
    eval: &EvalConfig,
    meta: ReportMeta,
) -> Result<MetricReport> {
    let mut report = MetricReport::new(ReportMeta {
        samples: rows.len(),
        f1_averaging: "macro".into(),
        ..meta
    });
    report.insert("loss", prediction_loss(preds, kind, labels, rows, loss)?)?;
    match kind {
        TaskKind::Landmark { points } => {
            let mut nmes = Vec::with_capacity(rows.len());
            let mut abs = Vec::new();
            for (p, &i) in preds.iter().zip(rows) {
                let gt = labels.target(i);
                let pt = |v: &[f64], k: usize| [v[2 * k], v[2 * k + 1]];
                let gt64: Vec<f64> = gt.iter().map(|&v| v as f64).collect();
                let pp: Vec<[f64; 2]> = (0..points).map(|k| pt(p, k)).collect();
                let gg: Vec<[f64; 2]> = (0..points).map(|k| pt(&gt64, k)).collect();
                nmes.push(nme(&pp, &gg, gg[0], gg[1])?);
                abs.extend(p.iter().zip(&gt64).map(|(a, b)| (a - b) * LANDMARK_CANVAS));
            }
            report.insert("nme", nmes.iter().sum::<f64>() / nmes.len() as f64)?;
            report.insert("mae_px", mae(&abs)?)?;
        }
        TaskKind::Scalar => {
            let errs: Vec<f64> = preds
                .iter()
                .zip(rows)
                .map(|(p, &i)| (p[0] - labels.target(i)[0] as f64) * AGE_SCALE)
                .collect();
            report.insert("mae_years", mae(&errs)?)?;
            report.insert(&format!("cs@{}", eval.cs_tolerance), cs_at(&errs, eval.cs_tolerance)?)?;
        }
        TaskKind::Classification { classes } | TaskKind::Identity { classes } => {
            let argmax = |p: &Vec<f64>| (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0);
            let pred: Vec<usize> = preds.iter().map(argmax).collect();
            let gt: Vec<usize> = rows
                .iter()
                .map(|&i| labels.class(i).ok_or_else(|| Error::Contract("missing class labels".into())))
                .collect::<Result<_>>()?;
            report.insert("accuracy", accuracy(&pred, &gt)?)?;
            report.insert("f1_macro", f1_macro(&pred, &gt, classes)?)?;
            if matches!(kind, TaskKind::Identity { .. }) && !embeddings.is_empty() {
                let pairs: Vec<(&[f64], usize)> = embeddings.iter().map(|e| e.as_slice()).zip(gt.iter().copied()).collect();
                report.insert("intra_class_variance", intra_class_variance(&pairs)?)?;
                let unit: Vec<Vec<f64>> = embeddings
                    .iter()
                    .map(|e| {
                        let n = e.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                        e.iter().map(|v| v / n).collect()
                    })
                    .collect();
                let (mut genuine, mut impostor) = (Vec::new(), Vec::new());
                for i in 0..unit.len() {
                    for j in i + 1..unit.len() {
                        let s: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
                        if gt[i] == gt[j] {
                            genuine.push(s);
                        } else {
                            impostor.push(s);
                        }
                    }
                }
                if !genuine.is_empty() && !impostor.is_empty() {
                    let r = tar_at_far(&genuine, &impostor, eval.far_target)?;
                    report.insert(&format!("tar@far={}", eval.far_target), r.tar)?;
                    if let Some(w) = r.warning {
                        report.warn(w);
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Runs the inference path (canonical encoder only) over `rows` and scores
/// it.
pub fn evaluate(
    bundle: &TaskBundle,
    model: &Model,
    view: &CanonicalView<'_>,
    rows: &[usize],
    loss: &LossConfig,
    eval: &EvalConfig,
    meta: ReportMeta,
) -> Result<Evaluation> {
    if rows.is_empty() {
        return Err(Error::Contract("evaluation split is empty".into()));
    }
    let mut preds = Vec::with_capacity(rows.len());
    let mut embeddings = Vec::with_capacity(rows.len());
    let mut macs = 0u64;
    for chunk in rows.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let (pooled, pred) = model.forward_infer(&mut tape, bundle, &gather_rows(view.inputs, chunk))?;
        macs += tape.flops();
        let (p, e) = (tape.value(pred), tape.value(pooled));
        for r in 0..chunk.len() {
            preds.push(p.row(r).iter().map(|&v| v as f64).collect::<Vec<_>>());
            embeddings.push(e.row(r).iter().map(|&v| v as f64).collect::<Vec<_>>());
        }
    }
    let report = score_predictions(view.kind, &preds, &embeddings, view.labels, rows, loss, eval, meta)?;
    let rows_out = rows
        .iter()
        .zip(&embeddings)
        .map(|(&i, v)| EmbeddingRow {
            id: i,
            class: view.labels.class(i).unwrap_or(0),
            values: v.clone(),
        })
        .collect();
    Ok(Evaluation {
        report,
        embeddings: rows_out,
        predictions: preds,
        macs_per_sample: macs / rows.len() as u64,
    })
}

/// Analytic per-sample inference cost: canonical encoder, token pooling,
/// fuser, enrichment and decoder.
pub fn inference_cost(bundle: &TaskBundle, model: &Model) -> FlopBreakdown {
    let (h, w) = bundle.map_hw();
    let hw = h * w;
    let d = bundle.token_dim() as u64;
    let mut components = vec![("encoder".to_string(), bundle.canonical_encoder().cost(&bundle.input_shape))];
    if let Some(f) = &model.fuser {
        components.push(("token_pool".into(), d * hw as u64));
        let model_cost = CostModel {
            convention: Convention::MacsAs1,
            include_attention_quadratic: true,
        };
        let fc = fuser_cost(&f.cfg, 2, FuserMode::Infer, model_cost);
        components.extend(fc.components.into_iter().map(|(n, c)| (format!("fuser.{n}"), c)));
        components.push(("enrichment".into(), d + d * hw as u64));
    }
    components.push(("decoder".into(), model.decoder.cost(hw)));
    FlopBreakdown {
        convention: Convention::MacsAs1,
        components,
    }
}
