use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::data::{Dataset, TaskSpec};
use super::decoder::Decoder;
use super::losses::{task_loss, LossConfig};
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::metrics::conv_cost;
use crate::nn::Conv2dLayer;
use crate::tensor::{ParamStore, Rng, Tape, Tensor, Var};

const ENCODER_INIT_STREAM: u64 = 0x656e63;
const PRETRAIN_BATCH_STREAM: u64 = 0x707472;
const PRETRAIN_HEAD_STREAM: u64 = 0x686564;

/// Output channel width of a toy encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WidthClass {
    S,
    M,
    L,
}

impl WidthClass {
    pub fn channels(self) -> usize {
        match self {
            WidthClass::S => 16,
            WidthClass::M => 32,
            WidthClass::L => 64,
        }
    }
}

impl fmt::Display for WidthClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            WidthClass::S => "S",
            WidthClass::M => "M",
            WidthClass::L => "L",
        };
        f.write_str(s)
    }
}

impl FromStr for WidthClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" => Ok(WidthClass::S),
            "M" => Ok(WidthClass::M),
            "L" => Ok(WidthClass::L),
            _ => Err(Error::config(
                "structure",
                format!("unknown width class `{s}` (expected S, M or L)"),
            )),
        }
    }
}

/// `"M_to_L"`: priors of width M fused into a canonical branch of width L.
/// `"L_baseline"`: canonical branch of width L with no fuser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Structure {
    pub prior: WidthClass,
    pub canonical: WidthClass,
    pub fused: bool,
}

impl Structure {
    pub fn baseline(self) -> Self {
        Self { fused: false, ..self }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.fused {
            write!(f, "{}_to_{}", self.prior, self.canonical)
        } else {
            write!(f, "{}_baseline", self.canonical)
        }
    }
}

impl FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(c) = s.strip_suffix("_baseline") {
            let canonical = c.parse()?;
            return Ok(Self {
                prior: canonical,
                canonical,
                fused: false,
            });
        }
        let (p, c) = s
            .split_once("_to_")
            .ok_or_else(|| Error::config("structure", format!("`{s}` is neither `X_to_Y` nor `X_baseline`")))?;
        Ok(Self {
            prior: p.parse()?,
            canonical: c.parse()?,
            fused: true,
        })
    }
}

impl Serialize for Structure {
    fn serialize<Ser: serde::Serializer>(&self, s: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Structure {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn build_convs(store: &mut ParamStore<f32>, channels: usize, in_ch: usize, rng: &mut Rng) -> [Conv2dLayer; 3] {
    [
        Conv2dLayer::new(store, "encoder.conv1", in_ch, 8, 3, 2, 1, rng),
        Conv2dLayer::new(store, "encoder.conv2", 8, 16, 3, 2, 1, rng),
        Conv2dLayer::new(store, "encoder.conv3", 16, channels, 3, 2, 1, rng),
    ]
}

fn conv_stack(tape: &mut Tape<f32>, store: &ParamStore<f32>, convs: &[Conv2dLayer; 3], x: Var) -> Result<Var> {
    let h = convs[0].forward(tape, store, x)?;
    let h = tape.relu(h);
    let h = convs[1].forward(tape, store, h)?;
    let h = tape.relu(h);
    convs[2].forward(tape, store, h)
}

/// Encoder whose weights are still being pre-trained.
#[derive(Clone, Debug)]
pub struct TrainableEncoder {
    pub task: usize,
    pub width: WidthClass,
    pub store: ParamStore<f32>,
    convs: [Conv2dLayer; 3],
}

impl TrainableEncoder {
    pub fn new(task: usize, width: WidthClass, in_channels: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = Rng::with_stream(seed, ENCODER_INIT_STREAM + task as u64);
        let convs = build_convs(&mut store, width.channels(), in_channels, &mut rng);
        Self { task, width, store, convs }
    }

    pub fn forward(&self, tape: &mut Tape<f32>, x: Var) -> Result<Var> {
        conv_stack(tape, &self.store, &self.convs, x)
    }

    /// Clears every trainable flag and records the parameter digest.
    pub fn freeze(mut self) -> FrozenEncoder {
        self.store.set_trainable_all(false);
        let digest = self.store.digest();
        FrozenEncoder {
            task: self.task,
            width: self.width,
            store: self.store,
            convs: self.convs,
            digest,
            calls: AtomicUsize::new(0),
        }
    }
}

/// Toy convolutional encoder with frozen weights: three 3×3 stride-2
/// convolutions, ReLU between them.
#[derive(Debug)]
pub struct FrozenEncoder {
    pub task: usize,
    pub width: WidthClass,
    store: ParamStore<f32>,
    convs: [Conv2dLayer; 3],
    digest: String,
    calls: AtomicUsize,
}

impl Clone for FrozenEncoder {
    fn clone(&self) -> Self {
        Self {
            task: self.task,
            width: self.width,
            store: self.store.clone(),
            convs: self.convs,
            digest: self.digest.clone(),
            calls: AtomicUsize::new(self.calls()),
        }
    }
}

impl FrozenEncoder {
    pub fn channels(&self) -> usize {
        self.width.channels()
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    /// Digest recorded when the encoder was frozen.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Recomputes the digest and compares it with the recorded one.
    pub fn verify(&self) -> bool {
        self.store.digest() == self.digest
    }

    /// Number of forward invocations since creation or the last reset.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    /// Rebuilds an encoder from stored parameters.
    pub fn from_store(task: usize, width: WidthClass, store: ParamStore<f32>) -> Result<Self> {
        if store.is_empty() {
            return Err(Error::Format("empty encoder parameter set".into()));
        }
        let mut probe = ParamStore::new();
        let in_ch = store.value(crate::tensor::ParamId(0)).shape().get(1).copied().unwrap_or(0);
        let convs = build_convs(&mut probe, width.channels(), in_ch, &mut Rng::new(0));
        for (id, e) in probe.iter() {
            let ok = store.find(&e.name) == Some(id) && store.value(id).shape() == e.value.shape();
            if !ok {
                return Err(Error::Format(format!("encoder parameter `{}` missing or misshaped", e.name)));
            }
        }
        let mut store = store;
        store.set_trainable_all(false);
        let digest = store.digest();
        Ok(Self {
            task,
            width,
            store,
            convs,
            digest,
            calls: AtomicUsize::new(0),
        })
    }

    /// `x: [b × C × H × W]` to `[b × c × H/8 × W/8]` on the tape.
    pub fn forward(&self, tape: &mut Tape<f32>, x: Var) -> Result<Var> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        conv_stack(tape, &self.store, &self.convs, x)
    }

    /// Forward pass outside any caller tape.
    pub fn embed(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv)?;
        Ok(tape.value(out).clone())
    }

    /// Per-sample cost for `[C × H × W]` inputs, in multiply-accumulate units.
    pub fn cost(&self, input_shape: &[usize]) -> u64 {
        let (mut h, mut w) = (input_shape[1], input_shape[2]);
        let mut total = 0;
        for (i, conv) in self.convs.iter().enumerate() {
            (h, w) = conv.out_hw(h, w);
            let out = conv.out_ch * h * w;
            total += conv_cost(out, conv.in_ch, conv.kernel);
            if i < 2 {
                total += out as u64;
            }
        }
        total
    }

    /// Spatial size of the output map for `[C × H × W]` inputs.
    pub fn output_hw(&self, input_shape: &[usize]) -> (usize, usize) {
        self.convs.iter().fold((input_shape[1], input_shape[2]), |(h, w), c| c.out_hw(h, w))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            lr: 2e-3,
            hidden: 64,
        }
    }
}

/// Trains `encoder` on its own task through a throwaway MLP head, then
/// freezes it. `steps = 0` freezes the random initialisation.
pub fn pretrain_prior(
    encoder: TrainableEncoder,
    task: &TaskSpec,
    data: &Dataset,
    train_idx: &[usize],
    cfg: &PretrainConfig,
    loss_cfg: &LossConfig,
    seed: u64,
) -> Result<FrozenEncoder> {
    if cfg.steps == 0 {
        return Ok(encoder.freeze());
    }
    if train_idx.is_empty() {
        return Err(Error::Contract("pre-training on an empty split".into()));
    }
    let mut encoder = encoder;
    let t = encoder.task;
    let mut head_store = ParamStore::new();
    let mut rng = Rng::with_stream(seed, PRETRAIN_HEAD_STREAM + t as u64);
    let head = Decoder::new(
        &mut head_store,
        "head",
        encoder.width.channels(),
        cfg.hidden,
        task.kind.output_dim(),
        &mut rng,
    );
    let mut enc_opt = Adam::new(&encoder.store);
    let mut head_opt = Adam::new(&head_store);
    let b = cfg.batch_size.min(train_idx.len());
    let labels = &data.labels[t];

    for step in 0..cfg.steps {
        let mut order = train_idx.to_vec();
        let per_epoch = (train_idx.len() / b).max(1);
        Rng::keyed(seed, PRETRAIN_BATCH_STREAM + t as u64, (step / per_epoch) as u64).shuffle(&mut order);
        let at = (step % per_epoch) * b;
        let batch = &order[at..at + b];

        let mut tape = Tape::new();
        let x = tape.constant(data.gather_inputs(batch));
        let e = encoder.forward(&mut tape, x)?;
        let (_, pred) = head.forward(&mut tape, &head_store, e)?;
        let loss = task_loss(&mut tape, pred, task.kind, labels, batch, loss_cfg)?;
        let value = tape.value(loss).item()? as f64;
        if !value.is_finite() {
            return Err(Error::Numeric {
                step,
                detail: format!("pre-training loss of `{}` encoder is {value}", task.name),
            });
        }
        let grads = tape.backward(loss)?;
        enc_opt.step(&mut encoder.store, &grads, cfg.lr)?;
        head_opt.step(&mut head_store, &grads, cfg.lr)?;
    }
    Ok(encoder.freeze())
}
