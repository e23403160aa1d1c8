//! Shared helpers for the integration tests: a finite-difference gradient
//! checker and small random-instance builders.
#![allow(dead_code)]

use et_fuser::tensor::{ParamStore, Real, Rng, Tape, Tensor, Var};
use et_fuser::Result;

/// Central-difference step for the 64-bit reference.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

/// A computation generic over precision, so the same graph runs in f64
/// (reference) and f32 (production).
pub trait Graph {
    fn build<S: Real>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: &[Var]) -> Result<Var>;
}

/// Builds a unit [`Graph`] from a closure-like body. Fields, if any, are
/// plain data captured by value.
#[macro_export]
macro_rules! graph {
    ($(#[$m:meta])* |$t:ident, $st:ident, $x:ident| $body:expr) => {{
        struct G;
        impl $crate::common::Graph for G {
            #[allow(unused_variables)]
            fn build<S: et_fuser::tensor::Real>(
                &self,
                $t: &mut et_fuser::tensor::Tape<S>,
                $st: &et_fuser::tensor::ParamStore<S>,
                $x: &[et_fuser::tensor::Var],
            ) -> et_fuser::Result<et_fuser::tensor::Var> {
                $body
            }
        }
        G
    }};
}

#[derive(Clone, Debug)]
pub struct Input {
    pub value: Tensor<f64>,
    pub grad: bool,
}

impl Input {
    pub fn var(value: Tensor<f64>) -> Self {
        Self { value, grad: true }
    }

    pub fn fixed(value: Tensor<f64>) -> Self {
        Self { value, grad: false }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CheckResult {
    /// Max relative error of the f64 analytic gradient.
    pub f64_err: f64,
    /// Max relative error of the f32 analytic gradient against the f64
    /// finite differences.
    pub f32_err: f64,
    pub entries: usize,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub fn normal(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal())
}

/// Values bounded away from zero, for ops with a kink there.
pub fn off_zero(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = rng.normal();
        v.signum() * (v.abs() + 0.05)
    })
}

fn forward<S: Real, G: Graph>(g: &G, store: &ParamStore<S>, inputs: &[(Tensor<S>, bool)]) -> Result<(Tape<S>, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(t, grad)| tape.leaf(t.clone(), *grad)).collect();
    let out = g.build(&mut tape, store, &vars)?;
    Ok((tape, vars, out))
}

/// `<out, proj>` in f64.
fn projected<G: Graph>(g: &G, store: &ParamStore<f64>, inputs: &[(Tensor<f64>, bool)], proj: &Tensor<f64>) -> Result<f64> {
    let (tape, _, out) = forward(g, store, inputs)?;
    Ok(tape.value(out).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
}

/// Analytic gradients of `<out, proj>` in precision `S`, flattened in the
/// order: inputs with `grad`, then trainable parameters.
fn analytic<S: Real, G: Graph>(g: &G, store: &ParamStore<S>, inputs: &[(Tensor<S>, bool)], proj: &Tensor<f64>) -> Result<Vec<f64>> {
    let (mut tape, vars, out) = forward(g, store, inputs)?;
    let p = tape.constant(proj.cast());
    let m = tape.mul(out, p)?;
    let loss = tape.sum(m);
    let grads = tape.backward(loss)?;
    let mut flat = Vec::new();
    for ((t, grad), v) in inputs.iter().zip(&vars) {
        if *grad {
            match grads.wrt(*v) {
                Some(gr) => flat.extend(gr.to_f64_vec()),
                None => flat.extend(std::iter::repeat_n(0.0, t.numel())),
            }
        }
    }
    for (id, e) in store.iter() {
        if e.trainable {
            match grads.param(store, id) {
                Some(gr) => flat.extend(gr.to_f64_vec()),
                None => flat.extend(std::iter::repeat_n(0.0, e.value.numel())),
            }
        }
    }
    Ok(flat)
}

/// Compares analytic gradients (f64 and f32) with central differences of
/// the 64-bit forward pass. The output is contracted with a random
/// projection so every output element contributes.
pub fn gradcheck<G: Graph>(g: &G, store: &ParamStore<f64>, inputs: &[Input], seed: u64) -> Result<CheckResult> {
    let ins: Vec<(Tensor<f64>, bool)> = inputs.iter().map(|i| (i.value.clone(), i.grad)).collect();
    let (tape, _, out) = forward(g, store, &ins)?;
    let mut rng = Rng::with_stream(seed, 0x9c);
    let proj = normal(tape.value(out).shape(), &mut rng);

    let a64 = analytic(g, store, &ins, &proj)?;
    let store32 = store.cast::<f32>();
    let ins32: Vec<(Tensor<f32>, bool)> = ins.iter().map(|(t, g)| (t.cast(), *g)).collect();
    let a32 = analytic(g, &store32, &ins32, &proj)?;

    let mut numeric = Vec::with_capacity(a64.len());
    let mut work = ins.clone();
    for i in 0..work.len() {
        if !work[i].1 {
            continue;
        }
        for j in 0..work[i].0.numel() {
            let orig = work[i].0.data()[j];
            work[i].0.data_mut()[j] = orig + FD_STEP;
            let up = projected(g, store, &work, &proj)?;
            work[i].0.data_mut()[j] = orig - FD_STEP;
            let down = projected(g, store, &work, &proj)?;
            work[i].0.data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    let mut pstore = store.clone();
    let ids: Vec<_> = pstore.ids().filter(|&id| pstore.is_trainable(id)).collect();
    for id in ids {
        for j in 0..pstore.value(id).numel() {
            let orig = pstore.value(id).data()[j];
            pstore.value_mut(id).data_mut()[j] = orig + FD_STEP;
            let up = projected(g, &pstore, &ins, &proj)?;
            pstore.value_mut(id).data_mut()[j] = orig - FD_STEP;
            let down = projected(g, &pstore, &ins, &proj)?;
            pstore.value_mut(id).data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    assert_eq!(numeric.len(), a64.len());
    let max_err = |a: &[f64]| a.iter().zip(&numeric).map(|(&x, &n)| rel_err(x, n)).fold(0.0, f64::max);
    Ok(CheckResult {
        f64_err: max_err(&a64),
        f32_err: max_err(&a32),
        entries: numeric.len(),
    })
}
pub mod metric_suite;
pub mod suite;

use et_fuser::tasks::{LossConfig, PretrainConfig, SyntheticDatasetSpec, TrainConfig};

/// A few hundred samples: enough to exercise every path in seconds.
pub fn small_spec(seed: u64) -> SyntheticDatasetSpec {
    SyntheticDatasetSpec {
        seed,
        samples: 300,
        ..SyntheticDatasetSpec::default()
    }
}

pub fn small_pretrain() -> PretrainConfig {
    PretrainConfig {
        steps: 30,
        ..PretrainConfig::default()
    }
}

pub fn small_train(total_steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        total_steps,
        warmup_steps: total_steps / 10,
        seed,
        ..TrainConfig::default()
    }
}

pub fn loss_cfg() -> LossConfig {
    LossConfig::default()
}
