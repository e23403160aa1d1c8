//! Random instances for every differentiable op and module.

use et_fuser::fuser::{apply_drop_mask, enrich_embedding, sample_drop_mask, DropThreshold, EtFuser, FuserConfig, FuserMode, PriorTokenSet};
use et_fuser::nn::{Activation, AttentionScaling, Conv2dLayer, FfnBlock, Linear, MhsaLayer, PositionalTable};
use et_fuser::tasks::Decoder;
use et_fuser::tensor::{ParamStore, Real, Rng, Tape, Tensor, Var};
use et_fuser::Result;

use super::{gradcheck, normal, off_zero, CheckResult, Graph, Input};

#[derive(Clone, Debug)]
pub struct CaseSummary {
    pub name: &'static str,
    pub instances: usize,
    pub worst: CheckResult,
}

fn ints<S: Real>(tape: &Tape<S>, v: Var) -> Vec<usize> {
    tape.value(v).data().iter().map(|x| x.as_f64() as usize).collect()
}

fn fixed_ints(values: &[usize]) -> Input {
    let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    Input::fixed(Tensor::from_f64([v.len()], &v).unwrap())
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn run<G: Graph>(
    name: &'static str,
    g: &G,
    instances: usize,
    seed: u64,
    mut make: impl FnMut(&mut Rng, usize) -> (ParamStore<f64>, Vec<Input>),
) -> Result<CaseSummary> {
    let mut rng = Rng::with_stream(seed, 0x6772);
    let mut worst = CheckResult::default();
    for i in 0..instances {
        let (store, inputs) = make(&mut rng, i);
        let r = gradcheck(g, &store, &inputs, seed.wrapping_mul(1000) + i as u64)?;
        worst.f64_err = worst.f64_err.max(r.f64_err);
        worst.f32_err = worst.f32_err.max(r.f32_err);
        worst.entries += r.entries;
    }
    Ok(CaseSummary { name, instances, worst })
}

fn no_params() -> ParamStore<f64> {
    ParamStore::new()
}

struct WithModule<M, F> {
    module: M,
    f: F,
}

/// Module graphs carry their layer (parameter ids) as data.
trait ModuleFn<M> {
    fn call<S: Real>(&self, m: &M, t: &mut Tape<S>, st: &ParamStore<S>, x: &[Var]) -> Result<Var>;
}

impl<M, F: ModuleFn<M>> Graph for WithModule<M, F> {
    fn build<S: Real>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: &[Var]) -> Result<Var> {
        self.f.call(&self.module, tape, store, x)
    }
}

/// Module graphs are rebuilt per instance, so they go through this
/// instead of [`run`].
fn run_modules<M, F: ModuleFn<M> + Copy>(
    name: &'static str,
    f: F,
    instances: usize,
    seed: u64,
    mut make: impl FnMut(&mut Rng, usize) -> (M, ParamStore<f64>, Vec<Input>),
) -> Result<CaseSummary> {
    let mut rng = Rng::with_stream(seed, 0x6d6f);
    let mut worst = CheckResult::default();
    for i in 0..instances {
        let (module, store, inputs) = make(&mut rng, i);
        let g = WithModule { module, f };
        let r = gradcheck(&g, &store, &inputs, seed.wrapping_mul(1000) + i as u64)?;
        worst.f64_err = worst.f64_err.max(r.f64_err);
        worst.f32_err = worst.f32_err.max(r.f32_err);
        worst.entries += r.entries;
    }
    Ok(CaseSummary { name, instances, worst })
}

macro_rules! module_fn {
    ($name:ident, $m:ty, |$me:ident, $t:ident, $st:ident, $x:ident| $body:expr) => {
        #[derive(Clone, Copy)]
        struct $name;
        impl ModuleFn<$m> for $name {
            fn call<S: Real>(&self, $me: &$m, $t: &mut Tape<S>, $st: &ParamStore<S>, $x: &[Var]) -> Result<Var> {
                $body
            }
        }
    };
}

module_fn!(LinearFn, Linear, |m, t, st, x| m.forward(t, st, x[0]));
module_fn!(ConvFn, Conv2dLayer, |m, t, st, x| m.forward(t, st, x[0]));
module_fn!(MhsaFn, MhsaLayer, |m, t, st, x| m.forward(t, st, x[0]));
module_fn!(FfnFn, FfnBlock, |m, t, st, x| m.forward(t, st, x[0]));
module_fn!(PosFn, PositionalTable, |m, t, st, x| {
    let idx = ints(t, x[1]);
    m.forward(t, st, x[0], &idx)
});
module_fn!(DecoderFn, Decoder, |m, t, st, x| Ok(m.forward(t, st, x[0])?.1));

/// Fuser plus enrichment plus decoder: the full canonical branch.
#[derive(Clone, Debug)]
pub struct Branch {
    pub fuser: EtFuser,
    pub decoder: Decoder,
    pub task_indices: Vec<usize>,
    pub mode: FuserMode,
}

module_fn!(BranchFn, Branch, |m, t, st, x| {
    let set = PriorTokenSet {
        tokens: t.value(x[0]).clone(),
        task_indices: m.task_indices.clone(),
        canonical_index: m.fuser.cfg.canonical_index,
        pad_widths: vec![0; m.task_indices.len()],
    };
    let fused = m.fuser.fuse(t, st, &set, m.mode)?;
    let e = enrich_embedding(t, x[1], fused)?;
    Ok(m.decoder.forward(t, st, e)?.1)
});

module_fn!(FuserOnlyFn, Branch, |m, t, st, x| {
    let set = PriorTokenSet {
        tokens: t.value(x[0]).clone(),
        task_indices: m.task_indices.clone(),
        canonical_index: m.fuser.cfg.canonical_index,
        pad_widths: vec![0; m.task_indices.len()],
    };
    let fused = m.fuser.fuse(t, st, &set, m.mode)?;
    t.concat(&[fused.ensemble, fused.canonical], 1)
});

/// Random fuser instance: N tasks, random canonical and a sampled drop
/// mask (train) or the canonical token alone (infer).
pub fn random_branch(rng: &mut Rng, mode: FuserMode, activation: Activation) -> (Branch, ParamStore<f64>, Vec<Input>) {
    let n = dim(rng, 2, 4);
    let c = rng.below(n);
    let heads = [1, 2][rng.below(2)];
    let d = heads * dim(rng, 2, 3);
    let b = dim(rng, 1, 2);
    let cfg = FuserConfig {
        token_dim: d,
        n_tasks: n,
        canonical_index: c,
        heads,
        ffn_ratio: 2,
        activation,
        mode,
        theta: DropThreshold::new(0.5).unwrap(),
        ..FuserConfig::default()
    };
    let mut store = ParamStore::new();
    let fuser = EtFuser::new(&mut store, cfg.clone(), rng).unwrap();
    // Perturb the norm gain away from its constant init.
    let gain = Tensor::from_fn([d], |_| 1.0 + 0.3 * rng.normal());
    store.set_value(fuser.ffn.norm_gain, gain).unwrap();
    let decoder = Decoder::new(&mut store, "dec", d, 4, 3, rng);
    let all: Vec<(usize, Tensor<f64>)> = (0..n).map(|t| (t, normal(&[b, d], rng))).collect();
    let pooled: Vec<(usize, &Tensor<f64>)> = all.iter().map(|(t, x)| (*t, x)).collect();
    let set = PriorTokenSet::from_pooled(&pooled, c, d).unwrap();
    let mask = match mode {
        FuserMode::Train => sample_drop_mask(rng, n, c, cfg.theta),
        FuserMode::Infer => et_fuser::fuser::DropMask::canonical_only(n, c),
    };
    let masked = apply_drop_mask(&set, &mask).unwrap();
    let e_c = normal(&[b, d, 2, 2], rng);
    let branch = Branch {
        fuser,
        decoder,
        task_indices: masked.task_indices.clone(),
        mode,
    };
    (branch, store, vec![Input::fixed(masked.tokens), Input::var(e_c)])
}

/// Every differentiable op and module, `instances` random cases each.
pub fn gradient_suite(instances: usize) -> Result<Vec<CaseSummary>> {
    let n = instances;
    let mut out = Vec::new();

    out.push(run("matmul", &graph!(|t, st, x| t.matmul(x[0], x[1])), n, 1, |r, _| {
        let (m, k, p) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
        (no_params(), vec![Input::var(normal(&[m, k], r)), Input::var(normal(&[k, p], r))])
    })?);
    out.push(run("bmm", &graph!(|t, st, x| t.bmm(x[0], x[1])), n, 2, |r, _| {
        let (b, m, k, p) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3));
        (
            no_params(),
            vec![Input::var(normal(&[b, m, k], r)), Input::var(normal(&[b, k, p], r))],
        )
    })?);
    out.push(run("transpose", &graph!(|t, st, x| t.transpose(x[0])), n, 3, |r, _| {
        (no_params(), vec![Input::var(normal(&[dim(r, 1, 4), dim(r, 1, 4)], r))])
    })?);
    out.push(run(
        "permute",
        &graph!(|t, st, x| {
            let axes = ints(t, x[1]);
            t.permute(x[0], &axes)
        }),
        n,
        4,
        |r, i| {
            const AXES: [[usize; 3]; 5] = [[0, 2, 1], [1, 0, 2], [2, 0, 1], [1, 2, 0], [2, 1, 0]];
            let shape = [dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)];
            (no_params(), vec![Input::var(normal(&shape, r)), fixed_ints(&AXES[i % 5])])
        },
    )?);
    out.push(run(
        "reshape",
        &graph!(|t, st, x| {
            let s = t.shape(x[0]).to_vec();
            t.reshape(x[0], &[s[0] * s[1], s[2]])
        }),
        n,
        5,
        |r, _| {
            (
                no_params(),
                vec![Input::var(normal(&[dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)], r))],
            )
        },
    )?);
    for (name, seed) in [("add", 6), ("sub", 7), ("mul", 8)] {
        let make = |r: &mut Rng, _: usize| {
            let s = [dim(r, 1, 4), dim(r, 1, 4)];
            (no_params(), vec![Input::var(normal(&s, r)), Input::var(normal(&s, r))])
        };
        out.push(match name {
            "add" => run(name, &graph!(|t, st, x| t.add(x[0], x[1])), n, seed, make)?,
            "sub" => run(name, &graph!(|t, st, x| t.sub(x[0], x[1])), n, seed, make)?,
            _ => run(name, &graph!(|t, st, x| t.mul(x[0], x[1])), n, seed, make)?,
        });
    }
    out.push(run("scale", &graph!(|t, st, x| Ok(t.scale(x[0], S::lit(-1.7)))), n, 9, |r, _| {
        (no_params(), vec![Input::var(normal(&[dim(r, 1, 4), dim(r, 1, 4)], r))])
    })?);
    out.push(run("add_bias", &graph!(|t, st, x| t.add_bias(x[0], x[1])), n, 10, |r, _| {
        let (b, s, d) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3));
        (no_params(), vec![Input::var(normal(&[b, s, d], r)), Input::var(normal(&[s, d], r))])
    })?);
    out.push(run("add_prefix", &graph!(|t, st, x| t.add_prefix(x[0], x[1])), n, 11, |r, _| {
        let (b, c, h) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3));
        (
            no_params(),
            vec![Input::var(normal(&[b, c, h, h], r)), Input::var(normal(&[b, c], r))],
        )
    })?);
    out.push(run(
        "repeat_leading",
        &graph!(|t, st, x| Ok(t.repeat_leading(x[0], 3))),
        n,
        12,
        |r, _| (no_params(), vec![Input::var(normal(&[dim(r, 1, 3), dim(r, 1, 3)], r))]),
    )?);
    out.push(run(
        "concat",
        &graph!(|t, st, x| {
            let axis = ints(t, x[2])[0];
            t.concat(&[x[0], x[1]], axis)
        }),
        n,
        13,
        |r, i| {
            let axis = i % 2;
            let (a, b, c) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3));
            let (s0, s1) = if axis == 0 { ([a, c], [b, c]) } else { ([c, a], [c, b]) };
            (
                no_params(),
                vec![Input::var(normal(&s0, r)), Input::var(normal(&s1, r)), fixed_ints(&[axis])],
            )
        },
    )?);
    out.push(run(
        "select",
        &graph!(|t, st, x| {
            let idx = ints(t, x[1]);
            t.select(x[0], 1, &idx)
        }),
        n,
        14,
        |r, _| {
            let (a, b) = (dim(r, 1, 3), dim(r, 2, 4));
            let idx: Vec<usize> = (0..dim(r, 1, 4)).map(|_| r.below(b)).collect();
            (no_params(), vec![Input::var(normal(&[a, b, 2], r)), fixed_ints(&idx)])
        },
    )?);
    out.push(run("softmax", &graph!(|t, st, x| t.softmax(x[0])), n, 15, |r, _| {
        (no_params(), vec![Input::var(normal(&[dim(r, 1, 3), dim(r, 2, 5)], r))])
    })?);
    out.push(run(
        "layer_norm",
        &graph!(|t, st, x| t.layer_norm(x[0], x[1], x[2], S::lit(1e-5))),
        n,
        16,
        |r, _| {
            let d = dim(r, 2, 6);
            (
                no_params(),
                vec![
                    Input::var(normal(&[dim(r, 1, 3), d], r)),
                    Input::var(normal(&[d], r)),
                    Input::var(normal(&[d], r)),
                ],
            )
        },
    )?);
    out.push(run("gelu", &graph!(|t, st, x| Ok(t.gelu(x[0]))), n, 17, |r, _| {
        (no_params(), vec![Input::var(normal(&[dim(r, 1, 4), dim(r, 1, 4)], r))])
    })?);
    out.push(run("relu", &graph!(|t, st, x| Ok(t.relu(x[0]))), n, 18, |r, _| {
        (no_params(), vec![Input::var(off_zero(&[dim(r, 1, 4), dim(r, 1, 4)], r))])
    })?);
    out.push(run("gap", &graph!(|t, st, x| t.gap(x[0])), n, 19, |r, _| {
        (
            no_params(),
            vec![Input::var(normal(&[dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)], r))],
        )
    })?);
    out.push(run(
        "conv2d",
        &graph!(|t, st, x| {
            let sp = ints(t, x[3]);
            t.conv2d(x[0], x[1], x[2], sp[0], sp[1])
        }),
        n,
        20,
        |r, i| {
            let (b, ci, co, k) = (dim(r, 1, 2), dim(r, 1, 2), dim(r, 1, 3), [1, 3][i % 2]);
            let hw = dim(r, 3, 5);
            let (stride, pad) = (1 + i % 2, (i / 2) % 2);
            (
                no_params(),
                vec![
                    Input::var(normal(&[b, ci, hw, hw], r)),
                    Input::var(normal(&[co, ci, k, k], r)),
                    Input::var(normal(&[co], r)),
                    fixed_ints(&[stride, pad]),
                ],
            )
        },
    )?);
    out.push(run("sum", &graph!(|t, st, x| Ok(t.sum(x[0]))), n, 21, |r, _| {
        (no_params(), vec![Input::var(normal(&[dim(r, 1, 4), dim(r, 1, 4)], r))])
    })?);
    out.push(run("mean", &graph!(|t, st, x| Ok(t.mean(x[0]))), n, 22, |r, _| {
        (no_params(), vec![Input::var(normal(&[dim(r, 1, 4), dim(r, 1, 4)], r))])
    })?);
    out.push(run(
        "wing_loss",
        &graph!(|t, st, x| {
            let target = t.value(x[1]).clone();
            t.wing_loss(x[0], &target, S::lit(10.0), S::lit(2.0), S::lit(1.5))
        }),
        n,
        23,
        |r, _| {
            let shape = [dim(r, 1, 3), dim(r, 1, 4)];
            let target = normal(&shape, r).map(|v| 5.0 * v);
            // Scaled residuals in (0.5, 9) or (11, 25): clear of the branch point.
            let pred = Tensor::from_fn(shape.to_vec(), |j| {
                let mag = if r.below(2) == 0 {
                    r.uniform_range(0.5, 9.0)
                } else {
                    r.uniform_range(11.0, 25.0)
                };
                let sign = if r.below(2) == 0 { -1.0 } else { 1.0 };
                target.data()[j] + sign * mag / 1.5
            });
            (no_params(), vec![Input::var(pred), Input::fixed(target)])
        },
    )?);
    out.push(run(
        "cross_entropy",
        &graph!(|t, st, x| {
            let labels = ints(t, x[1]);
            t.cross_entropy(x[0], &labels)
        }),
        n,
        24,
        |r, _| {
            let (b, k) = (dim(r, 1, 4), dim(r, 2, 5));
            let labels: Vec<usize> = (0..b).map(|_| r.below(k)).collect();
            (no_params(), vec![Input::var(normal(&[b, k], r)), fixed_ints(&labels)])
        },
    )?);

    out.push(run_modules("linear", LinearFn, n, 30, |r, _| {
        let mut store = ParamStore::new();
        let (i, o) = (dim(r, 1, 4), dim(r, 1, 4));
        let lin = Linear::new(&mut store, "lin", i, o, true, r);
        (lin, store, vec![Input::var(normal(&[dim(r, 1, 2), dim(r, 1, 3), i], r))])
    })?);
    out.push(run_modules("conv_layer", ConvFn, n, 31, |r, i| {
        let mut store = ParamStore::new();
        let (ci, co) = (dim(r, 1, 2), dim(r, 1, 3));
        let conv = Conv2dLayer::new(&mut store, "conv", ci, co, 3, 1 + i % 2, 1, r);
        (conv, store, vec![Input::var(normal(&[1, ci, 4, 4], r))])
    })?);
    for (name, scaling, seed) in [
        ("mhsa_per_head", AttentionScaling::PerHead, 32),
        ("mhsa_full_dim", AttentionScaling::FullDim, 33),
    ] {
        out.push(run_modules(name, MhsaFn, n, seed, |r, i| {
            let mut store = ParamStore::new();
            let heads = [1, 2][i % 2];
            let d = heads * dim(r, 1, 3);
            let layer = MhsaLayer::new(&mut store, "attn", d, heads, scaling, r).unwrap();
            let shape = if i % 3 == 0 {
                vec![dim(r, 1, 4), d]
            } else {
                vec![dim(r, 1, 2), dim(r, 1, 4), d]
            };
            (layer, store, vec![Input::var(normal(&shape, r))])
        })?);
    }
    for (name, act, seed) in [("ffn_gelu", Activation::Gelu, 34), ("ffn_relu", Activation::Relu, 35)] {
        out.push(run_modules(name, FfnFn, n, seed, |r, _| {
            let mut store = ParamStore::new();
            let d = dim(r, 2, 4);
            let ffn = FfnBlock::new(&mut store, "ffn", d, 2, act, r).unwrap();
            let gain = Tensor::from_fn([d], |_| 1.0 + 0.3 * r.normal());
            store.set_value(ffn.norm_gain, gain).unwrap();
            (ffn, store, vec![Input::var(normal(&[dim(r, 1, 2), dim(r, 1, 3), d], r))])
        })?);
    }
    out.push(run_modules("positional", PosFn, n, 36, |r, _| {
        let mut store = ParamStore::new();
        let (tasks, d) = (dim(r, 1, 4), dim(r, 1, 4));
        let table = PositionalTable::new(&mut store, "pos", tasks, d, r);
        let s = dim(r, 1, tasks + 1);
        let idx: Vec<usize> = (0..s).map(|_| r.below(tasks + 1)).collect();
        (table, store, vec![Input::var(normal(&[dim(r, 1, 2), s, d], r)), fixed_ints(&idx)])
    })?);
    out.push(run_modules("decoder", DecoderFn, n, 37, |r, _| {
        let mut store = ParamStore::new();
        let c = dim(r, 1, 4);
        let dec = Decoder::new(&mut store, "dec", c, 5, dim(r, 1, 3), r);
        (dec, store, vec![Input::var(normal(&[dim(r, 1, 2), c, 2, 2], r))])
    })?);
    out.push(run_modules("fuser_train", FuserOnlyFn, n, 38, |r, _| {
        random_branch(r, FuserMode::Train, Activation::Gelu)
    })?);
    out.push(run_modules("fuser_infer", FuserOnlyFn, n, 39, |r, _| {
        random_branch(r, FuserMode::Infer, Activation::Gelu)
    })?);
    out.push(run_modules("canonical_branch_train", BranchFn, n, 40, |r, _| {
        random_branch(r, FuserMode::Train, Activation::Gelu)
    })?);
    out.push(run_modules("canonical_branch_relu", BranchFn, n, 41, |r, _| {
        random_branch(r, FuserMode::Train, Activation::Relu)
    })?);
    Ok(out)
}
