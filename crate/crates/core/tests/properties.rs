use et_fuser::fuser::{
    apply_drop_mask, build_prior_tokens, enrich_embedding, sample_drop_mask, DropMask, DropThreshold, EtFuser, FuserConfig, FuserMode,
    PriorTokenSet,
};
use et_fuser::metrics::{accuracy, cs_at, f1_macro, intra_class_variance, nme, tar_at_far};
use et_fuser::nn::{AttentionScaling, MhsaLayer, PositionalTable};
use et_fuser::tensor::{ops, ParamStore, Rng, Tape, Tensor};
use proptest::prelude::*;

fn fuser_cfg(n: usize, c: usize, heads: usize, d: usize) -> FuserConfig {
    FuserConfig {
        token_dim: d,
        n_tasks: n,
        canonical_index: c,
        heads,
        ..FuserConfig::default()
    }
}

fn pooled_set(rng: &mut Rng, n: usize, b: usize, d: usize) -> Vec<(usize, Tensor<f64>)> {
    (0..n).map(|t| (t, Tensor::from_fn([b, d], |_| rng.normal()))).collect()
}

fn refs(p: &[(usize, Tensor<f64>)]) -> Vec<(usize, &Tensor<f64>)> {
    p.iter().map(|(t, x)| (*t, x)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn canonical_token_always_survives(seed in any::<u64>(), n in 1usize..12, c_frac in 0.0f64..1.0, theta in 0.0f64..=1.0) {
        let c = ((n as f64 * c_frac) as usize).min(n - 1);
        let mut rng = Rng::new(seed);
        for _ in 0..20 {
            let m = sample_drop_mask(&mut rng, n, c, DropThreshold::new(theta).unwrap());
            prop_assert!(m.bits[c]);
        }
    }

    /// The positional row a token receives depends on its task index only,
    /// so dropping other tokens leaves it unchanged.
    #[test]
    fn positional_rows_follow_task_index(seed in any::<u64>(), n in 2usize..6, drop in 0usize..6) {
        let drop = drop % n;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::<f64>::new();
        let table = PositionalTable::new(&mut store, "pos", n, 3, &mut rng);
        let run = |indices: &[usize]| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::zeros([1, indices.len(), 3]));
            let y = table.forward(&mut tape, &store, x, indices).unwrap();
            tape.value(y).clone()
        };
        let all: Vec<usize> = (0..=n).collect();
        let kept: Vec<usize> = all.iter().copied().filter(|&t| t != drop).collect();
        let (full, part) = (run(&all), run(&kept));
        for (row, &t) in kept.iter().enumerate() {
            prop_assert_eq!(part.row(0)[row * 3..row * 3 + 3].to_vec(), full.row(0)[t * 3..t * 3 + 3].to_vec());
        }
    }

    #[test]
    fn attention_is_permutation_equivariant(seed in any::<u64>(), s in 1usize..6, heads in 1usize..3) {
        let mut rng = Rng::new(seed);
        let d = heads * 2;
        let mut store = ParamStore::<f64>::new();
        let layer = MhsaLayer::new(&mut store, "attn", d, heads, AttentionScaling::PerHead, &mut rng).unwrap();
        let x = Tensor::<f64>::from_fn([s, d], |_| rng.normal());
        let mut perm: Vec<usize> = (0..s).collect();
        rng.shuffle(&mut perm);
        let px = ops::index_select(&x, 0, &perm).unwrap();
        let fwd = |t: Tensor<f64>| {
            let mut tape = Tape::new();
            let v = tape.constant(t);
            let y = layer.forward(&mut tape, &store, v).unwrap();
            tape.value(y).clone()
        };
        let (y, py) = (fwd(x), fwd(px));
        let expect = ops::index_select(&y, 0, &perm).unwrap();
        for (a, b) in py.data().iter().zip(expect.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    /// Token order is fixed by task index, so the order encoders are listed
    /// in cannot change the fused output.
    #[test]
    fn fuser_ignores_listing_order(seed in any::<u64>(), n in 2usize..5) {
        let mut rng = Rng::new(seed);
        let c = rng.below(n);
        let mut store = ParamStore::<f64>::new();
        let f = EtFuser::new(&mut store, fuser_cfg(n, c, 2, 4), &mut rng).unwrap();
        let pooled = pooled_set(&mut rng, n, 2, 4);
        let mut shuffled = refs(&pooled);
        rng.shuffle(&mut shuffled);
        let out = |list: &[(usize, &Tensor<f64>)]| {
            let set = PriorTokenSet::from_pooled(list, c, 4).unwrap();
            let mut tape = Tape::new();
            let fused = f.fuse(&mut tape, &store, &set, FuserMode::Train).unwrap();
            (tape.value(fused.ensemble).clone(), tape.value(fused.canonical).clone())
        };
        prop_assert_eq!(out(&refs(&pooled)), out(&shuffled));
    }

    /// Zero padding is the same as handing the fuser full-width tokens whose
    /// extra channels are zero.
    #[test]
    fn padding_is_neutral(seed in any::<u64>(), widths in proptest::collection::vec(1usize..=6, 3)) {
        let mut rng = Rng::new(seed);
        let d = 6;
        let maps: Vec<(usize, Tensor<f64>)> =
            widths.iter().enumerate().map(|(t, &w)| (t, Tensor::from_fn([2, w, 2, 2], |_| rng.normal()))).collect();
        let map_refs: Vec<(usize, &Tensor<f64>)> = maps.iter().map(|(t, x)| (*t, x)).collect();
        let set = build_prior_tokens(&map_refs, 0, d).unwrap();
        let wide: Vec<(usize, Tensor<f64>)> = maps
            .iter()
            .map(|(t, x)| {
                let g = ops::gap(x).unwrap();
                let w = g.shape()[1];
                (*t, Tensor::from_fn([2, d], |i| if i % d < w { g.data()[i / d * w + i % d] } else { 0.0 }))
            })
            .collect();
        let explicit = PriorTokenSet::from_pooled(&refs(&wide), 0, d).unwrap();
        prop_assert_eq!(&set.tokens, &explicit.tokens);
        for (row, &w) in widths.iter().enumerate() {
            prop_assert!(set.tokens.row(0)[row * d + w..(row + 1) * d].iter().all(|&v| v == 0.0));
        }
    }

    /// Under a canonical-only mask the training path computes exactly what
    /// the inference path computes.
    #[test]
    fn train_equals_infer_under_canonical_mask(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = Rng::new(seed);
        let c = rng.below(n);
        let mut store = ParamStore::<f32>::new();
        let f = EtFuser::new(&mut store, fuser_cfg(n, c, 2, 4), &mut rng).unwrap();
        let pooled: Vec<(usize, Tensor<f32>)> = (0..n).map(|t| (t, Tensor::from_fn([3, 4], |_| rng.normal() as f32))).collect();
        let list: Vec<(usize, &Tensor<f32>)> = pooled.iter().map(|(t, x)| (*t, x)).collect();
        let set = PriorTokenSet::from_pooled(&list, c, 4).unwrap();
        let masked = apply_drop_mask(&set, &DropMask::canonical_only(n, c)).unwrap();
        let e = Tensor::<f32>::from_fn([3, 4, 2, 2], |_| rng.normal() as f32);
        let run = |mode| {
            let mut tape = Tape::new();
            let ev = tape.constant(e.clone());
            let fused = f.fuse(&mut tape, &store, &masked, mode).unwrap();
            let y = enrich_embedding(&mut tape, ev, fused).unwrap();
            tape.value(y).clone()
        };
        prop_assert_eq!(run(FuserMode::Train), run(FuserMode::Infer));
    }

    #[test]
    fn nme_is_similarity_invariant(seed in any::<u64>(), k in 2usize..10, scale in 0.1f64..10.0, dx in -50.0f64..50.0) {
        let mut rng = Rng::new(seed);
        let pts = |rng: &mut Rng| -> Vec<[f64; 2]> { (0..k).map(|_| [rng.normal() * 10.0, rng.normal() * 10.0]).collect() };
        let (pred, gt) = (pts(&mut rng), pts(&mut rng));
        let (le, re) = ([-3.0, 1.0], [4.0, 0.5]);
        let base = nme(&pred, &gt, le, re).unwrap();
        let tf = |p: [f64; 2]| [p[0] * scale + dx, p[1] * scale - dx];
        let moved = nme(
            &pred.iter().map(|&p| tf(p)).collect::<Vec<_>>(),
            &gt.iter().map(|&p| tf(p)).collect::<Vec<_>>(),
            tf(le),
            tf(re),
        )
        .unwrap();
        prop_assert!((base - moved).abs() <= 1e-9 * base.max(1.0));
    }

    #[test]
    fn cs_is_monotone_in_tolerance(errors in proptest::collection::vec(0.0f64..20.0, 1..50), a in 0.0f64..20.0, b in 0.0f64..20.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(cs_at(&errors, lo).unwrap() <= cs_at(&errors, hi).unwrap());
    }

    #[test]
    fn classification_metrics_ignore_class_names(seed in any::<u64>(), n in 1usize..60, k in 2usize..6) {
        let mut rng = Rng::new(seed);
        let gt: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let mut names: Vec<usize> = (0..k).collect();
        rng.shuffle(&mut names);
        let rename = |v: &[usize]| v.iter().map(|&c| names[c]).collect::<Vec<_>>();
        prop_assert_eq!(accuracy(&pred, &gt).unwrap(), accuracy(&rename(&pred), &rename(&gt)).unwrap());
        let (f, g) = (f1_macro(&pred, &gt, k).unwrap(), f1_macro(&rename(&pred), &rename(&gt), k).unwrap());
        prop_assert!((f - g).abs() < 1e-12);
    }

    #[test]
    fn intra_class_variance_ignores_vector_length(seed in any::<u64>(), n in 2usize..30, s in 0.01f64..100.0) {
        let mut rng = Rng::new(seed);
        let vecs: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let classes: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
        let scaled: Vec<Vec<f64>> = vecs.iter().map(|v| v.iter().map(|x| x * s).collect()).collect();
        let pack = |vs: &[Vec<f64>]| -> f64 {
            let items: Vec<(&[f64], usize)> = vs.iter().zip(&classes).map(|(v, &c)| (v.as_slice(), c)).collect();
            intra_class_variance(&items).unwrap()
        };
        prop_assert!((pack(&vecs) - pack(&scaled)).abs() < 1e-9);
    }

    #[test]
    fn tar_is_invariant_to_monotone_rescoring(seed in any::<u64>(), ng in 1usize..50, ni in 1usize..200) {
        let mut rng = Rng::new(seed);
        let g: Vec<f64> = (0..ng).map(|_| rng.normal() + 1.0).collect();
        let i: Vec<f64> = (0..ni).map(|_| rng.normal()).collect();
        let f = |v: &[f64]| v.iter().map(|x| (2.0 * x).exp() + 3.0).collect::<Vec<_>>();
        let a = tar_at_far(&g, &i, 0.05).unwrap();
        let b = tar_at_far(&f(&g), &f(&i), 0.05).unwrap();
        prop_assert_eq!(a.tar, b.tar);
        prop_assert!((0.0..=1.0).contains(&a.tar));
    }
}
