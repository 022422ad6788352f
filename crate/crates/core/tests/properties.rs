use std::collections::{BTreeMap, HashSet};

use fairtensor::augment::{
    assemble, averaged_row, build_graph, fair_similarity, generate_entries, AugmentConfig, EntrySource, TargetRule,
};
use fairtensor::metrics::{evaluate, evaluate_predictions};
use fairtensor::model::CostcoShape;
use fairtensor::tensor::{downsample_minority, group_counts, minority_group, parse_tensor, split, ceil_count};
use fairtensor::{init_model, ModelKind, SensitiveContext, SparseTensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random tensor with distinct indices.
fn arb_tensor(max_order: usize, max_dim: usize, max_nnz: usize) -> impl Strategy<Value = SparseTensor> {
    (1..=max_order)
        .prop_flat_map(move |order| proptest::collection::vec(1..=max_dim, order))
        .prop_flat_map(move |dims| {
            let idx = dims.iter().map(|&d| 0..d).collect::<Vec<_>>();
            (Just(dims), proptest::collection::vec((idx, -1e6f64..1e6), 0..=max_nnz))
        })
        .prop_map(|(dims, raw)| {
            let mut seen = HashSet::new();
            let entries = raw.into_iter().filter(|(i, _)| seen.insert(i.clone())).collect();
            SparseTensor::new(dims, entries).unwrap()
        })
}

fn alternating_ctx(n: usize, mode: usize) -> SensitiveContext {
    SensitiveContext::new(mode, (0..n).map(|i| usize::from(i % 3 == 0)).collect(), vec!["a".into(), "b".into()])
        .unwrap()
}

proptest! {
    #[test]
    fn text_roundtrip_is_exact(t in arb_tensor(4, 6, 40)) {
        let back = parse_tensor(&t.to_text(), Some(t.dims())).unwrap();
        prop_assert_eq!(back.dims(), t.dims());
        let a: BTreeMap<Vec<usize>, u64> = t.entries().map(|(i, v)| (i.to_vec(), v.to_bits())).collect();
        let b: BTreeMap<Vec<usize>, u64> = back.entries().map(|(i, v)| (i.to_vec(), v.to_bits())).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn downsample_keeps_majority(t in arb_tensor(3, 6, 60), rate in 0.01f64..=1.0, seed: u64) {
        let ctx = alternating_ctx(t.dims()[0], 0);
        let before = group_counts(&t, &ctx);
        let minority = minority_group(&t, &ctx);
        let d = downsample_minority(&t, &ctx, rate, seed).unwrap();
        let after = group_counts(&d, &ctx);
        prop_assert_eq!(after[minority], ceil_count(rate, before[minority]));
        prop_assert_eq!(after[1 - minority], before[1 - minority]);
        let kept: HashSet<Vec<usize>> = d.entries().map(|(i, _)| i.to_vec()).collect();
        for (idx, _) in t.entries() {
            if ctx.group_of_index(idx) != minority {
                prop_assert!(kept.contains(idx));
            }
        }
    }

    #[test]
    fn cp_is_linear_in_each_row(seed: u64, lambda in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [4, 5, 3];
        let m = init_model(ModelKind::Cp, &dims, 3, 1.0, seed).unwrap();
        let idx: Vec<usize> = dims.iter().map(|&d| rng.random_range(0..d)).collect();
        let mode = rng.random_range(0..3);
        let mut rows: Vec<Vec<f64>> = (0..3).map(|n| m.row(n, idx[n]).to_vec()).collect();
        let base = m.predict_cp(&idx).unwrap();
        rows[mode].iter_mut().for_each(|x| *x *= lambda);
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let scaled = m.predict_generic(&refs).unwrap();
        prop_assert!((scaled - lambda * base).abs() <= 1e-12 * (1.0 + base.abs() * lambda.abs()));
    }

    /// Scaling any factor row by a positive constant leaves pure-cosine
    /// neighbor lists unchanged.
    #[test]
    fn cosine_graph_is_scale_invariant(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 15;
        let rank = 3;
        let ctx = alternating_ctx(n, 0);
        let factors: Vec<f64> = (0..n * rank).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut scaled = factors.clone();
        for row in scaled.chunks_exact_mut(rank) {
            let c: f64 = rng.random_range(0.1..10.0);
            row.iter_mut().for_each(|x| *x *= c);
        }
        let a = build_graph(&factors, rank, &ctx, 4, 1.0).unwrap();
        let b = build_graph(&scaled, rank, &ctx, 4, 1.0).unwrap();
        for i in 0..n {
            prop_assert_eq!(a.neighbor_ids(i), b.neighbor_ids(i));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn split_is_disjoint_and_exhaustive(t in arb_tensor(3, 8, 60), seed: u64) {
        prop_assume!(!t.is_empty());
        let s = split(&t, (0.8, 0.1, 0.1), seed).unwrap();
        let mut all: Vec<Vec<usize>> = Vec::new();
        for part in [&s.train, &s.validation, &s.test] {
            all.extend(part.entries().map(|(i, _)| i.to_vec()));
        }
        prop_assert_eq!(all.len(), t.nnz());
        let set: HashSet<Vec<usize>> = all.into_iter().collect();
        prop_assert_eq!(set.len(), t.nnz());
        let source: HashSet<Vec<usize>> = t.entries().map(|(i, _)| i.to_vec()).collect();
        prop_assert_eq!(set, source);
    }
}

#[test]
fn generic_prediction_matches_lookup() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let dims = [6, 5, 4];
    for kind in [ModelKind::Cp, ModelKind::Costco(CostcoShape::default())] {
        let m = init_model(kind, &dims, 4, 0.5, 3).unwrap();
        for _ in 0..1000 {
            let idx: Vec<usize> = dims.iter().map(|&d| rng.random_range(0..d)).collect();
            let rows: Vec<&[f64]> = (0..3).map(|n| m.row(n, idx[n])).collect();
            assert_eq!(m.predict_generic(&rows).unwrap(), m.predict(&idx).unwrap());
        }
    }
}

#[test]
fn cp_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..50 {
        let dims = [3, 4, 5];
        let m = init_model(ModelKind::Cp, &dims, 3, 1.0, seed).unwrap();
        let idx: Vec<usize> = dims.iter().map(|&d| rng.random_range(0..d)).collect();
        let mut naive = 0.0;
        for r in 0..3 {
            naive += m.factor(0)[idx[0] * 3 + r] * m.factor(1)[idx[1] * 3 + r] * m.factor(2)[idx[2] * 3 + r];
        }
        assert!((m.predict_cp(&idx).unwrap() - naive).abs() < 1e-12);
    }
}

/// Exhaustive all-pairs ranking used as the graph oracle.
fn oracle_neighbors(factors: &[f64], rank: usize, groups: &[usize], k: usize, gamma: f64) -> Vec<Vec<usize>> {
    let n = groups.len();
    let m = groups.iter().max().unwrap() + 1;
    let onehot = |i: usize| (0..m).map(|g| if groups[i] == g { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    (0..n)
        .map(|i| {
            let mut scored: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let ui = &factors[i * rank..(i + 1) * rank];
                    let uj = &factors[j * rank..(j + 1) * rank];
                    (fair_similarity(ui, uj, &onehot(i), &onehot(j), gamma), j)
                })
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            scored.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

#[test]
fn graph_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..20 {
        let n = rng.random_range(5..=50);
        let rank = rng.random_range(1..=5);
        let k = rng.random_range(1..n);
        let gamma = [0.0, 0.1, 0.5, 0.9, 1.0, rng.random_range(0.0..1.0)][rng.random_range(0..6)];
        let groups: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        if groups.iter().all(|&g| g == groups[0]) {
            continue;
        }
        let ctx = SensitiveContext::new(0, groups.clone(), vec!["a".into(), "b".into()]).unwrap();
        let factors: Vec<f64> = (0..n * rank).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = build_graph(&factors, rank, &ctx, k, gamma).unwrap();
        let oracle = oracle_neighbors(&factors, rank, &groups, k, gamma);
        for i in 0..n {
            assert_eq!(g.neighbor_ids(i), oracle[i], "entity {i}, n={n}, k={k}, gamma={gamma}");
            assert!(!g.neighbor_ids(i).contains(&i));
            let lo = -gamma;
            let hi = gamma + (1.0 - gamma);
            assert!(g.neighbors[i].iter().all(|nb| nb.score >= lo - 1e-12 && nb.score <= hi + 1e-12));
        }
    }
}

#[test]
fn metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let n = rng.random_range(2..40);
        let mut rows: Vec<(usize, f64, f64)> =
            (0..n).map(|_| (rng.random_range(0..2), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))).collect();
        rows[0].0 = 0;
        rows[1].0 = 1;
        let r = evaluate_predictions(2, rows.iter().copied()).unwrap();

        // naive two-pass recomputation
        let mse = rows.iter().map(|(_, x, p)| (x - p) * (x - p)).sum::<f64>() / n as f64;
        let mean_of = |g: usize, f: &dyn Fn(f64, f64) -> f64| {
            let sel: Vec<f64> = rows.iter().filter(|r| r.0 == g).map(|r| f(r.1, r.2)).collect();
            sel.iter().sum::<f64>() / sel.len() as f64
        };
        let made = (mean_of(0, &|x, p| (x - p).abs()) - mean_of(1, &|x, p| (x - p).abs())).abs();
        let madr = (mean_of(0, &|_, p| p.abs()) - mean_of(1, &|_, p| p.abs())).abs();
        assert!((r.mse - mse).abs() < 1e-12);
        assert!((r.made - made).abs() < 1e-12);
        assert!((r.madr - madr).abs() < 1e-12);
        assert!((r.made - (r.per_group[&0].mae - r.per_group[&1].mae).abs()).abs() < 1e-12);

        let swapped = evaluate_predictions(2, rows.iter().map(|&(g, x, p)| (1 - g, x, p))).unwrap();
        assert!((swapped.made - r.made).abs() < 1e-12);
    }
}

#[test]
fn evaluate_uses_model_predictions() {
    let m = init_model(ModelKind::Cp, &[4, 3], 2, 0.5, 1).unwrap();
    let ctx = alternating_ctx(4, 0);
    let t = SparseTensor::new(vec![4, 3], vec![(vec![0, 0], 1.0), (vec![1, 2], -1.0), (vec![3, 1], 0.5)]).unwrap();
    let r = evaluate(&m, &t, &ctx).unwrap();
    let rows = t.entries().map(|(i, x)| (ctx.group_of_index(i), x, m.predict(i).unwrap()));
    assert_eq!(r, evaluate_predictions(2, rows).unwrap());
    let only_one = SparseTensor::new(vec![4, 3], vec![(vec![1, 0], 1.0)]).unwrap();
    assert!(evaluate(&m, &only_one, &ctx).is_err());
}

fn augmentation_fixture(seed: u64, kind: ModelKind) -> (SparseTensor, SensitiveContext, fairtensor::FactorModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = vec![12, 7, 5];
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for _ in 0..150 {
        let i = if rng.random_bool(0.8) { rng.random_range(0..6) } else { rng.random_range(6..12) };
        let idx = vec![i, rng.random_range(0..7), rng.random_range(0..5)];
        if seen.insert(idx.clone()) {
            entries.push((idx, rng.random_range(-1.0..1.0)));
        }
    }
    let t = SparseTensor::new(dims.clone(), entries).unwrap();
    let ctx = SensitiveContext::new(0, (0..12).map(|i| usize::from(i >= 6)).collect(), vec!["maj".into(), "min".into()])
        .unwrap();
    let m = init_model(kind, &dims, 3, 0.5, seed).unwrap();
    (t, ctx, m)
}

#[test]
fn augmentation_accounting() {
    for (seed, kind) in [(1, ModelKind::Cp), (2, ModelKind::Costco(CostcoShape::default())), (3, ModelKind::Cp)] {
        let (t, ctx, m) = augmentation_fixture(seed, kind);
        let g = build_graph(m.factor(0), 3, &ctx, 3, 0.5).unwrap();
        let cfg = AugmentConfig { p: 5, q: 8, seed, targets: TargetRule::All };
        let aug = generate_entries(&t, &g, &m, &ctx, &cfg).unwrap();
        assert_eq!(aug, generate_entries(&t, &g, &m, &ctx, &cfg).unwrap());

        let observed: Vec<usize> = (0..12).map(|i| t.entries().filter(|(idx, _)| idx[0] == i).count()).collect();
        for c in &aug.counts {
            assert_eq!(c.from_original, cfg.p.min(observed[c.original]));
            let got = aug.entries.iter().filter(|e| e.index[0] == c.augmented).count();
            assert_eq!(got, c.from_original + c.from_neighbors);
            assert!(c.from_neighbors <= cfg.q);
        }
        for e in &aug.entries {
            let src = t.index(e.source_position);
            let (orig, _) = aug.pairs.iter().find(|p| p.1 == e.index[0]).copied().unwrap();
            match e.source {
                EntrySource::Original => {
                    assert_eq!(src[0], orig);
                    assert_eq!(e.value.to_bits(), t.value(e.source_position).to_bits());
                }
                EntrySource::Neighbor => {
                    let nbrs = g.neighbor_ids(orig);
                    assert!(nbrs.contains(&src[0]));
                    let avg = averaged_row(&m, 0, orig, &nbrs);
                    let rows: Vec<&[f64]> = vec![&avg, m.row(1, src[1]), m.row(2, src[2])];
                    let expected = m.predict_generic(&rows).unwrap();
                    assert!(e.value.is_finite());
                    assert!((e.value - expected).abs() < 1e-12);
                }
            }
            assert_eq!(&e.index[1..], &src[1..]);
        }

        let (big, pairs) = assemble(&t, &aug).unwrap();
        assert_eq!(big.dims(), &[24, 7, 5]);
        assert_eq!(big.nnz(), t.nnz() + aug.entries.len());
        assert_eq!(pairs.len(), 12);
        for k in 0..t.nnz() {
            assert_eq!(big.index(k), t.index(k));
            assert_eq!(big.value(k).to_bits(), t.value(k).to_bits());
        }
    }
}

#[test]
fn below_median_targets_fewer_entities() {
    let (t, ctx, m) = augmentation_fixture(4, ModelKind::Cp);
    let g = build_graph(m.factor(0), 3, &ctx, 3, 0.5).unwrap();
    let cfg = AugmentConfig { p: 5, q: 5, seed: 1, targets: TargetRule::BelowMedian };
    let aug = generate_entries(&t, &g, &m, &ctx, &cfg).unwrap();
    assert!(aug.pairs.len() < 12);
    let (big, _) = assemble(&t, &aug).unwrap();
    assert_eq!(big.dims()[0], 12 + aug.pairs.len());
}
