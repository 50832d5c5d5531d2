//! Randomized invariants across the pipeline.

mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{large_spec, small_spec};
use restitch_core::netgraph::{compose, forward_with_taps, split};
use restitch_core::planner::{enumerate_candidates, feasible_argmax, orient, Direction, Selection};
use restitch_core::similarity::{cka, gram, hsic};
use restitch_core::stitcher::{assemble, init_random};
use restitch_core::tape::{read_tape, write_tape, BatchMeta, CapturedUnit};
use restitch_core::tensor::{flatten_features, softmax};
use restitch_core::trainer::{accuracy, Scope, Trainable};
use restitch_core::{DType, Network, SimilarityMatrix, StitchPlan, Tensor, WeightStore};

fn tensor(seed: u64, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, DType::F64, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn matrix(t: &Tensor) -> DMatrix<f64> {
    let r = t.shape()[0];
    DMatrix::from_row_slice(r, t.len() / r, t.data())
}

fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    Tensor::from_vec(
        vec![m.nrows(), m.ncols()],
        m.transpose().iter().copied().collect(),
    )
    .unwrap()
}

fn net(spec: restitch_core::NetworkSpec, seed: u64) -> Network {
    let w = WeightStore::init(&spec, seed, DType::F32);
    Network::new(spec, w).unwrap()
}

fn similarity_for(front: &Network, back: &Network, values: Vec<Vec<f64>>) -> SimilarityMatrix {
    let (k, l) = (front.spec.len(), back.spec.len());
    SimilarityMatrix {
        front_model_id: front.spec.model_id.clone(),
        back_model_id: back.spec.model_id.clone(),
        front_units: front.spec.units.iter().map(|u| u.name.clone()).collect(),
        back_units: back.spec.units.iter().map(|u| u.name.clone()).collect(),
        repeats: 1,
        batch_size: 8,
        dataset_id: "prop".into(),
        sample_counts: vec![vec![8; l]; k],
        values,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cka_is_symmetric_and_bounded(seed in any::<u64>(), b in 2usize..24, d1 in 1usize..20, d2 in 1usize..20) {
        let f = tensor(seed, &[b, d1]);
        let g = tensor(seed ^ 1, &[b, d2]);
        let ab = cka(&f, &g).unwrap();
        let ba = cka(&g, &f).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn cka_ignores_scale_and_rotation(seed in any::<u64>(), b in 3usize..24, d in 1usize..16, c in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0]) {
        let f = tensor(seed, &[b, d]);
        let q = matrix(&tensor(seed ^ 2, &[d, d])).qr().q();
        let fq = from_matrix(&(matrix(&f) * q));
        prop_assert!((cka(&f, &f.scale(c)).unwrap() - 1.0).abs() <= 1e-9);
        prop_assert!((cka(&f, &fq).unwrap() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn gram_is_row_inner_products(seed in any::<u64>(), b in 2usize..10, d in 1usize..10) {
        let f = tensor(seed, &[b, d]);
        let k = gram(&f).unwrap();
        for i in 0..b {
            for j in 0..b {
                let dot: f64 = (0..d).map(|e| f.at(&[i, e]) * f.at(&[j, e])).sum();
                prop_assert!((k.at(&[i, j]) - dot).abs() <= 1e-12);
                prop_assert_eq!(k.at(&[i, j]), k.at(&[j, i]));
            }
        }
    }

    /// Centering removes constant offsets and is idempotent.
    #[test]
    fn centering_algebra(seed in any::<u64>(), b in 2usize..16, shift in -5.0f64..5.0) {
        let k = gram(&tensor(seed, &[b, 4])).unwrap();
        let l = gram(&tensor(seed ^ 3, &[b, 3])).unwrap();
        let shifted = k.map(|v| v + shift);
        let base = hsic(&k, &l).unwrap();
        prop_assert!((hsic(&shifted, &l).unwrap() - base).abs() <= 1e-10 * base.abs().max(1.0));
        let h = DMatrix::<f64>::identity(b, b) - DMatrix::from_element(b, b, 1.0 / b as f64);
        prop_assert!((&h * &h - &h).abs().max() <= 1e-12);
        prop_assert!((&h * DMatrix::from_element(b, 1, 1.0)).abs().max() <= 1e-12);
    }

    #[test]
    fn flatten_then_reshape_is_identity(seed in any::<u64>(), b in 1usize..5, c in 1usize..4, h in 1usize..5) {
        let x = tensor(seed, &[b, c, h, h]);
        let flat = flatten_features(&x).unwrap();
        prop_assert_eq!(flat.shape(), &[b, c * h * h][..]);
        prop_assert_eq!(flat.reshape(&[b, c, h, h]).unwrap(), x);
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), b in 1usize..8, n in 1usize..12) {
        let s = softmax(&tensor(seed, &[b, n]).scale(10.0)).unwrap();
        for r in 0..b {
            let sum: f64 = (0..n).map(|c| s.at(&[r, c])).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn accuracy_ignores_positive_rescaling(seed in any::<u64>(), b in 1usize..20, c in 0.001f64..100.0) {
        let logits = tensor(seed, &[b, 10]);
        let labels: Vec<usize> = (0..b).map(|i| (i * 7 + seed as usize) % 10).collect();
        prop_assert_eq!(accuracy(&logits, &labels).unwrap(), accuracy(&logits.scale(c), &labels).unwrap());
    }

    #[test]
    fn split_then_compose_is_exact(seed in 0u64..1000, at in 1usize..6) {
        let n = net(large_spec(), seed);
        let x = tensor(seed, &[3, 3, 8, 8]).cast(DType::F32);
        let (front, back) = split(&n, at).unwrap();
        let whole = compose(&front, &back).unwrap();
        prop_assert_eq!(whole.forward(&x).unwrap(), n.forward(&x).unwrap());
        prop_assert_eq!(front.spec.total_params() + back.spec.total_params(), n.spec.total_params());
    }

    #[test]
    fn taps_never_change_logits(seed in 0u64..1000, mask in 0u32..64) {
        let n = net(large_spec(), seed);
        let x = tensor(seed, &[2, 3, 8, 8]).cast(DType::F32);
        let taps = (0..6).filter(|u| mask & (1 << u) != 0).collect();
        let (logits, caps) = forward_with_taps(&n.spec, &n.weights, &x, &taps).unwrap();
        prop_assert_eq!(logits, n.forward(&x).unwrap());
        prop_assert_eq!(caps.len(), taps.len());
    }

    #[test]
    fn range_params_are_additive(a in 0usize..7, b in 0usize..7, c in 0usize..7) {
        let spec = large_spec();
        let mut cuts = [a, b, c];
        cuts.sort();
        let [a, b, c] = cuts;
        let whole = spec.count_params(a..c).unwrap();
        prop_assert_eq!(spec.count_params(a..b).unwrap() + spec.count_params(b..c).unwrap(), whole);
    }

    /// The masked search agrees with a brute-force scan and never loses
    /// similarity as the budget grows.
    #[test]
    fn selection_matches_scan_and_is_monotone(
        scores in prop::collection::vec(prop::collection::vec(0u8..6, 5), 4),
        costs in prop::collection::vec(prop::collection::vec(1u64..100, 5), 4),
        mask in prop::collection::vec(prop::collection::vec(any::<bool>(), 5), 4),
    ) {
        let s: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|&v| v as f64 / 5.0).collect()).collect();
        let mut last = f64::NEG_INFINITY;
        for limit in (0..=100).step_by(10) {
            let sel = feasible_argmax(&s, |i, j| mask[i][j], |i, j| Some(costs[i][j]), limit);
            let again = feasible_argmax(&s, |i, j| mask[i][j], |i, j| Some(costs[i][j]), limit);
            prop_assert_eq!(&sel, &again);
            let mut best: Option<(usize, usize, f64)> = None;
            for i in 0..4 {
                for j in 0..5 {
                    if mask[i][j] && costs[i][j] <= limit && best.is_none_or(|(_, _, v)| s[i][j] > v) {
                        best = Some((i, j, s[i][j]));
                    }
                }
            }
            match (sel, best) {
                (Selection::Found { i, j, score }, Some((bi, bj, bv))) => {
                    prop_assert_eq!((i, j, score), (bi, bj, bv));
                    prop_assert!(score >= last);
                    last = score;
                }
                (Selection::Infeasible { .. }, None) => prop_assert_eq!(last, f64::NEG_INFINITY),
                (got, want) => prop_assert!(false, "{:?} vs {:?}", got, want),
            }
        }
    }

    /// Every buildable candidate assembles, runs, and partitions its
    /// trainable parameters by scope as the accounting says.
    #[test]
    fn seams_are_sound(seed in 0u64..100, slow_to_fast in any::<bool>()) {
        let (a, b) = (net(large_spec(), seed), net(small_spec(), seed + 1));
        let direction = if slow_to_fast { Direction::SlowToFast } else { Direction::FastToSlow };
        let (front, back) = match orient(&a.spec, &b.spec, direction).0.model_id.as_str() {
            "large" => (&a, &b),
            _ => (&b, &a),
        };
        let values = vec![vec![0.5; back.spec.len()]; front.spec.len()];
        let s = similarity_for(front, back, values);
        let x = tensor(seed, &[2, 3, 8, 8]).cast(DType::F32);
        for c in enumerate_candidates(&s, &front.spec, &back.spec).unwrap() {
            let (adapter, accounting) = c.built.clone().unwrap();
            let plan = StitchPlan {
                front_model_id: front.spec.model_id.clone(),
                back_model_id: back.spec.model_id.clone(),
                direction,
                stitch_point: c.point,
                similarity_at_point: c.similarity,
                adapter: adapter.clone(),
                accounting,
                budget: restitch_core::Budget::params(u64::MAX).unwrap(),
            };
            let m = assemble(&plan, front, back, init_random(&adapter, seed, DType::F32)).unwrap();
            let out = m.forward(&x).unwrap();
            prop_assert_eq!(out.shape(), &[2, 10][..]);
            prop_assert_eq!(m.front.weights.section_digest(), front.weights.slice(0..c.point.i + 1).section_digest());
            let so = m.trainable_params(Scope::StitchOnly);
            let sb = m.trainable_params(Scope::StitchBack);
            let sf = m.trainable_params(Scope::StitchFront);
            let full = m.trainable_params(Scope::Full);
            prop_assert_eq!(so, accounting.adapter_params);
            prop_assert_eq!(sb + sf - so, full);
            prop_assert_eq!(full, accounting.total);
        }
    }

    #[test]
    fn tapes_round_trip(seed in any::<u64>(), b in 1usize..5, units in 1usize..4, f32_data in any::<bool>()) {
        let dtype = if f32_data { DType::F32 } else { DType::F64 };
        let caps: Vec<CapturedUnit> = (0..units)
            .map(|u| CapturedUnit {
                index: u,
                name: format!("unit {u}"),
                kind: "dense".into(),
                activation: tensor(seed + u as u64, &[b, u + 1, 2]).cast(dtype),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let meta = BatchMeta { size: b, seed, repeat_index: 0 };
        write_tape(dir.path(), "m", "d", meta, &caps).unwrap();
        let tape = read_tape(dir.path()).unwrap();
        for (c, a) in caps.iter().zip(&tape.activations) {
            prop_assert_eq!(&c.activation, a);
        }
        let again = tempfile::tempdir().unwrap();
        write_tape(again.path(), "m", "d", meta, &caps).unwrap();
        for u in &tape.manifest.units {
            let x = std::fs::read(dir.path().join(&u.blob)).unwrap();
            let y = std::fs::read(again.path().join(&u.blob)).unwrap();
            prop_assert_eq!(x, y);
        }
    }
}

#[test]
fn direction_reversal_swaps_parents() {
    let (a, b) = (large_spec(), small_spec());
    for (x, y) in [(&a, &b), (&b, &a)] {
        let (f1, b1) = orient(x, y, Direction::SlowToFast);
        let (f2, b2) = orient(x, y, Direction::FastToSlow);
        assert_eq!((&f1.model_id, &b1.model_id), (&b2.model_id, &f2.model_id));
        assert_eq!(f1.model_id, "large");
    }
}
