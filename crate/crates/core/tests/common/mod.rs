#![allow(dead_code)]

use std::collections::BTreeSet;

use restitch_core::netgraph::{forward_with_taps, Layer, Norm, PoolMode};
use restitch_core::planner::{enumerate_candidates, Candidate, Direction};
use restitch_core::similarity::{build_similarity_matrix, DatasetBatches};
use restitch_core::stitcher::{assemble, init_adapter, Calibration, StitchedModel};
use restitch_core::trainer::{gen_synthetic, train_base, SyntheticConfig};
use restitch_core::{
    DType, Dataset, Network, NetworkSpec, Signature, SimilarityMatrix, StitchPlan, TrainConfig,
};

pub const SHAPE: [usize; 3] = [3, 8, 8];
pub const CLASSES: usize = 10;
pub const PER_CLASS: usize = 60;
pub const NOISE: f64 = 2.0;
pub const CKA_BATCH: usize = 64;
pub const REPEATS: usize = 5;

pub fn dataset(seed: u64) -> Dataset {
    let mut cfg = SyntheticConfig::new(seed, CLASSES, PER_CLASS, SHAPE);
    cfg.noise = NOISE;
    gen_synthetic(&cfg).unwrap()
}

fn conv(cin: usize, cout: usize) -> Layer {
    Layer::ConvBlock {
        in_channels: cin,
        out_channels: cout,
        kernel: 3,
        stride: 1,
        padding: 1,
        norm: Norm::None,
        relu: true,
    }
}

fn pool() -> Layer {
    Layer::Pool {
        mode: PoolMode::Max,
        kernel: 2,
        stride: 2,
    }
}

fn input() -> Signature {
    Signature::Spatial {
        c: SHAPE[0],
        h: SHAPE[1],
        w: SHAPE[2],
    }
}

/// Six units: conv, conv, pool, conv, pool, head.
pub fn large_spec() -> NetworkSpec {
    NetworkSpec::build(
        "large",
        input(),
        vec![
            ("conv0".into(), conv(3, 16)),
            ("conv1".into(), conv(16, 16)),
            ("pool2".into(), pool()),
            ("conv3".into(), conv(16, 32)),
            ("pool4".into(), pool()),
            (
                "head".into(),
                Layer::Head {
                    in_features: 32 * 2 * 2,
                    classes: CLASSES,
                },
            ),
        ],
    )
    .unwrap()
}

/// Four units: conv, pool, conv, head.
pub fn small_spec() -> NetworkSpec {
    NetworkSpec::build(
        "small",
        input(),
        vec![
            ("conv0".into(), conv(3, 8)),
            ("pool1".into(), pool()),
            ("conv2".into(), conv(8, 8)),
            (
                "head".into(),
                Layer::Head {
                    in_features: 8 * 4 * 4,
                    classes: CLASSES,
                },
            ),
        ],
    )
    .unwrap()
}

pub fn base_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.005,
        epochs: 20,
        batch_size: 32,
        seed,
        ..TrainConfig::default()
    }
}

pub fn finetune_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        epochs: 10,
        batch_size: 32,
        seed,
        ..TrainConfig::default()
    }
}

pub struct Parents {
    pub data: Dataset,
    pub large: Network,
    pub small: Network,
    pub large_train_acc: f64,
    pub small_train_acc: f64,
}

pub fn parents(seed: u64) -> Parents {
    let data = dataset(seed);
    let (lw, lr) = train_base(&large_spec(), &data, &base_config(seed)).unwrap();
    let (sw, sr) = train_base(&small_spec(), &data, &base_config(seed + 1000)).unwrap();
    Parents {
        large: Network::new(large_spec(), lw).unwrap(),
        small: Network::new(small_spec(), sw).unwrap(),
        large_train_acc: lr.train_accuracy,
        small_train_acc: sr.train_accuracy,
        data,
    }
}

pub fn similarity(front: &Network, back: &Network, data: &Dataset, seed: u64) -> SimilarityMatrix {
    let mut src = DatasetBatches::new(data, false, CKA_BATCH, seed);
    build_similarity_matrix(front, back, &mut src, REPEATS).unwrap()
}

pub fn oriented(p: &Parents, direction: Direction) -> (&Network, &Network) {
    match direction {
        Direction::SlowToFast => (&p.large, &p.small),
        Direction::FastToSlow => (&p.small, &p.large),
    }
}

pub fn candidates(front: &Network, back: &Network, s: &SimilarityMatrix) -> Vec<Candidate> {
    enumerate_candidates(s, &front.spec, &back.spec).unwrap()
}

pub fn plan_for(
    c: &Candidate,
    front: &Network,
    back: &Network,
    direction: Direction,
) -> StitchPlan {
    let (adapter, accounting) = c.built.clone().unwrap();
    StitchPlan {
        front_model_id: front.spec.model_id.clone(),
        back_model_id: back.spec.model_id.clone(),
        direction,
        stitch_point: c.point,
        similarity_at_point: c.similarity,
        adapter,
        accounting,
        budget: restitch_core::planner::Budget::params(accounting.total).unwrap(),
    }
}

/// Least-squares adapter fitted on the first `n` training samples.
pub fn stitch(
    plan: &StitchPlan,
    front: &Network,
    back: &Network,
    data: &Dataset,
    n: usize,
) -> StitchedModel {
    let idx: Vec<usize> = (0..n.min(data.train.len())).collect();
    let (x, _) = data.train.gather(&idx).unwrap();
    let (i, j) = (plan.stitch_point.i, plan.stitch_point.j);
    let (_, fc) = forward_with_taps(&front.spec, &front.weights, &x, &BTreeSet::from([i])).unwrap();
    let (_, bc) = forward_with_taps(&back.spec, &back.weights, &x, &BTreeSet::from([j])).unwrap();
    let cal = Calibration {
        front: &fc[&i],
        back: &bc[&j],
    };
    let (w, _) = init_adapter(&plan.adapter, Some(cal), 0, DType::F32).unwrap();
    assemble(plan, front, back, w).unwrap()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&x, &y| v[x].partial_cmp(&v[y]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut s = 0;
        while s < idx.len() {
            let mut e = s;
            while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[s]] {
                e += 1;
            }
            let avg = (s + e) as f64 / 2.0 + 1.0;
            for k in s..=e {
                r[idx[k]] = avg;
            }
            s = e + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return f64::NAN;
    }
    cov / (va * vb).sqrt()
}
