//! Linear-kernel CKA between layer activations and the full layer-pair
//! similarity matrix of two networks.
//!
//! For features `F1 [b, d1]` and `F2 [b, d2]` with linear grams
//! `K = F1·F1ᵀ`, `L = F2·F2ᵀ` and centering matrix `H = I - 11ᵀ/b`:
//!
//! ```text
//! hsic(K, L) = tr(K H L H) / (b - 1)²
//! cka(F1, F2) = hsic(K, L) / sqrt(hsic(K, K) · hsic(L, L))
//! ```
//!
//! All arithmetic is f64 regardless of the activation dtype.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::netgraph::{forward_with_taps, Network};
use crate::tensor::{flatten_features, Tensor};
use crate::trainer::Dataset;

/// Self-HSIC below this marks a layer as carrying no usable structure.
pub const DEGENERATE_HSIC: f64 = 1e-12;

/// Tolerance band outside `[0, 1]` accepted before clamping.
pub const CLAMP_EPS: f64 = 1e-6;

pub const DEFAULT_BATCH_SIZE: usize = 256;
pub const DEFAULT_REPEATS: usize = 5;

fn rows_cols(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [b, d] => Ok((*b, *d)),
        s => Err(Error::Dimension(format!(
            "{what} must be a flattened [b, d] matrix, got {s:?}"
        ))),
    }
}

/// Linear gram matrix `F·Fᵀ` of a `[b, d]` feature matrix.
pub fn gram(features: &Tensor) -> Result<Tensor> {
    let (b, d) = rows_cols(features, "gram input")?;
    if b < 2 {
        return Err(Error::Contract(format!(
            "gram needs at least 2 samples to be centered, got {b}"
        )));
    }
    let f = features.data();
    let mut k = vec![0.0; b * b];
    for i in 0..b {
        let ri = &f[i * d..(i + 1) * d];
        for j in i..b {
            let rj = &f[j * d..(j + 1) * d];
            let v: f64 = ri.iter().zip(rj).map(|(x, y)| x * y).sum();
            k[i * b + j] = v;
            k[j * b + i] = v;
        }
    }
    Tensor::from_vec(vec![b, b], k)
}

/// `H·K·H` computed through row, column and grand means.
fn double_center(k: &[f64], b: usize) -> Vec<f64> {
    let bf = b as f64;
    let row_mean: Vec<f64> = (0..b)
        .map(|i| k[i * b..(i + 1) * b].iter().sum::<f64>() / bf)
        .collect();
    let col_mean: Vec<f64> = (0..b)
        .map(|j| (0..b).map(|i| k[i * b + j]).sum::<f64>() / bf)
        .collect();
    let grand = row_mean.iter().sum::<f64>() / bf;
    let mut out = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            out[i * b + j] = k[i * b + j] - row_mean[i] - col_mean[j] + grand;
        }
    }
    out
}

fn square_dim(t: &Tensor, what: &str) -> Result<usize> {
    match t.shape() {
        [a, b] if a == b => Ok(*a),
        s => Err(Error::Dimension(format!(
            "{what} must be square, got {s:?}"
        ))),
    }
}

/// `tr(K·H·L·H) / (b-1)²`.
pub fn hsic(k: &Tensor, l: &Tensor) -> Result<f64> {
    let b = square_dim(k, "K")?;
    let bl = square_dim(l, "L")?;
    if b != bl {
        return Err(Error::Dimension(format!(
            "HSIC operands differ in size: {:?} vs {:?}",
            k.shape(),
            l.shape()
        )));
    }
    if b < 2 {
        return Err(Error::Contract("HSIC needs b >= 2".into()));
    }
    // tr(K H L H) = tr((H K H) L) = Σ_ij (HKH)_ij L_ji
    let kc = double_center(k.data(), b);
    let ld = l.data();
    let mut acc = 0.0;
    for i in 0..b {
        for j in 0..b {
            acc += kc[i * b + j] * ld[j * b + i];
        }
    }
    Ok(acc / ((b - 1) * (b - 1)) as f64)
}

/// A double-centered linear gram together with its self-HSIC.
#[derive(Debug, Clone)]
pub struct CenteredGram {
    b: usize,
    centered: Vec<f64>,
    self_hsic: f64,
}

impl CenteredGram {
    /// Flattens `activation` along the sample axis and centers its gram.
    pub fn from_activation(activation: &Tensor) -> Result<CenteredGram> {
        let flat = flatten_features(activation)?;
        let k = gram(&flat)?;
        let b = k.shape()[0];
        let centered = double_center(k.data(), b);
        let self_hsic = frob(&centered, &centered) / ((b - 1) * (b - 1)) as f64;
        Ok(CenteredGram {
            b,
            centered,
            self_hsic,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.b
    }

    pub fn self_hsic(&self) -> f64 {
        self.self_hsic
    }

    pub fn is_degenerate(&self) -> bool {
        self.self_hsic < DEGENERATE_HSIC
    }

    pub fn hsic(&self, other: &CenteredGram) -> Result<f64> {
        if self.b != other.b {
            return Err(Error::Dimension(format!(
                "batch sizes differ: {} vs {}",
                self.b, other.b
            )));
        }
        Ok(frob(&self.centered, &other.centered) / ((self.b - 1) * (self.b - 1)) as f64)
    }

    /// CKA against another centered gram, clamped to `[0, 1]`. Degenerate
    /// operands score 0.
    pub fn cka(&self, other: &CenteredGram) -> Result<f64> {
        let cross = self.hsic(other)?;
        if self.is_degenerate() || other.is_degenerate() {
            log::warn!(
                "degenerate features (self-HSIC {:.3e} / {:.3e}); CKA set to 0",
                self.self_hsic,
                other.self_hsic
            );
            return Ok(0.0);
        }
        let v = cross / (self.self_hsic * other.self_hsic).sqrt();
        debug_assert!(
            (-CLAMP_EPS..=1.0 + CLAMP_EPS).contains(&v) || !v.is_finite(),
            "cka {v} outside tolerance band"
        );
        Ok(clamp_unit(v))
    }
}

fn frob(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Linear CKA between two activations sharing the sample axis. Inputs of
/// rank > 2 are flattened first.
pub fn cka(f1: &Tensor, f2: &Tensor) -> Result<f64> {
    if f1.shape().first() != f2.shape().first() {
        return Err(Error::Dimension(format!(
            "CKA operands differ in batch size: {:?} vs {:?}",
            f1.shape(),
            f2.shape()
        )));
    }
    CenteredGram::from_activation(f1)?.cka(&CenteredGram::from_activation(f2)?)
}

/// Layer-pair CKA between two models, averaged over repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub front_model_id: String,
    pub back_model_id: String,
    pub front_units: Vec<String>,
    pub back_units: Vec<String>,
    pub repeats: usize,
    pub batch_size: usize,
    pub dataset_id: String,
    pub values: Vec<Vec<f64>>,
    /// Samples that contributed to each cell.
    pub sample_counts: Vec<Vec<usize>>,
}

impl SimilarityMatrix {
    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn cols(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    /// Same matrix with the roles of the two models exchanged.
    pub fn transpose(&self) -> SimilarityMatrix {
        let (r, c) = (self.rows(), self.cols());
        SimilarityMatrix {
            front_model_id: self.back_model_id.clone(),
            back_model_id: self.front_model_id.clone(),
            front_units: self.back_units.clone(),
            back_units: self.front_units.clone(),
            repeats: self.repeats,
            batch_size: self.batch_size,
            dataset_id: self.dataset_id.clone(),
            values: (0..c)
                .map(|j| (0..r).map(|i| self.values[i][j]).collect())
                .collect(),
            sample_counts: (0..c)
                .map(|j| (0..r).map(|i| self.sample_counts[i][j]).collect())
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<SimilarityMatrix> {
        let m: SimilarityMatrix = io::read_json(path)?;
        let ok = m.values.len() == m.front_units.len()
            && m.values.iter().all(|r| r.len() == m.back_units.len())
            && m.values.iter().flatten().all(|v| (0.0..=1.0).contains(v));
        if !ok {
            return Err(Error::format(
                path,
                "values must be a front_units x back_units grid in [0, 1]",
            ));
        }
        Ok(m)
    }
}

/// One batch drawn for a similarity repeat.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub seed: u64,
    pub repeat_index: usize,
}

/// Supplies the per-repeat input batches.
pub trait BatchSource {
    fn dataset_id(&self) -> &str;
    fn batch_size(&self) -> usize;
    fn batch(&mut self, repeat_index: usize) -> Result<Batch>;
}

/// Disjoint batches drawn from one seeded shuffle of a dataset split.
#[derive(Debug)]
pub struct DatasetBatches<'a> {
    dataset: &'a Dataset,
    test_split: bool,
    order: Vec<usize>,
    batch_size: usize,
    seed: u64,
}

impl<'a> DatasetBatches<'a> {
    pub fn new(dataset: &'a Dataset, test_split: bool, batch_size: usize, seed: u64) -> Self {
        let n = if test_split {
            dataset.test.len()
        } else {
            dataset.train.len()
        };
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        DatasetBatches {
            dataset,
            test_split,
            order,
            batch_size,
            seed,
        }
    }
}

impl BatchSource for DatasetBatches<'_> {
    fn dataset_id(&self) -> &str {
        &self.dataset.id
    }

    fn batch_size(&self) -> usize {
        self.batch_size
    }

    fn batch(&mut self, repeat_index: usize) -> Result<Batch> {
        let lo = repeat_index * self.batch_size;
        let hi = lo + self.batch_size;
        if hi > self.order.len() {
            return Err(Error::Data(format!(
                "batch source exhausted: repeat {repeat_index} needs samples {lo}..{hi} but the split holds {}",
                self.order.len()
            )));
        }
        let split = if self.test_split {
            &self.dataset.test
        } else {
            &self.dataset.train
        };
        Ok(Batch {
            images: split.gather(&self.order[lo..hi])?.0,
            seed: self.seed,
            repeat_index,
        })
    }
}

/// Fixed list of batches, served in order.
#[derive(Debug, Clone)]
pub struct FixedBatches {
    pub dataset_id: String,
    pub batches: Vec<Batch>,
}

impl BatchSource for FixedBatches {
    fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    fn batch_size(&self) -> usize {
        self.batches.first().map_or(0, |b| b.images.shape()[0])
    }

    fn batch(&mut self, repeat_index: usize) -> Result<Batch> {
        self.batches.get(repeat_index).cloned().ok_or_else(|| {
            Error::Data(format!(
                "batch source exhausted: no batch for repeat {repeat_index}"
            ))
        })
    }
}

/// Per-unit activations of one model for one repeat.
#[derive(Debug, Clone)]
pub struct RepeatCaptures {
    pub model_id: String,
    pub unit_names: Vec<String>,
    pub activations: Vec<Tensor>,
}

/// Averages per-repeat CKA over paired captures of the two models.
/// Both live and tape-backed construction go through here.
pub fn similarity_from_captures(
    dataset_id: &str,
    pairs: &[(RepeatCaptures, RepeatCaptures)],
) -> Result<SimilarityMatrix> {
    let Some((first_f, first_b)) = pairs.first() else {
        return Err(Error::Contract("at least one repeat is required".into()));
    };
    let (k, l) = (first_f.activations.len(), first_b.activations.len());
    let mut sums = vec![vec![0.0; l]; k];
    let mut batch_size = 0;
    for (r, (front, back)) in pairs.iter().enumerate() {
        if front.activations.len() != k || back.activations.len() != l {
            return Err(Error::Dimension(format!(
                "repeat {r} captured {}x{} units, expected {k}x{l}",
                front.activations.len(),
                back.activations.len()
            )));
        }
        let fg = centered_grams(&front.activations)?;
        let bg = centered_grams(&back.activations)?;
        let b = fg[0].batch_size();
        if bg[0].batch_size() != b {
            return Err(Error::Dimension(format!(
                "repeat {r}: front batch {b} vs back batch {}",
                bg[0].batch_size()
            )));
        }
        if r > 0 && b != batch_size {
            return Err(Error::Dimension(format!(
                "repeat {r} batch size {b} differs from {batch_size}"
            )));
        }
        batch_size = b;
        let cells: Vec<f64> = (0..k * l)
            .into_par_iter()
            .map(|c| fg[c / l].cka(&bg[c % l]))
            .collect::<Result<_>>()?;
        for (c, v) in cells.into_iter().enumerate() {
            sums[c / l][c % l] += v;
        }
    }
    let n = pairs.len() as f64;
    Ok(SimilarityMatrix {
        front_model_id: first_f.model_id.clone(),
        back_model_id: first_b.model_id.clone(),
        front_units: first_f.unit_names.clone(),
        back_units: first_b.unit_names.clone(),
        repeats: pairs.len(),
        batch_size,
        dataset_id: dataset_id.to_string(),
        values: sums
            .into_iter()
            .map(|row| row.into_iter().map(|s| clamp_unit(s / n)).collect())
            .collect(),
        sample_counts: vec![vec![batch_size * pairs.len(); l]; k],
    })
}

fn centered_grams(acts: &[Tensor]) -> Result<Vec<CenteredGram>> {
    acts.par_iter().map(CenteredGram::from_activation).collect()
}

/// Activations after every unit of `net` on `batch`.
pub fn capture_all(net: &Network, batch: &Tensor) -> Result<RepeatCaptures> {
    let taps: BTreeSet<usize> = (0..net.spec.len()).collect();
    let (_, caps) = forward_with_taps(&net.spec, &net.weights, batch, &taps)?;
    Ok(RepeatCaptures {
        model_id: net.spec.model_id.clone(),
        unit_names: net.spec.units.iter().map(|u| u.name.clone()).collect(),
        activations: caps.into_values().collect(),
    })
}

/// CKA for every unit pair of `front` and `back`, averaged over `repeats`
/// batches; both models see the same batch within a repeat.
pub fn build_similarity_matrix(
    front: &Network,
    back: &Network,
    source: &mut dyn BatchSource,
    repeats: usize,
) -> Result<SimilarityMatrix> {
    if repeats == 0 {
        return Err(Error::Contract("repeats must be >= 1".into()));
    }
    if front.spec.input_signature != back.spec.input_signature {
        return Err(Error::Dimension(format!(
            "models disagree on input: {} vs {}",
            front.spec.input_signature, back.spec.input_signature
        )));
    }
    let mut pairs = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let batch = source.batch(r)?;
        pairs.push((
            capture_all(front, &batch.images)?,
            capture_all(back, &batch.images)?,
        ));
    }
    similarity_from_captures(source.dataset_id(), &pairs)
}

/// Parsed heatmap CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub row_names: Vec<String>,
    pub col_names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

/// Writes the matrix as a CSV grid: unit names label the first row and
/// column, cells carry six decimals.
pub fn heatmap_export(m: &SimilarityMatrix, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    let mut header = vec![String::new()];
    header.extend(m.back_units.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (name, row) in m.front_units.iter().zip(&m.values) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| format!("{v:.6}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format(path, e.to_string()))?;
    io::write_bytes(path, &bytes)
}

pub fn heatmap_import(path: &Path) -> Result<Heatmap> {
    let bytes = io::read_bytes(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(bytes.as_slice());
    let mut rows = rdr.records();
    let header = rows
        .next()
        .ok_or_else(|| Error::format(path, "empty heatmap"))?
        .map_err(|e| Error::format(path, e.to_string()))?;
    let col_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut row_names = Vec::new();
    let mut values = Vec::new();
    for rec in rows {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        row_names.push(rec.get(0).unwrap_or_default().to_string());
        let row = rec
            .iter()
            .skip(1)
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::format(path, format!("bad cell {s:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        values.push(row);
    }
    Ok(Heatmap {
        row_names,
        col_names,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul, DType};

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, DType::F64, &mut rng)
    }

    fn centering(b: usize) -> Tensor {
        let mut h = Tensor::eye(b, DType::F64).to_vec();
        for v in h.iter_mut() {
            *v -= 1.0 / b as f64;
        }
        Tensor::from_vec(vec![b, b], h).unwrap()
    }

    /// Explicit `H·K·H`, `H·L·H`, elementwise product sum.
    fn hsic_oracle(k: &Tensor, l: &Tensor) -> f64 {
        let b = k.shape()[0];
        let h = centering(b);
        let kc = matmul(&matmul(&h, k).unwrap(), &h).unwrap();
        let lc = matmul(&matmul(&h, l).unwrap(), &h).unwrap();
        let s: f64 = kc.data().iter().zip(lc.data()).map(|(a, b)| a * b).sum();
        s / ((b - 1) * (b - 1)) as f64
    }

    #[test]
    fn gram_examples() {
        let i2 = Tensor::eye(2, DType::F64);
        assert_eq!(gram(&i2).unwrap(), i2);
        let same = Tensor::from_vec(vec![3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        assert!(gram(&same).unwrap().data().iter().all(|&v| v == 5.0));
        let f = rand_t(&[3, 5], 1);
        let k = gram(&f).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..5).map(|c| f.at(&[i, c]) * f.at(&[j, c])).sum();
                assert!((k.at(&[i, j]) - dot).abs() < 1e-12);
            }
        }
        let one = rand_t(&[1, 5], 1);
        assert!(matches!(gram(&one), Err(Error::Contract(_))));
    }

    #[test]
    fn hsic_of_identity_pair_is_one() {
        let i2 = Tensor::eye(2, DType::F64);
        assert!((hsic(&i2, &i2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_kernel_has_zero_hsic() {
        let k = Tensor::full(&[5, 5], 3.0, DType::F64);
        let l = gram(&rand_t(&[5, 4], 2)).unwrap();
        assert!(hsic(&k, &l).unwrap().abs() < 1e-12);
    }

    #[test]
    fn hsic_matches_explicit_centering() {
        let k = gram(&rand_t(&[6, 4], 3)).unwrap();
        let l = gram(&rand_t(&[6, 7], 4)).unwrap();
        assert!((hsic(&k, &l).unwrap() - hsic_oracle(&k, &l)).abs() < 1e-10);
    }

    #[test]
    fn hsic_size_mismatch() {
        let k = Tensor::eye(3, DType::F64);
        let l = Tensor::eye(4, DType::F64);
        assert!(matches!(hsic(&k, &l), Err(Error::Dimension(_))));
    }

    #[test]
    fn centering_algebra() {
        let h = centering(7);
        let hh = matmul(&h, &h).unwrap();
        assert!(hh.max_abs_diff(&h) < 1e-12);
        let ones = Tensor::ones(&[7, 1], DType::F64);
        assert!(matmul(&h, &ones)
            .unwrap()
            .data()
            .iter()
            .all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn orthogonal_samples_score_zero() {
        let f1 = Tensor::from_vec(vec![4, 1], vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        let f2 = Tensor::from_vec(vec![4, 1], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        assert!(cka(&f1, &f2).unwrap().abs() < 1e-12);
        let (k, l) = (gram(&f1).unwrap(), gram(&f2).unwrap());
        assert!(hsic_oracle(&k, &l).abs() < 1e-12);
    }

    #[test]
    fn self_and_scaled_similarity() {
        let f = rand_t(&[10, 6], 5);
        assert!((cka(&f, &f).unwrap() - 1.0).abs() < 1e-9);
        assert!((cka(&f, &f.scale(3.0)).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cka_symmetry_is_exact() {
        let a = rand_t(&[9, 4], 6);
        let b = rand_t(&[9, 11], 7);
        assert_eq!(cka(&a, &b).unwrap(), cka(&b, &a).unwrap());
    }

    #[test]
    fn constant_features_are_degenerate() {
        let c = Tensor::full(&[6, 3], 2.0, DType::F64);
        let f = rand_t(&[6, 3], 8);
        assert_eq!(cka(&c, &f).unwrap(), 0.0);
    }

    #[test]
    fn batch_mismatch_rejected() {
        let a = rand_t(&[5, 2], 1);
        let b = rand_t(&[6, 2], 2);
        assert!(matches!(cka(&a, &b), Err(Error::Dimension(_))));
    }

    fn matrix(names: &[&str], values: Vec<Vec<f64>>) -> SimilarityMatrix {
        let n = values.len();
        let m = values[0].len();
        SimilarityMatrix {
            front_model_id: "a".into(),
            back_model_id: "b".into(),
            front_units: names[..n].iter().map(|s| s.to_string()).collect(),
            back_units: names[..m].iter().map(|s| s.to_string()).collect(),
            repeats: 1,
            batch_size: 8,
            dataset_id: "d".into(),
            sample_counts: vec![vec![8; m]; n],
            values,
        }
    }

    #[test]
    fn heatmap_grid_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let m = matrix(
            &["conv,0", "pool 1"],
            vec![vec![0.1234567, 1.0], vec![0.0, 0.5]],
        );
        heatmap_export(&m, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("\"conv,0\""), "{text}");
        assert!(text.contains("0.123457"));
        let back = heatmap_import(&path).unwrap();
        assert_eq!(back.row_names, m.front_units);
        assert_eq!(back.col_names, m.back_units);
        for (r, row) in back.values.iter().enumerate() {
            assert_eq!(row.len(), 2);
            for (c, v) in row.iter().enumerate() {
                assert!((v - m.values[r][c]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn transpose_swaps_roles() {
        let m = matrix(
            &["x", "y", "z"],
            vec![vec![0.1, 0.2, 0.3], vec![0.4, 0.5, 0.6]],
        );
        let t = m.transpose();
        assert_eq!(t.rows(), 3);
        assert_eq!(t.get(2, 1), 0.6);
        assert_eq!(t.front_model_id, "b");
        assert_eq!(t.transpose(), m);
    }
}
