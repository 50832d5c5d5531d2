//! Supervised training and frozen fine-tuning.
//!
//! The optimizer is SGD with momentum and decoupled weight decay:
//!
//! ```text
//! v <- momentum * v + grad
//! p <- p - lr * v - lr * weight_decay * p
//! ```

mod data;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use data::{
    class_prototypes, gen_synthetic, load_dataset, save_dataset, Dataset, Split, SyntheticConfig,
    DATA_MANIFEST,
};

use crate::error::{Error, Result};
use crate::netgraph::{bind_params, run_units, Network, UnitParams, WeightStore};
use crate::tensor::{argmax_rows, DType, Graph, Tensor, Var};

/// Rows per forward pass when evaluating.
pub const EVAL_CHUNK: usize = 256;

/// Tensors that are carried in a weight store but never trained.
pub fn is_running_stat(name: &str) -> bool {
    matches!(name, "bn_mean" | "bn_var")
}

/// Which weight sections fine-tuning may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    #[default]
    StitchOnly,
    StitchBack,
    StitchFront,
    Full,
}

impl Scope {
    pub const ALL: [Scope; 4] = [
        Scope::StitchOnly,
        Scope::StitchBack,
        Scope::StitchFront,
        Scope::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::StitchOnly => "stitch-only",
            Scope::StitchBack => "stitch-back",
            Scope::StitchFront => "stitch-front",
            Scope::Full => "full",
        }
    }

    pub fn trains_front(self) -> bool {
        matches!(self, Scope::StitchFront | Scope::Full)
    }

    pub fn trains_back(self) -> bool {
        matches!(self, Scope::StitchBack | Scope::Full)
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Scope> {
        Scope::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown scope {s:?}; expected stitch-only, stitch-back, stitch-front or full"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub scope: Scope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            scope: Scope::StitchOnly,
        }
    }
}

impl TrainConfig {
    /// Rates must be finite and non-negative, momentum below 1, batch
    /// size positive. Zero epochs or a zero learning rate are allowed and
    /// leave the weights untouched.
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.learning_rate) || !ok(self.weight_decay) || !ok(self.momentum) {
            return Err(Error::Config(format!(
                "learning_rate, momentum and weight_decay must be finite and >= 0 (got {}, {}, {})",
                self.learning_rate, self.momentum, self.weight_decay
            )));
        }
        if self.momentum >= 1.0 {
            return Err(Error::Config(format!(
                "momentum must be < 1, got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// A model the optimizer can drive: one or more weight sections plus a
/// graph builder.
pub trait Trainable {
    fn sections(&self) -> Vec<&WeightStore>;

    fn section_mut(&mut self, index: usize) -> &mut WeightStore;

    /// Per-section trainability under `scope`.
    fn trainable_sections(&self, scope: Scope) -> Vec<bool>;

    /// Binds every section (flagged ones as trainable leaves) and runs the
    /// forward pass on `x`. Returns the logits and the bound leaves, per
    /// section and per unit.
    fn build(
        &self,
        g: &mut Graph,
        x: Var,
        trainable: &[bool],
    ) -> Result<(Var, Vec<Vec<UnitParams>>)>;

    /// The leading network that stays frozen under `trainable`, if any.
    /// Its outputs are then computed once per sample and reused.
    fn frozen_prefix(&self, _trainable: &[bool]) -> Option<&Network> {
        None
    }

    /// Forward pass from the output of [`Trainable::frozen_prefix`].
    fn build_after_prefix(
        &self,
        g: &mut Graph,
        h: Var,
        trainable: &[bool],
    ) -> Result<(Var, Vec<Vec<UnitParams>>)> {
        self.build(g, h, trainable)
    }

    fn dtype(&self) -> DType {
        self.sections()
            .iter()
            .find_map(|s| s.dtype())
            .unwrap_or(DType::F32)
    }

    /// Elements the optimizer may change under `scope`.
    fn trainable_params(&self, scope: Scope) -> u64 {
        self.sections()
            .iter()
            .zip(self.trainable_sections(scope))
            .filter(|(_, t)| *t)
            .flat_map(|(s, _)| s.iter())
            .filter(|((_, name), _)| !is_running_stat(name))
            .map(|(_, t)| t.len() as u64)
            .sum()
    }

    /// Elements across all sections.
    fn total_params(&self) -> u64 {
        self.sections().iter().map(|s| s.total_elements()).sum()
    }

    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(batch.cast(self.dtype()));
        let none = vec![false; self.sections().len()];
        let (out, _) = self.build(&mut g, x, &none)?;
        Ok(g.value(out).clone())
    }
}

/// A plain network has a single section, trained only under `Full`.
impl Trainable for Network {
    fn sections(&self) -> Vec<&WeightStore> {
        vec![&self.weights]
    }

    fn section_mut(&mut self, index: usize) -> &mut WeightStore {
        assert_eq!(index, 0, "a network has one weight section");
        &mut self.weights
    }

    fn trainable_sections(&self, scope: Scope) -> Vec<bool> {
        vec![scope == Scope::Full]
    }

    fn build(
        &self,
        g: &mut Graph,
        x: Var,
        trainable: &[bool],
    ) -> Result<(Var, Vec<Vec<UnitParams>>)> {
        let params = bind_params(g, &self.spec, &self.weights, trainable[0])?;
        let out = run_units(
            g,
            &self.spec,
            &params,
            x,
            &Default::default(),
            &mut BTreeMap::new(),
        )?;
        Ok((out, vec![params]))
    }
}

/// Loss and accuracy history of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub scope: Scope,
    pub epochs: usize,
    pub steps: usize,
    pub trainable_params: u64,
    /// Mean training-set loss before the first update.
    pub initial_loss: f64,
    /// Mean training-set loss after each epoch.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses
            .last()
            .copied()
            .unwrap_or(self.initial_loss)
    }
}

type SlotKey = (usize, usize, String);

/// Per-row softmax cross-entropy.
pub fn row_losses(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let [b, n] = match logits.shape() {
        [b, n] => [*b, *n],
        s => {
            return Err(Error::Dimension(format!(
                "logits must be [b, classes], got {s:?}"
            )))
        }
    };
    if labels.len() != b {
        return Err(Error::Dimension(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    let d = logits.data();
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            if y >= n {
                return Err(Error::Data(format!("label {y} outside [0, {n})")));
            }
            let row = &d[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            Ok(max + z.ln() - row[y])
        })
        .collect()
}

/// Inputs seen by the trainable part of the model: the raw split, or the
/// cached outputs of a frozen prefix.
struct Inputs<'a> {
    split: std::borrow::Cow<'a, Split>,
    cached: bool,
}

fn model_inputs<'a, M: Trainable>(
    model: &M,
    flags: &[bool],
    split: &'a Split,
) -> Result<Inputs<'a>> {
    let Some(prefix) = model.frozen_prefix(flags) else {
        return Ok(Inputs {
            split: std::borrow::Cow::Borrowed(split),
            cached: false,
        });
    };
    let mut data = Vec::new();
    let mut shape = Vec::new();
    for idx in chunks(split.len()) {
        let (x, _) = split.gather(&idx)?;
        let h = prefix.forward(&x.cast(model.dtype()))?;
        shape = h.shape().to_vec();
        data.extend_from_slice(h.data());
    }
    shape[0] = split.len();
    let images = Tensor::new(shape, data, model.dtype())?;
    Ok(Inputs {
        split: std::borrow::Cow::Owned(Split::new(images, split.labels.clone())?),
        cached: true,
    })
}

fn build_for<M: Trainable>(
    model: &M,
    g: &mut Graph,
    x: &Tensor,
    flags: &[bool],
    cached: bool,
) -> Result<(Var, Vec<Vec<UnitParams>>)> {
    let xv = g.constant(x.cast(model.dtype()));
    if cached {
        model.build_after_prefix(g, xv, flags)
    } else {
        model.build(g, xv, flags)
    }
}

/// Mean loss over `inputs`, summed per sample in index order.
fn inputs_loss<M: Trainable>(model: &M, inputs: &Inputs<'_>, flags: &[bool]) -> Result<f64> {
    let none = vec![false; flags.len()];
    let mut per = Vec::with_capacity(inputs.split.len());
    for idx in chunks(inputs.split.len()) {
        let (x, y) = inputs.split.gather(&idx)?;
        let mut g = Graph::new();
        let (out, _) = build_for(model, &mut g, &x, &none, inputs.cached)?;
        per.extend(row_losses(g.value(out), &y)?);
    }
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Trains `model` on the training split under `cfg.scope`. On a
/// non-finite loss or update the offending step is discarded, so the model
/// keeps its last finite state, and a divergence error is returned.
///
/// The loss recorded for an epoch is the mean over samples of the loss each
/// sample had when its mini-batch was processed.
pub fn finetune<M: Trainable>(
    model: &mut M,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Data(format!(
            "dataset {} has an empty split",
            data.id
        )));
    }
    let flags = model.trainable_sections(cfg.scope);
    let inputs = model_inputs(model, &flags, &data.train)?;
    let n = inputs.split.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: BTreeMap<SlotKey, Vec<f64>> = BTreeMap::new();
    let initial_loss = inputs_loss(model, &inputs, &flags)?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut per_sample = vec![0.0; n];
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = inputs.split.gather(chunk)?;
            let losses = sgd_step(model, &flags, &x, &y, cfg, &mut velocity, inputs.cached)
                .map_err(|e| match e {
                    Error::Diverged { loss, .. } => {
                        log::error!(
                            "diverged at epoch {epoch} step {steps}; keeping last finite weights"
                        );
                        Error::Diverged {
                            epoch,
                            step: steps,
                            loss,
                        }
                    }
                    other => other,
                })?;
            for (&i, l) in chunk.iter().zip(losses) {
                per_sample[i] = l;
            }
            steps += 1;
        }
        let loss = per_sample.iter().sum::<f64>() / n as f64;
        log::debug!("epoch {epoch}: train loss {loss:.6}");
        epoch_losses.push(loss);
    }
    Ok(TrainReport {
        scope: cfg.scope,
        epochs: cfg.epochs,
        steps,
        trainable_params: model.trainable_params(cfg.scope),
        initial_loss,
        epoch_losses,
        train_accuracy: evaluate(model, &data.train)?,
        test_accuracy: evaluate(model, &data.test)?,
    })
}

/// One SGD update; returns the per-sample losses before the update.
fn sgd_step<M: Trainable>(
    model: &mut M,
    flags: &[bool],
    x: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
    velocity: &mut BTreeMap<SlotKey, Vec<f64>>,
    cached: bool,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let (logits, bound) = build_for(model, &mut g, x, flags, cached)?;
    let rows = row_losses(g.value(logits), y)?;
    let loss = g.softmax_cross_entropy(logits, y)?;
    let lv = g.value(loss).item()?;
    if !lv.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            step: 0,
            loss: lv,
        });
    }
    g.backward(loss)?;

    let (lr, mu, wd) = (cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let mut updates = Vec::new();
    for (s, units) in bound.iter().enumerate() {
        for (u, params) in units.iter().enumerate() {
            for (name, var) in params.iter() {
                let Some(grad) = g.grad(var) else { continue };
                let key = (s, u, name.to_string());
                let p = g.value(var);
                let v = velocity
                    .get(&key)
                    .cloned()
                    .unwrap_or_else(|| vec![0.0; p.len()]);
                let v: Vec<f64> = v
                    .iter()
                    .zip(grad.data())
                    .map(|(vi, gi)| mu * vi + gi)
                    .collect();
                let next: Vec<f64> = p
                    .data()
                    .iter()
                    .zip(&v)
                    .map(|(pi, vi)| pi - lr * vi - lr * wd * pi)
                    .collect();
                let next = Tensor::new(p.shape().to_vec(), next, p.dtype())?;
                if !next.all_finite() {
                    return Err(Error::Diverged {
                        epoch: 0,
                        step: 0,
                        loss: lv,
                    });
                }
                updates.push((key, v, next));
            }
        }
    }
    for ((s, u, name), v, next) in updates {
        model.section_mut(s).insert(u, &name, next);
        velocity.insert((s, u, name), v);
    }
    Ok(rows)
}

fn chunks(n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(EVAL_CHUNK)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Mean cross-entropy over a split.
pub fn mean_loss<M: Trainable>(model: &M, split: &Split) -> Result<f64> {
    let inputs = Inputs {
        split: std::borrow::Cow::Borrowed(split),
        cached: false,
    };
    inputs_loss(model, &inputs, &vec![false; model.sections().len()])
}

/// Predicted class per sample.
pub fn predict<M: Trainable + Sync>(model: &M, split: &Split) -> Result<Vec<usize>> {
    let parts: Vec<Vec<usize>> = chunks(split.len())
        .into_par_iter()
        .map(|idx| {
            let (x, _) = split.gather(&idx)?;
            argmax_rows(&model.logits(&x)?)
        })
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = argmax_rows(logits)?;
    if pred.len() != labels.len() || pred.is_empty() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn evaluate<M: Trainable>(model: &M, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    let mut hits = 0usize;
    for idx in chunks(split.len()) {
        let (x, y) = split.gather(&idx)?;
        let pred = argmax_rows(&model.logits(&x)?)?;
        hits += pred.iter().zip(&y).filter(|(p, y)| p == y).count();
    }
    Ok(hits as f64 / split.len() as f64)
}

/// Trains a parent network from its seeded initialization. Every tensor
/// except batch-norm running statistics is updated.
pub fn train_base(
    spec: &crate::netgraph::NetworkSpec,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(WeightStore, TrainReport)> {
    let weights = WeightStore::init(spec, cfg.seed, DType::F32);
    let mut net = Network::new(spec.clone(), weights)?;
    let cfg = TrainConfig {
        scope: Scope::Full,
        ..cfg.clone()
    };
    let report = finetune(&mut net, data, &cfg)?;
    Ok((net.weights, report))
}
