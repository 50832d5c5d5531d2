//! Adapter synthesis, initialization and assembly of the stitched network
//! `back[j+1..] ∘ adapter ∘ front[..=i]`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::netgraph::{
    bind_params, load_weights, run_units, save_weights, Network, NetworkSpec, Signature,
    UnitParams, WeightStore, FORMAT_VERSION,
};
use crate::planner::StitchPlan;
use crate::tensor::{Conv2dConfig, DType, Graph, Tensor, Var};
use crate::trainer::{Scope, Trainable};

/// Ridge added to the normal equations of the least-squares fit.
pub const RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterKind {
    /// spatial -> spatial: optional resize, then a 1x1 convolution.
    ChannelProject,
    /// tokens -> tokens: per-token linear map.
    TokenProject,
    /// spatial -> tokens: non-overlapping patch convolution, flattened.
    Patchify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Resize {
    None,
    AvgPool { factor: usize },
    Nearest { factor: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    #[default]
    LeastSquares,
    Random,
}

impl std::str::FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<InitMode> {
        match s {
            "least-squares" => Ok(InitMode::LeastSquares),
            "random" => Ok(InitMode::Random),
            _ => Err(Error::Config(format!(
                "unknown init {s:?}; expected least-squares or random"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightShape {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    pub in_signature: Signature,
    pub out_signature: Signature,
    pub resize: Resize,
    /// Patch edge for `patchify` (kernel = stride).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<usize>,
    pub weights: Vec<WeightShape>,
    pub init: InitMode,
    pub param_count: u64,
    /// Per-sample FLOPs, same conventions as network units.
    pub flops: u64,
}

fn ws(name: &str, shape: Vec<usize>) -> WeightShape {
    WeightShape {
        name: name.into(),
        shape,
    }
}

fn resize_for(h: usize, w: usize, h2: usize, w2: usize) -> Result<Resize> {
    if (h, w) == (h2, w2) {
        return Ok(Resize::None);
    }
    if h.is_multiple_of(h2) && w.is_multiple_of(w2) && h / h2 == w / w2 {
        return Ok(Resize::AvgPool { factor: h / h2 });
    }
    if h2.is_multiple_of(h) && w2.is_multiple_of(w) && h2 / h == w2 / w {
        return Ok(Resize::Nearest { factor: h2 / h });
    }
    Err(Error::Config(format!(
        "cannot resize a {h}x{w} grid to {h2}x{w2} by a single integer factor"
    )))
}

/// Chooses the adapter for a `front_out -> back_in` boundary.
pub fn synthesize_adapter(front_out: Signature, back_in: Signature) -> Result<AdapterSpec> {
    use Signature::*;
    let (kind, resize, patch, weights, flops) = match (front_out, back_in) {
        (
            Spatial { c, h, w },
            Spatial {
                c: c2,
                h: h2,
                w: w2,
            },
        ) => {
            let resize = resize_for(h, w, h2, w2)?;
            let resize_flops = if resize == Resize::None {
                0
            } else {
                c * h2 * w2
            };
            (
                AdapterKind::ChannelProject,
                resize,
                None,
                vec![ws("weight", vec![c2, c, 1, 1]), ws("bias", vec![c2])],
                resize_flops + 2 * c * c2 * h2 * w2,
            )
        }
        (Tokens { t, d }, Tokens { t: t2, d: d2 }) => {
            if t != t2 {
                return Err(Error::Config(format!(
                    "token counts differ ({t} vs {t2}); token resampling is not supported"
                )));
            }
            (
                AdapterKind::TokenProject,
                Resize::None,
                None,
                vec![ws("weight", vec![d, d2]), ws("bias", vec![d2])],
                2 * t * d * d2,
            )
        }
        (Spatial { c, h, w }, Tokens { t: t2, d: d2 }) => {
            let grids: Vec<(usize, usize, usize)> = (1..=h.min(w))
                .filter(|s| h % s == 0 && w % s == 0)
                .map(|s| (s, h / s, w / s))
                .collect();
            let Some(&(s, _, _)) = grids.iter().find(|(_, gh, gw)| gh * gw == t2) else {
                let options: Vec<String> = grids
                    .iter()
                    .map(|(s, gh, gw)| format!("patch {s}: {gh}x{gw}={} tokens", gh * gw))
                    .collect();
                return Err(Error::Config(format!(
                    "no patch size turns a {h}x{w} grid into {t2} tokens; achievable: {}",
                    options.join(", ")
                )));
            };
            (
                AdapterKind::Patchify,
                Resize::None,
                Some(s),
                vec![ws("weight", vec![d2, c, s, s]), ws("bias", vec![d2])],
                2 * c * s * s * d2 * t2,
            )
        }
        (Tokens { .. }, Spatial { .. }) => {
            return Err(Error::UnsupportedBoundary(format!(
                "{front_out} -> {back_in}: tokens-to-spatial stitching is not supported"
            )))
        }
        _ => {
            return Err(Error::UnsupportedBoundary(format!(
                "{front_out} -> {back_in}: only spatial/token boundaries can be stitched"
            )))
        }
    };
    let param_count = weights
        .iter()
        .map(|w| w.shape.iter().product::<usize>() as u64)
        .sum();
    Ok(AdapterSpec {
        kind,
        in_signature: front_out,
        out_signature: back_in,
        resize,
        patch,
        weights,
        init: InitMode::default(),
        param_count,
        flops: flops as u64,
    })
}

impl AdapterSpec {
    fn fan_in(&self) -> usize {
        let w = &self.weights[0].shape;
        match self.kind {
            AdapterKind::TokenProject => w[0],
            _ => w[1..].iter().product(),
        }
    }

    /// Checks that `store` holds exactly this adapter's tensors.
    pub fn check_weights(&self, store: &WeightStore) -> Result<()> {
        if store.len() != self.weights.len() {
            return Err(Error::Dimension(format!(
                "adapter store has {} tensors, expected {}",
                store.len(),
                self.weights.len()
            )));
        }
        for w in &self.weights {
            let t = store.get(0, &w.name)?;
            if t.shape() != w.shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "adapter {} has shape {:?}, expected {:?}",
                    w.name,
                    t.shape(),
                    w.shape
                )));
            }
        }
        Ok(())
    }

    /// Adds the adapter to `g` on input `x`.
    pub fn forward(&self, g: &mut Graph, p: &UnitParams, x: Var) -> Result<Var> {
        match self.kind {
            AdapterKind::ChannelProject => {
                let x = match self.resize {
                    Resize::None => x,
                    Resize::AvgPool { factor } => g.avg_pool2d(x, factor, factor)?,
                    Resize::Nearest { factor } => g.upsample_nearest(x, factor)?,
                };
                let y = g.conv2d(x, p.get("weight"), Conv2dConfig::default())?;
                g.bias_add(y, p.get("bias"))
            }
            AdapterKind::TokenProject => {
                let y = g.token_linear(x, p.get("weight"))?;
                g.bias_add(y, p.get("bias"))
            }
            AdapterKind::Patchify => {
                let s = self.patch.expect("patchify adapter without patch size");
                let y = g.conv2d(
                    x,
                    p.get("weight"),
                    Conv2dConfig {
                        stride: s,
                        padding: 0,
                    },
                )?;
                let y = g.bias_add(y, p.get("bias"))?;
                let shape = g.value(y).shape().to_vec();
                let y = g.reshape(y, &[shape[0], shape[1], shape[2] * shape[3]])?;
                g.swap_last2(y)
            }
        }
    }

    /// Applies the adapter to a concrete batch.
    pub fn apply(&self, weights: &WeightStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = bind_adapter(&mut g, self, weights, false)?;
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }
}

/// Binds the adapter tensors as leaves of a single unit.
fn bind_adapter(
    g: &mut Graph,
    spec: &AdapterSpec,
    weights: &WeightStore,
    trainable: bool,
) -> Result<UnitParams> {
    spec.check_weights(weights)?;
    let mut vars = BTreeMap::new();
    for w in &spec.weights {
        vars.insert(
            w.name.clone(),
            g.leaf(weights.get(0, &w.name)?.clone(), trainable),
        );
    }
    Ok(UnitParams::from_map(vars))
}

/// Fan-in scaled uniform weights, deterministic in `seed`.
pub fn init_random(spec: &AdapterSpec, seed: u64, dtype: DType) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (spec.fan_in() as f64).sqrt();
    let mut store = WeightStore::new();
    for w in &spec.weights {
        store.insert(
            0,
            &w.name,
            Tensor::uniform(&w.shape, -bound, bound, dtype, &mut rng),
        );
    }
    store
}

/// Identity projection for same-signature channel or token adapters.
pub fn identity_adapter(spec: &AdapterSpec, dtype: DType) -> Result<WeightStore> {
    if spec.in_signature != spec.out_signature || spec.kind == AdapterKind::Patchify {
        return Err(Error::Contract(format!(
            "identity adapter needs equal signatures, got {} -> {}",
            spec.in_signature, spec.out_signature
        )));
    }
    let mut store = WeightStore::new();
    let (wshape, bshape) = (&spec.weights[0].shape, &spec.weights[1].shape);
    let n = bshape[0];
    let eye = Tensor::eye(n, dtype);
    store.insert(0, "weight", eye.reshape(wshape)?);
    store.insert(0, "bias", Tensor::zeros(bshape, dtype));
    Ok(store)
}

/// Rows of the linear problem: one per spatial site, token or patch.
fn design_rows(spec: &AdapterSpec, x: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let x = x.cast(DType::F64);
    match spec.kind {
        AdapterKind::ChannelProject => {
            let mut g = Graph::new();
            let xv = g.constant(x);
            let r = match spec.resize {
                Resize::None => xv,
                Resize::AvgPool { factor } => g.avg_pool2d(xv, factor, factor)?,
                Resize::Nearest { factor } => g.upsample_nearest(xv, factor)?,
            };
            let t = g.value(r);
            let [b, c, h, w] = t.dims4("adapter calibration")?;
            let d = t.data();
            let mut rows = Vec::with_capacity(b * h * w * c);
            for n in 0..b {
                for y in 0..h {
                    for xx in 0..w {
                        for ch in 0..c {
                            rows.push(d[((n * c + ch) * h + y) * w + xx]);
                        }
                    }
                }
            }
            Ok((b * h * w, c, rows))
        }
        AdapterKind::TokenProject => {
            let s = x.shape();
            if s.len() != 3 {
                return Err(Error::Dimension(format!("token calibration input {s:?}")));
            }
            Ok((s[0] * s[1], s[2], x.to_vec()))
        }
        AdapterKind::Patchify => {
            let p = spec.patch.unwrap_or(1);
            let [b, c, h, w] = x.dims4("adapter calibration")?;
            let (gh, gw) = (h / p, w / p);
            let d = x.data();
            let mut rows = Vec::with_capacity(b * gh * gw * c * p * p);
            for n in 0..b {
                for gy in 0..gh {
                    for gx in 0..gw {
                        for ch in 0..c {
                            for ky in 0..p {
                                for kx in 0..p {
                                    let (yy, xx) = (gy * p + ky, gx * p + kx);
                                    rows.push(d[((n * c + ch) * h + yy) * w + xx]);
                                }
                            }
                        }
                    }
                }
            }
            Ok((b * gh * gw, c * p * p, rows))
        }
    }
}

/// Target rows matching [`design_rows`].
fn target_rows(spec: &AdapterSpec, y: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let y = y.cast(DType::F64);
    match spec.kind {
        AdapterKind::ChannelProject => {
            let [b, c, h, w] = y.dims4("adapter calibration target")?;
            let d = y.data();
            let mut rows = Vec::with_capacity(b * c * h * w);
            for n in 0..b {
                for yy in 0..h {
                    for xx in 0..w {
                        for ch in 0..c {
                            rows.push(d[((n * c + ch) * h + yy) * w + xx]);
                        }
                    }
                }
            }
            Ok((b * h * w, c, rows))
        }
        AdapterKind::TokenProject | AdapterKind::Patchify => {
            let s = y.shape();
            if s.len() != 3 {
                return Err(Error::Dimension(format!("token calibration target {s:?}")));
            }
            Ok((s[0] * s[1], s[2], y.to_vec()))
        }
    }
}

/// Ridge least squares `min ||[X 1] W - Y||² + RIDGE ||W||²` through the
/// Cholesky factor of the normal equations. `None` if the factorization
/// fails or yields non-finite values.
fn solve_ridge(n: usize, p: usize, x: &[f64], q: usize, y: &[f64]) -> Option<DMatrix<f64>> {
    let xa = DMatrix::from_fn(n, p + 1, |r, c| if c < p { x[r * p + c] } else { 1.0 });
    let ym = DMatrix::from_fn(n, q, |r, c| y[r * q + c]);
    let xt = xa.transpose();
    let mut a = &xt * &xa;
    for k in 0..=p {
        a[(k, k)] += RIDGE;
    }
    let b = &xt * &ym;
    let sol = a.cholesky()?.solve(&b);
    sol.iter().all(|v| v.is_finite()).then_some(sol)
}

/// Paired activations on the two sides of the seam for the same inputs.
#[derive(Debug, Clone, Copy)]
pub struct Calibration<'a> {
    pub front: &'a Tensor,
    pub back: &'a Tensor,
}

/// Initializes adapter weights. With calibration data the least-squares
/// map from front to back activations is installed; otherwise, or when the
/// normal equations cannot be solved, the seeded random init is used.
/// Returns the weights and the mode that was actually applied.
pub fn init_adapter(
    spec: &AdapterSpec,
    calibration: Option<Calibration<'_>>,
    seed: u64,
    dtype: DType,
) -> Result<(WeightStore, InitMode)> {
    let Some(cal) = calibration else {
        return Ok((init_random(spec, seed, dtype), InitMode::Random));
    };
    if cal.front.shape().first() != cal.back.shape().first() {
        return Err(Error::Dimension(format!(
            "calibration batches differ: {:?} vs {:?}",
            cal.front.shape(),
            cal.back.shape()
        )));
    }
    if !spec.in_signature.matches(cal.front.shape())
        || !spec.out_signature.matches(cal.back.shape())
    {
        return Err(Error::Dimension(format!(
            "calibration shapes {:?} -> {:?} do not fit adapter {} -> {}",
            cal.front.shape(),
            cal.back.shape(),
            spec.in_signature,
            spec.out_signature
        )));
    }
    let (n, p, x) = design_rows(spec, cal.front)?;
    let (n2, q, y) = target_rows(spec, cal.back)?;
    debug_assert_eq!(n, n2);
    let Some(sol) = solve_ridge(n, p, &x, q, &y) else {
        log::warn!("least-squares adapter init failed; falling back to random init");
        return Ok((init_random(spec, seed, dtype), InitMode::Random));
    };
    // Row k of `sol` is input feature k (the last row is the bias), column o
    // the output channel.
    let wshape = &spec.weights[0].shape;
    let wdata: Vec<f64> = match spec.kind {
        AdapterKind::TokenProject => (0..p)
            .flat_map(|k| (0..q).map(move |o| (k, o)))
            .map(|(k, o)| sol[(k, o)])
            .collect(),
        // conv kernels are [out, in...] with the in-axes in design order
        AdapterKind::ChannelProject | AdapterKind::Patchify => (0..q)
            .flat_map(|o| (0..p).map(move |k| (k, o)))
            .map(|(k, o)| sol[(k, o)])
            .collect(),
    };
    let bias: Vec<f64> = (0..q).map(|o| sol[(p, o)]).collect();
    let mut store = WeightStore::new();
    store.insert(0, "weight", Tensor::new(wshape.clone(), wdata, dtype)?);
    store.insert(0, "bias", Tensor::new(vec![q], bias, dtype)?);
    Ok((store, InitMode::LeastSquares))
}

/// Front prefix, adapter and back suffix of a stitched network.
#[derive(Debug, Clone, PartialEq)]
pub struct StitchedModel {
    pub plan: StitchPlan,
    pub front: Network,
    pub adapter: WeightStore,
    pub back: Network,
}

fn assembly(seam: &str, detail: String) -> Error {
    Error::Assembly {
        seam: seam.into(),
        detail,
    }
}

/// Cuts the parents at the plan's stitch point and joins them through
/// `adapter`.
pub fn assemble(
    plan: &StitchPlan,
    front_parent: &Network,
    back_parent: &Network,
    adapter: WeightStore,
) -> Result<StitchedModel> {
    let (i, j) = (plan.stitch_point.i, plan.stitch_point.j);
    let (k, l) = (front_parent.spec.len(), back_parent.spec.len());
    if front_parent.spec.model_id != plan.front_model_id {
        return Err(assembly(
            "front",
            format!(
                "plan expects front model {}, got {}",
                plan.front_model_id, front_parent.spec.model_id
            ),
        ));
    }
    if back_parent.spec.model_id != plan.back_model_id {
        return Err(assembly(
            "back",
            format!(
                "plan expects back model {}, got {}",
                plan.back_model_id, back_parent.spec.model_id
            ),
        ));
    }
    if i >= k {
        return Err(Error::Range(format!("front unit {i} outside 0..{k}")));
    }
    if j + 1 >= l {
        return Err(Error::Range(format!(
            "back unit {j} leaves no suffix in a {l}-unit model"
        )));
    }
    let front_out = front_parent.spec.units[i].out_signature;
    if front_out != plan.adapter.in_signature {
        return Err(assembly(
            "front",
            format!(
                "front unit {i} emits {front_out}, adapter expects {}",
                plan.adapter.in_signature
            ),
        ));
    }
    let back_in = back_parent.spec.in_signature(j + 1);
    if back_in != plan.adapter.out_signature {
        return Err(assembly(
            "back",
            format!(
                "adapter emits {}, back unit {} expects {back_in}",
                plan.adapter.out_signature,
                j + 1
            ),
        ));
    }
    plan.adapter
        .check_weights(&adapter)
        .map_err(|e| assembly("adapter", e.to_string()))?;
    Ok(StitchedModel {
        plan: plan.clone(),
        front: front_parent.slice(0..i + 1)?,
        adapter,
        back: back_parent.slice(j + 1..l)?,
    })
}

impl StitchedModel {
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.logits(batch)
    }

    pub fn front_params(&self) -> u64 {
        self.front.weights.total_elements()
    }

    pub fn adapter_params(&self) -> u64 {
        self.adapter.total_elements()
    }

    pub fn back_params(&self) -> u64 {
        self.back.weights.total_elements()
    }

    /// Digests of the front, adapter and back sections.
    pub fn section_digests(&self) -> SectionDigests {
        SectionDigests {
            front: self.front.weights.section_digest(),
            adapter: self.adapter.section_digest(),
            back: self.back.weights.section_digest(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<SectionDigests> {
        io::create_dir(dir)?;
        save_weights(
            &self.front.weights,
            &self.front.spec.model_id,
            &dir.join("front"),
        )?;
        save_weights(&self.adapter, "adapter", &dir.join("adapter"))?;
        save_weights(
            &self.back.weights,
            &self.back.spec.model_id,
            &dir.join("back"),
        )?;
        let digests = self.section_digests();
        let file = StitchedFile {
            format_version: FORMAT_VERSION,
            plan: self.plan.clone(),
            front_spec: self.front.spec.clone(),
            back_spec: self.back.spec.clone(),
            sections: digests.clone(),
        };
        io::write_json(&dir.join(STITCHED_MANIFEST), &file)?;
        Ok(digests)
    }

    pub fn load(dir: &Path) -> Result<StitchedModel> {
        let mpath = dir.join(STITCHED_MANIFEST);
        let file: StitchedFile = io::read_json(&mpath)?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::format(
                &mpath,
                format!(
                    "format_version {} found, {FORMAT_VERSION} expected",
                    file.format_version
                ),
            ));
        }
        let (_, front) = load_weights(&dir.join("front"), None)?;
        let (_, adapter) = load_weights(&dir.join("adapter"), None)?;
        let (_, back) = load_weights(&dir.join("back"), None)?;
        let model = StitchedModel {
            plan: file.plan,
            front: Network::new(file.front_spec, front)?,
            adapter,
            back: Network::new(file.back_spec, back)?,
        };
        model.plan.adapter.check_weights(&model.adapter)?;
        let got = model.section_digests();
        for (name, want, have) in [
            ("front", &file.sections.front, &got.front),
            ("adapter", &file.sections.adapter, &got.adapter),
            ("back", &file.sections.back, &got.back),
        ] {
            if want != have {
                return Err(Error::corruption(
                    dir.join(name),
                    format!("section digest {have} does not match manifest {want}"),
                ));
            }
        }
        Ok(model)
    }
}

pub const STITCHED_MANIFEST: &str = "stitched.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionDigests {
    pub front: String,
    pub adapter: String,
    pub back: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StitchedFile {
    format_version: u32,
    plan: StitchPlan,
    front_spec: NetworkSpec,
    back_spec: NetworkSpec,
    sections: SectionDigests,
}

/// Sections are front, adapter, back, in that order.
impl Trainable for StitchedModel {
    fn sections(&self) -> Vec<&WeightStore> {
        vec![&self.front.weights, &self.adapter, &self.back.weights]
    }

    fn section_mut(&mut self, index: usize) -> &mut WeightStore {
        match index {
            0 => &mut self.front.weights,
            1 => &mut self.adapter,
            2 => &mut self.back.weights,
            _ => panic!("stitched model has three sections, got index {index}"),
        }
    }

    fn trainable_sections(&self, scope: Scope) -> Vec<bool> {
        vec![scope.trains_front(), true, scope.trains_back()]
    }

    fn build(
        &self,
        g: &mut Graph,
        x: Var,
        trainable: &[bool],
    ) -> Result<(Var, Vec<Vec<UnitParams>>)> {
        let none = Default::default();
        let fp = bind_params(g, &self.front.spec, &self.front.weights, trainable[0])?;
        let ap = bind_adapter(g, &self.plan.adapter, &self.adapter, trainable[1])?;
        let bp = bind_params(g, &self.back.spec, &self.back.weights, trainable[2])?;
        let h = run_units(g, &self.front.spec, &fp, x, &none, &mut BTreeMap::new())?;
        let h = self.plan.adapter.forward(g, &ap, h)?;
        let out = run_units(g, &self.back.spec, &bp, h, &none, &mut BTreeMap::new())?;
        Ok((out, vec![fp, vec![ap], bp]))
    }

    fn frozen_prefix(&self, trainable: &[bool]) -> Option<&Network> {
        (!trainable[0]).then_some(&self.front)
    }

    fn build_after_prefix(
        &self,
        g: &mut Graph,
        h: Var,
        trainable: &[bool],
    ) -> Result<(Var, Vec<Vec<UnitParams>>)> {
        let ap = bind_adapter(g, &self.plan.adapter, &self.adapter, trainable[1])?;
        let bp = bind_params(g, &self.back.spec, &self.back.weights, trainable[2])?;
        let h = self.plan.adapter.forward(g, &ap, h)?;
        let out = run_units(
            g,
            &self.back.spec,
            &bp,
            h,
            &Default::default(),
            &mut BTreeMap::new(),
        )?;
        Ok((out, vec![Vec::new(), vec![ap], bp]))
    }
}
