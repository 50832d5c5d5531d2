//! Sequential networks described as ordered stitchable units.
//!
//! A unit is the smallest segment that may sit on either side of a stitch:
//! one conv block (conv + optional norm + activation), one pooling layer, one
//! dense layer, one token block, the patch embedding, or the classifier head.
//!
//! FLOPs are per sample and follow a fixed table:
//!
//! | kind        | flops                                             |
//! |-------------|---------------------------------------------------|
//! | conv-block  | `2·c_in·c_out·kh·kw·h'·w'` (+ `c_out·h'·w'` relu) |
//! | pool        | `c·h'·w'`                                         |
//! | dense       | `2·d_in·d_out` (+ `d_out` relu)                   |
//! | embed       | `2·c·d·p·p·t`                                     |
//! | token-block | `4·t·d·hidden + t·hidden`                         |
//! | head        | `2·d_in·classes` (+ `t·d` token pooling)          |

mod exec;
mod weights;

use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::window_extent as kernels_window_extent;

pub use exec::{bind_params, forward, forward_with_taps, run_units, UnitParams};
pub use weights::{load_weights, save_weights, TensorEntry, WeightManifest, WeightStore};

pub const FORMAT_VERSION: u32 = 1;

/// Per-sample shape of the activation leaving a unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signature {
    Spatial { c: usize, h: usize, w: usize },
    Tokens { t: usize, d: usize },
    Vector { d: usize },
}

impl Signature {
    pub fn numel(&self) -> usize {
        match *self {
            Signature::Spatial { c, h, w } => c * h * w,
            Signature::Tokens { t, d } => t * d,
            Signature::Vector { d } => d,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Signature::Spatial { c, h, w } => vec![c, h, w],
            Signature::Tokens { t, d } => vec![t, d],
            Signature::Vector { d } => vec![d],
        }
    }

    /// Full tensor shape for a batch of `b` samples.
    pub fn batch_shape(&self, b: usize) -> Vec<usize> {
        let mut s = vec![b];
        s.extend(self.dims());
        s
    }

    pub fn matches(&self, shape: &[usize]) -> bool {
        shape.len() >= 2 && shape[1..] == self.dims()[..]
    }
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Signature::Spatial { c, h, w } => write!(f, "spatial({c},{h},{w})"),
            Signature::Tokens { t, d } => write!(f, "tokens({t},{d})"),
            Signature::Vector { d } => write!(f, "vector({d})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    None,
    /// Inference-mode batch norm; running statistics are stored with the
    /// weights and never trained.
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Max,
    Avg,
}

/// Layer configuration of a unit. The serde tag doubles as the unit kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Layer {
    ConvBlock {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        norm: Norm,
        relu: bool,
    },
    Pool {
        mode: PoolMode,
        kernel: usize,
        stride: usize,
    },
    Dense {
        in_features: usize,
        out_features: usize,
        relu: bool,
    },
    Embed {
        in_channels: usize,
        dim: usize,
        patch: usize,
    },
    TokenBlock {
        dim: usize,
        hidden: usize,
    },
    Head {
        in_features: usize,
        classes: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnitKind {
    ConvBlock,
    Pool,
    Dense,
    TokenBlock,
    Embed,
    Head,
}

impl UnitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            UnitKind::ConvBlock => "conv-block",
            UnitKind::Pool => "pool",
            UnitKind::Dense => "dense",
            UnitKind::TokenBlock => "token-block",
            UnitKind::Embed => "embed",
            UnitKind::Head => "head",
        }
    }
}

impl fmt::Display for UnitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Layer {
    pub fn kind(&self) -> UnitKind {
        match self {
            Layer::ConvBlock { .. } => UnitKind::ConvBlock,
            Layer::Pool { .. } => UnitKind::Pool,
            Layer::Dense { .. } => UnitKind::Dense,
            Layer::Embed { .. } => UnitKind::Embed,
            Layer::TokenBlock { .. } => UnitKind::TokenBlock,
            Layer::Head { .. } => UnitKind::Head,
        }
    }

    /// Output signature for the given input, or a dimension error.
    pub fn out_signature(&self, input: Signature) -> Result<Signature> {
        let mismatch =
            || Error::Dimension(format!("{} cannot consume {input}", self.kind().as_str()));
        match (*self, input) {
            (
                Layer::ConvBlock {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                },
                Signature::Spatial { c, h, w },
            ) if c == in_channels => Ok(Signature::Spatial {
                c: out_channels,
                h: kernels_window_extent("conv-block", h, kernel, stride, padding)?,
                w: kernels_window_extent("conv-block", w, kernel, stride, padding)?,
            }),
            (Layer::Pool { kernel, stride, .. }, Signature::Spatial { c, h, w }) => {
                Ok(Signature::Spatial {
                    c,
                    h: kernels_window_extent("pool", h, kernel, stride, 0)?,
                    w: kernels_window_extent("pool", w, kernel, stride, 0)?,
                })
            }
            (
                Layer::Dense {
                    in_features,
                    out_features,
                    ..
                },
                s,
            ) if s.numel() == in_features && !matches!(s, Signature::Tokens { .. }) => {
                Ok(Signature::Vector { d: out_features })
            }
            (
                Layer::Embed {
                    in_channels,
                    dim,
                    patch,
                },
                Signature::Spatial { c, h, w },
            ) if c == in_channels => {
                if patch == 0 || h % patch != 0 || w % patch != 0 {
                    return Err(Error::Config(format!(
                        "embed patch {patch} does not tile a {h}x{w} grid"
                    )));
                }
                Ok(Signature::Tokens {
                    t: (h / patch) * (w / patch),
                    d: dim,
                })
            }
            (Layer::TokenBlock { dim, .. }, Signature::Tokens { t, d }) if d == dim => {
                Ok(Signature::Tokens { t, d })
            }
            (
                Layer::Head {
                    in_features,
                    classes,
                },
                s,
            ) => {
                let width = match s {
                    Signature::Tokens { d, .. } => d,
                    other => other.numel(),
                };
                if width == in_features {
                    Ok(Signature::Vector { d: classes })
                } else {
                    Err(mismatch())
                }
            }
            _ => Err(mismatch()),
        }
    }

    /// Named weight tensors and their shapes, given the unit's input.
    pub fn tensor_shapes(&self, input: Signature) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            Layer::ConvBlock {
                in_channels,
                out_channels,
                kernel,
                norm,
                ..
            } => {
                let mut v = vec![
                    ("weight", vec![out_channels, in_channels, kernel, kernel]),
                    ("bias", vec![out_channels]),
                ];
                if norm == Norm::Batch {
                    for n in ["bn_gamma", "bn_beta", "bn_mean", "bn_var"] {
                        v.push((n, vec![out_channels]));
                    }
                }
                v
            }
            Layer::Pool { .. } => vec![],
            Layer::Dense {
                in_features,
                out_features,
                ..
            } => vec![
                ("weight", vec![in_features, out_features]),
                ("bias", vec![out_features]),
            ],
            Layer::Embed {
                in_channels,
                dim,
                patch,
            } => {
                let t = match self.out_signature(input) {
                    Ok(Signature::Tokens { t, .. }) => t,
                    _ => 0,
                };
                vec![
                    ("weight", vec![dim, in_channels, patch, patch]),
                    ("bias", vec![dim]),
                    ("pos", vec![t, dim]),
                ]
            }
            Layer::TokenBlock { dim, hidden } => vec![
                ("ln_gamma", vec![dim]),
                ("ln_beta", vec![dim]),
                ("w1", vec![dim, hidden]),
                ("b1", vec![hidden]),
                ("w2", vec![hidden, dim]),
                ("b2", vec![dim]),
            ],
            Layer::Head {
                in_features,
                classes,
            } => vec![
                ("weight", vec![in_features, classes]),
                ("bias", vec![classes]),
            ],
        }
    }

    pub fn param_count(&self, input: Signature) -> u64 {
        self.tensor_shapes(input)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>() as u64)
            .sum()
    }

    pub fn flops(&self, input: Signature) -> Result<u64> {
        let out = self.out_signature(input)?;
        let f = match (*self, input, out) {
            (
                Layer::ConvBlock {
                    in_channels,
                    out_channels,
                    kernel,
                    relu,
                    ..
                },
                _,
                Signature::Spatial { h, w, .. },
            ) => {
                let conv = 2 * in_channels * out_channels * kernel * kernel * h * w;
                conv + if relu { out_channels * h * w } else { 0 }
            }
            (Layer::Pool { .. }, _, s) => s.numel(),
            (
                Layer::Dense {
                    in_features,
                    out_features,
                    relu,
                },
                _,
                _,
            ) => 2 * in_features * out_features + if relu { out_features } else { 0 },
            (
                Layer::Embed {
                    in_channels,
                    dim,
                    patch,
                },
                _,
                Signature::Tokens { t, .. },
            ) => 2 * in_channels * dim * patch * patch * t,
            (Layer::TokenBlock { dim, hidden }, Signature::Tokens { t, .. }, _) => {
                4 * t * dim * hidden + t * hidden
            }
            (
                Layer::Head {
                    in_features,
                    classes,
                },
                input,
                _,
            ) => {
                let pool = match input {
                    Signature::Tokens { t, d } => t * d,
                    _ => 0,
                };
                2 * in_features * classes + pool
            }
            _ => unreachable!("out_signature validated the pairing"),
        };
        Ok(f as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StitchableUnit {
    pub index: usize,
    pub name: String,
    #[serde(flatten)]
    pub layer: Layer,
    pub out_signature: Signature,
    pub param_count: u64,
    pub flops: u64,
}

impl StitchableUnit {
    pub fn kind(&self) -> UnitKind {
        self.layer.kind()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub model_id: String,
    pub input_signature: Signature,
    pub num_classes: usize,
    pub units: Vec<StitchableUnit>,
}

impl NetworkSpec {
    /// Builds a spec from named layers, deriving signatures and counts.
    pub fn build(
        model_id: impl Into<String>,
        input_signature: Signature,
        layers: Vec<(String, Layer)>,
    ) -> Result<NetworkSpec> {
        let mut units = Vec::with_capacity(layers.len());
        let mut sig = input_signature;
        for (index, (name, layer)) in layers.into_iter().enumerate() {
            let out = layer
                .out_signature(sig)
                .map_err(|e| Error::Dimension(format!("unit {index} ({name}): {e}")))?;
            units.push(StitchableUnit {
                index,
                param_count: layer.param_count(sig),
                flops: layer.flops(sig)?,
                name,
                layer,
                out_signature: out,
            });
            sig = out;
        }
        if units.is_empty() {
            return Err(Error::Config("a network needs at least one unit".into()));
        }
        let num_classes = match units.last().unwrap().layer {
            Layer::Head { classes, .. } => classes,
            _ => sig.numel(),
        };
        Ok(NetworkSpec {
            model_id: model_id.into(),
            input_signature,
            num_classes,
            units,
        })
    }

    /// Re-derives every derived field and checks it against what is stored.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = NetworkSpec::build(
            self.model_id.clone(),
            self.input_signature,
            self.units
                .iter()
                .map(|u| (u.name.clone(), u.layer))
                .collect(),
        )?;
        for (u, r) in self.units.iter().zip(&rebuilt.units) {
            if u.index != r.index {
                return Err(Error::Config(format!(
                    "unit indices must be consecutive from 0; found {} at position {}",
                    u.index, r.index
                )));
            }
            if u.out_signature != r.out_signature
                || u.param_count != r.param_count
                || u.flops != r.flops
            {
                return Err(Error::Config(format!(
                    "unit {} ({}) declares {} / {} params / {} flops but its layer gives {} / {} / {}",
                    u.index,
                    u.name,
                    u.out_signature,
                    u.param_count,
                    u.flops,
                    r.out_signature,
                    r.param_count,
                    r.flops
                )));
            }
        }
        if self.num_classes != rebuilt.num_classes {
            return Err(Error::Config(format!(
                "num_classes {} disagrees with the final unit ({})",
                self.num_classes, rebuilt.num_classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn unit(&self, index: usize) -> Result<&StitchableUnit> {
        self.units.get(index).ok_or_else(|| {
            Error::Lookup(format!(
                "unit {index} not in {} (has {} units)",
                self.model_id,
                self.units.len()
            ))
        })
    }

    /// Signature entering unit `index`.
    pub fn in_signature(&self, index: usize) -> Signature {
        if index == 0 {
            self.input_signature
        } else {
            self.units[index - 1].out_signature
        }
    }

    pub fn out_signature(&self) -> Signature {
        self.units.last().unwrap().out_signature
    }

    pub fn total_params(&self) -> u64 {
        self.units.iter().map(|u| u.param_count).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.units.iter().map(|u| u.flops).sum()
    }

    fn check_range(&self, range: &Range<usize>) -> Result<()> {
        if range.start > range.end || range.end > self.units.len() {
            return Err(Error::Range(format!(
                "unit range {}..{} outside 0..{}",
                range.start,
                range.end,
                self.units.len()
            )));
        }
        Ok(())
    }

    /// Exact parameter count of the half-open unit range.
    pub fn count_params(&self, range: Range<usize>) -> Result<u64> {
        self.check_range(&range)?;
        Ok(self.units[range].iter().map(|u| u.param_count).sum())
    }

    pub fn estimate_flops(&self, range: Range<usize>) -> Result<u64> {
        self.check_range(&range)?;
        Ok(self.units[range].iter().map(|u| u.flops).sum())
    }

    /// Sub-network over a non-empty unit range, reindexed from 0.
    pub fn slice(&self, range: Range<usize>) -> Result<NetworkSpec> {
        self.check_range(&range)?;
        if range.is_empty() {
            return Err(Error::Range(format!(
                "empty unit range {}..{} of {}",
                range.start, range.end, self.model_id
            )));
        }
        let units: Vec<StitchableUnit> = self.units[range.clone()]
            .iter()
            .enumerate()
            .map(|(i, u)| StitchableUnit {
                index: i,
                ..u.clone()
            })
            .collect();
        let last = units.last().unwrap();
        let num_classes = match last.layer {
            Layer::Head { classes, .. } => classes,
            _ => last.out_signature.numel(),
        };
        Ok(NetworkSpec {
            model_id: format!("{}[{}..{}]", self.model_id, range.start, range.end),
            input_signature: self.in_signature(range.start),
            num_classes,
            units,
        })
    }

    /// Reads either a full spec or a hand-written layer list
    /// (`model_id`, `input_signature`, `layers: [{name, kind, ...}]`), whose
    /// derived fields are then computed.
    pub fn load(path: &Path) -> Result<NetworkSpec> {
        let value: serde_json::Value = io::read_json(path)?;
        let bad = |e: &dyn fmt::Display| Error::format(path, e.to_string());
        if value.get("layers").is_some() {
            let file: LayerList = serde_json::from_value(value).map_err(|e| bad(&e))?;
            let layers = file.layers.into_iter().map(|l| (l.name, l.layer)).collect();
            return NetworkSpec::build(file.model_id, file.input_signature, layers);
        }
        let spec: NetworkSpec = serde_json::from_value(value).map_err(|e| bad(&e))?;
        spec.validate().map_err(|e| bad(&e))?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }
}

#[derive(Deserialize)]
struct LayerList {
    model_id: String,
    input_signature: Signature,
    layers: Vec<NamedLayer>,
}

#[derive(Deserialize)]
struct NamedLayer {
    name: String,
    #[serde(flatten)]
    layer: Layer,
}

/// A network (or a contiguous piece of one) together with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub weights: WeightStore,
}

impl Network {
    pub fn new(spec: NetworkSpec, weights: WeightStore) -> Result<Network> {
        weights.check_against(&spec)?;
        Ok(Network { spec, weights })
    }

    pub fn slice(&self, range: Range<usize>) -> Result<Network> {
        let spec = self.spec.slice(range.clone())?;
        let weights = self.weights.slice(range);
        Network::new(spec, weights)
    }

    pub fn forward(&self, batch: &crate::tensor::Tensor) -> Result<crate::tensor::Tensor> {
        forward(&self.spec, &self.weights, batch)
    }
}

/// Splits after the first `at` units. Both sides must be non-empty and the
/// prefix must keep at least one unit beyond the input (`1 <= at < k`).
pub fn split(net: &Network, at: usize) -> Result<(Network, Network)> {
    let k = net.spec.len();
    if at < 1 || at >= k {
        return Err(Error::Range(format!(
            "split point {at} must satisfy 1 <= at < {k}"
        )));
    }
    Ok((net.slice(0..at)?, net.slice(at..k)?))
}

/// Concatenates two networks whose seam signatures agree.
pub fn compose(front: &Network, back: &Network) -> Result<Network> {
    let seam = front.spec.out_signature();
    if seam != back.spec.input_signature {
        return Err(Error::Dimension(format!(
            "cannot compose: {} emits {seam} but {} expects {}",
            front.spec.model_id, back.spec.model_id, back.spec.input_signature
        )));
    }
    let offset = front.spec.len();
    let mut units = front.spec.units.clone();
    units.extend(back.spec.units.iter().map(|u| StitchableUnit {
        index: u.index + offset,
        ..u.clone()
    }));
    let spec = NetworkSpec {
        model_id: format!("{}+{}", front.spec.model_id, back.spec.model_id),
        input_signature: front.spec.input_signature,
        num_classes: back.spec.num_classes,
        units,
    };
    let weights = front.weights.concat(&back.weights, offset);
    Network::new(spec, weights)
}
