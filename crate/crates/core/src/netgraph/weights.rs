use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Layer, NetworkSpec, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::io;
use crate::tensor::{DType, Tensor};

/// Named parameter tensors keyed by `(unit index, tensor name)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore {
    tensors: BTreeMap<(usize, String), Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fan-in scaled uniform initialization, deterministic in `seed`.
    ///
    /// Conv and dense weights feeding a ReLU use the Kaiming bound
    /// `sqrt(6 / fan_in)`; everything else uses `1 / sqrt(fan_in)`.
    pub fn init(spec: &NetworkSpec, seed: u64, dtype: DType) -> WeightStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = WeightStore::new();
        for unit in &spec.units {
            let input = spec.in_signature(unit.index);
            for (name, shape) in unit.layer.tensor_shapes(input) {
                let t = init_tensor(&unit.layer, name, &shape, dtype, &mut rng);
                store.insert(unit.index, name, t);
            }
        }
        store
    }

    pub fn insert(&mut self, unit: usize, name: &str, t: Tensor) {
        self.tensors.insert((unit, name.to_string()), t);
    }

    pub fn get(&self, unit: usize, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(&(unit, name.to_string()))
            .ok_or_else(|| Error::Lookup(format!("no tensor {name:?} for unit {unit}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, String), &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_elements(&self) -> u64 {
        self.tensors.values().map(|t| t.len() as u64).sum()
    }

    pub fn unit_elements(&self, unit: usize) -> u64 {
        self.tensors
            .range((unit, String::new())..(unit + 1, String::new()))
            .map(|(_, t)| t.len() as u64)
            .sum()
    }

    /// Common dtype of all tensors, if any.
    pub fn dtype(&self) -> Option<DType> {
        self.tensors.values().next().map(|t| t.dtype())
    }

    pub fn digest(&self, unit: usize, name: &str) -> Result<String> {
        Ok(io::sha256_hex(&self.get(unit, name)?.to_le_bytes()))
    }

    /// Digest over every tensor's key, shape, dtype and bytes in key order.
    pub fn section_digest(&self) -> String {
        let mut lines = String::new();
        for ((unit, name), t) in &self.tensors {
            lines.push_str(&format!(
                "{unit}/{name}:{:?}:{}:{}\n",
                t.shape(),
                t.dtype(),
                io::sha256_hex(&t.to_le_bytes())
            ));
        }
        io::sha256_hex(lines.as_bytes())
    }

    /// Checks that every unit of `spec` has exactly the tensors its layer
    /// declares, with matching shapes and one shared dtype.
    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        let mut expected = 0usize;
        for unit in &spec.units {
            let input = spec.in_signature(unit.index);
            let shapes = unit.layer.tensor_shapes(input);
            expected += shapes.len();
            for (name, shape) in shapes {
                let t = self.get(unit.index, name)?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Dimension(format!(
                        "unit {} ({}) tensor {name} has shape {:?}, expected {shape:?}",
                        unit.index,
                        unit.name,
                        t.shape()
                    )));
                }
            }
            if self.unit_elements(unit.index) != unit.param_count {
                return Err(Error::Dimension(format!(
                    "unit {} declares {} params but stores {}",
                    unit.index,
                    unit.param_count,
                    self.unit_elements(unit.index)
                )));
            }
        }
        if expected != self.tensors.len() {
            return Err(Error::Lookup(format!(
                "weight store holds {} tensors but {} declares {expected}",
                self.tensors.len(),
                spec.model_id
            )));
        }
        if let Some(d) = self.dtype() {
            if let Some(t) = self.tensors.values().find(|t| t.dtype() != d) {
                return Err(Error::Dtype {
                    expected: d.to_string(),
                    found: t.dtype().to_string(),
                });
            }
        }
        Ok(())
    }

    /// Tensors of units in `range`, reindexed so `range.start` becomes 0.
    pub fn slice(&self, range: Range<usize>) -> WeightStore {
        let tensors = self
            .tensors
            .iter()
            .filter(|((u, _), _)| range.contains(u))
            .map(|((u, n), t)| ((u - range.start, n.clone()), t.clone()))
            .collect();
        WeightStore { tensors }
    }

    /// `self` followed by `other` with its unit indices shifted by `offset`.
    pub fn concat(&self, other: &WeightStore, offset: usize) -> WeightStore {
        let mut tensors = self.tensors.clone();
        for ((u, n), t) in &other.tensors {
            tensors.insert((u + offset, n.clone()), t.clone());
        }
        WeightStore { tensors }
    }

    pub fn cast(&self, dtype: DType) -> WeightStore {
        WeightStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.cast(dtype)))
                .collect(),
        }
    }
}

fn init_tensor(
    layer: &Layer,
    name: &str,
    shape: &[usize],
    dtype: DType,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let relu_follows = match layer {
        Layer::ConvBlock { relu, .. } | Layer::Dense { relu, .. } => *relu,
        Layer::TokenBlock { .. } => name == "w1",
        _ => false,
    };
    let fan_in = |weight_shape: &[usize]| -> usize {
        match layer {
            Layer::ConvBlock { .. } | Layer::Embed { .. } => weight_shape[1..].iter().product(),
            _ => weight_shape[0],
        }
    };
    match name {
        "bn_gamma" | "ln_gamma" | "bn_var" => Tensor::ones(shape, dtype),
        "bn_beta" | "ln_beta" | "bn_mean" | "b2" => Tensor::zeros(shape, dtype),
        "pos" => Tensor::randn(shape, dtype, rng).scale(0.02),
        "weight" | "w1" | "w2" => {
            let fi = fan_in(shape).max(1) as f64;
            let bound = if relu_follows {
                (6.0 / fi).sqrt()
            } else {
                1.0 / fi.sqrt()
            };
            Tensor::uniform(shape, -bound, bound, dtype, rng)
        }
        _ => {
            // biases: bounded by the fan-in of the matching weight
            let fi = match layer {
                Layer::ConvBlock {
                    in_channels,
                    kernel,
                    ..
                } => in_channels * kernel * kernel,
                Layer::Dense { in_features, .. } | Layer::Head { in_features, .. } => *in_features,
                Layer::Embed {
                    in_channels, patch, ..
                } => in_channels * patch * patch,
                Layer::TokenBlock { dim, .. } => *dim,
                Layer::Pool { .. } => 1,
            };
            let bound = 1.0 / (fi.max(1) as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::new(shape.to_vec(), data, dtype).expect("shape from layer table")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub unit: usize,
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub blob: String,
    pub sha256: String,
}

/// `weights.json` next to one raw little-endian blob per tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub format_version: u32,
    pub model_id: String,
    pub tensors: Vec<TensorEntry>,
}

pub const WEIGHTS_MANIFEST: &str = "weights.json";

pub fn save_weights(store: &WeightStore, model_id: &str, dir: &Path) -> Result<WeightManifest> {
    io::create_dir(dir)?;
    let mut entries = Vec::with_capacity(store.len());
    for ((unit, name), t) in store.iter() {
        let blob = format!("u{unit:03}_{name}.bin");
        let bytes = t.to_le_bytes();
        io::write_bytes(&dir.join(&blob), &bytes)?;
        entries.push(TensorEntry {
            unit: *unit,
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: t.dtype(),
            blob,
            sha256: io::sha256_hex(&bytes),
        });
    }
    let manifest = WeightManifest {
        format_version: FORMAT_VERSION,
        model_id: model_id.to_string(),
        tensors: entries,
    };
    io::write_json(&dir.join(WEIGHTS_MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Loads and digest-verifies a weight directory. When `dtype` is given every
/// tensor must already be stored in it; nothing is cast silently.
pub fn load_weights(dir: &Path, dtype: Option<DType>) -> Result<(WeightManifest, WeightStore)> {
    let mpath = dir.join(WEIGHTS_MANIFEST);
    let manifest: WeightManifest = io::read_json(&mpath)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &mpath,
            format!(
                "format_version {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    let mut store = WeightStore::new();
    for e in &manifest.tensors {
        io::check_blob_name(&mpath, &e.blob)?;
        if let Some(want) = dtype {
            if e.dtype != want {
                return Err(Error::Dtype {
                    expected: want.to_string(),
                    found: format!("{} (unit {} tensor {})", e.dtype, e.unit, e.name),
                });
            }
        }
        let bpath = dir.join(&e.blob);
        if !bpath.exists() {
            return Err(Error::format(&mpath, format!("missing blob {}", e.blob)));
        }
        let bytes = io::read_bytes(&bpath)?;
        let got = io::sha256_hex(&bytes);
        if got != e.sha256 {
            return Err(Error::corruption(
                &bpath,
                format!("sha256 {got} does not match manifest {}", e.sha256),
            ));
        }
        let t = Tensor::from_le_bytes(e.shape.clone(), e.dtype, &bytes)
            .map_err(|err| Error::corruption(&bpath, err.to_string()))?;
        store.insert(e.unit, &e.name, t);
    }
    Ok((manifest, store))
}
