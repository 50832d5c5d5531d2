//! Activation tapes: per-unit activations of one model for one input batch,
//! stored as raw little-endian blobs next to a `manifest.json`.
//!
//! A tape set is a directory whose subdirectories are tapes, one per
//! repeat. Shapes are stored as captured, including the batch axis.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::netgraph::Network;
use crate::similarity::{
    capture_all, similarity_from_captures, BatchSource, RepeatCaptures, SimilarityMatrix,
};
use crate::tensor::{DType, Tensor};

pub const TAPE_VERSION: u32 = 1;
pub const TAPE_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchMeta {
    pub size: usize,
    pub seed: u64,
    pub repeat_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapeUnit {
    pub index: usize,
    pub name: String,
    pub kind: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub blob: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapeManifest {
    pub format_version: u32,
    pub model_id: String,
    pub dataset_id: String,
    pub byte_order: String,
    pub batch: BatchMeta,
    pub units: Vec<TapeUnit>,
    /// Free-form description of input preprocessing, if the producer
    /// recorded one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocessing: Option<serde_json::Value>,
}

/// A loaded, digest-verified tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTape {
    pub manifest: TapeManifest,
    pub activations: Vec<Tensor>,
}

impl ActivationTape {
    pub fn to_captures(&self) -> RepeatCaptures {
        RepeatCaptures {
            model_id: self.manifest.model_id.clone(),
            unit_names: self.manifest.units.iter().map(|u| u.name.clone()).collect(),
            activations: self.activations.clone(),
        }
    }

    fn pairing_key(&self) -> (String, u64, usize) {
        let m = &self.manifest;
        (m.dataset_id.clone(), m.batch.seed, m.batch.repeat_index)
    }
}

/// One unit's activation to be written.
#[derive(Debug, Clone)]
pub struct CapturedUnit {
    pub index: usize,
    pub name: String,
    pub kind: String,
    pub activation: Tensor,
}

fn blob_name(index: usize, name: &str, dtype: DType) -> String {
    let clean: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("u{index:03}_{clean}.{dtype}")
}

/// Writes one tape directory. Every activation's leading extent must equal
/// `batch.size`.
pub fn write_tape(
    dir: &Path,
    model_id: &str,
    dataset_id: &str,
    batch: BatchMeta,
    units: &[CapturedUnit],
) -> Result<TapeManifest> {
    if units.is_empty() {
        return Err(Error::Contract("a tape needs at least one unit".into()));
    }
    io::create_dir(dir)?;
    let mut entries = Vec::with_capacity(units.len());
    for u in units {
        let shape = u.activation.shape().to_vec();
        if shape.len() < 2 || shape[0] != batch.size {
            return Err(Error::Dimension(format!(
                "unit {} activation {shape:?} does not lead with batch size {}",
                u.name, batch.size
            )));
        }
        let blob = blob_name(u.index, &u.name, u.activation.dtype());
        let bytes = u.activation.to_le_bytes();
        io::write_bytes(&dir.join(&blob), &bytes)?;
        entries.push(TapeUnit {
            index: u.index,
            name: u.name.clone(),
            kind: u.kind.clone(),
            shape,
            dtype: u.activation.dtype(),
            blob,
            sha256: io::sha256_hex(&bytes),
        });
    }
    let manifest = TapeManifest {
        format_version: TAPE_VERSION,
        model_id: model_id.to_string(),
        dataset_id: dataset_id.to_string(),
        byte_order: "little".into(),
        batch,
        units: entries,
        preprocessing: None,
    };
    io::write_json(&dir.join(TAPE_MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Reads a tape, verifying every digest before decoding.
pub fn read_tape(dir: &Path) -> Result<ActivationTape> {
    let mpath = dir.join(TAPE_MANIFEST);
    let manifest: TapeManifest = io::read_json(&mpath)?;
    if manifest.format_version != TAPE_VERSION {
        return Err(Error::format(
            &mpath,
            format!(
                "tape format_version {} found, {TAPE_VERSION} expected",
                manifest.format_version
            ),
        ));
    }
    if manifest.byte_order != "little" {
        return Err(Error::format(
            &mpath,
            format!(
                "byte_order {:?} unsupported, only \"little\"",
                manifest.byte_order
            ),
        ));
    }
    if manifest.units.is_empty() {
        return Err(Error::format(&mpath, "tape lists no units"));
    }
    let mut activations = Vec::with_capacity(manifest.units.len());
    for (pos, u) in manifest.units.iter().enumerate() {
        if pos > 0 && u.index <= manifest.units[pos - 1].index {
            return Err(Error::format(&mpath, "unit indices must increase"));
        }
        io::check_blob_name(&mpath, &u.blob)?;
        if u.shape.len() < 2 || u.shape[0] != manifest.batch.size || u.shape.contains(&0) {
            return Err(Error::format(
                &mpath,
                format!(
                    "unit {} shape {:?} inconsistent with batch size {}",
                    u.name, u.shape, manifest.batch.size
                ),
            ));
        }
        let bpath = dir.join(&u.blob);
        if !bpath.exists() {
            return Err(Error::format(&mpath, format!("missing blob {}", u.blob)));
        }
        let bytes = io::read_bytes(&bpath)?;
        let got = io::sha256_hex(&bytes);
        if got != u.sha256 {
            return Err(Error::corruption(
                &bpath,
                format!("sha256 {got} does not match manifest {}", u.sha256),
            ));
        }
        let t = Tensor::from_le_bytes(u.shape.clone(), u.dtype, &bytes)
            .map_err(|e| Error::corruption(&bpath, e.to_string()))?;
        activations.push(t);
    }
    Ok(ActivationTape {
        manifest,
        activations,
    })
}

/// Tape subdirectories of `dir`, sorted by name.
pub fn tape_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.join(TAPE_MANIFEST).is_file() {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::format(
            dir,
            "no tapes found (expected subdirectories with manifest.json)",
        ));
    }
    Ok(out)
}

pub fn read_tape_set(dir: &Path) -> Result<Vec<ActivationTape>> {
    tape_dirs(dir)?.iter().map(|p| read_tape(p)).collect()
}

/// Captures every unit of `net` for `repeats` batches and writes one tape
/// per repeat under `dir/repeat_XXX`.
pub fn capture_tapes(
    net: &Network,
    source: &mut dyn BatchSource,
    repeats: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut out = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let batch = source.batch(r)?;
        let caps = capture_all(net, &batch.images)?;
        let units: Vec<CapturedUnit> = net
            .spec
            .units
            .iter()
            .zip(caps.activations)
            .map(|(u, a)| CapturedUnit {
                index: u.index,
                name: u.name.clone(),
                kind: u.kind().as_str().to_string(),
                activation: a,
            })
            .collect();
        let path = dir.join(format!("repeat_{r:03}"));
        let meta = BatchMeta {
            size: batch.images.shape()[0],
            seed: batch.seed,
            repeat_index: batch.repeat_index,
        };
        write_tape(&path, &net.spec.model_id, source.dataset_id(), meta, &units)?;
        out.push(path);
    }
    Ok(out)
}

/// Pairs tapes of the two models by `(dataset_id, seed, repeat_index)` and
/// averages CKA exactly as the live path does.
pub fn similarity_from_tapes(
    front: &[ActivationTape],
    back: &[ActivationTape],
) -> Result<SimilarityMatrix> {
    let index =
        |tapes: &[ActivationTape], side: &str| -> Result<BTreeMap<(String, u64, usize), usize>> {
            let mut m = BTreeMap::new();
            for (i, t) in tapes.iter().enumerate() {
                if m.insert(t.pairing_key(), i).is_some() {
                    return Err(Error::Pairing(format!(
                        "{side} tapes repeat {:?} more than once",
                        t.pairing_key()
                    )));
                }
            }
            Ok(m)
        };
    let fi = index(front, "front")?;
    let bi = index(back, "back")?;
    let only_front: Vec<_> = fi.keys().filter(|k| !bi.contains_key(*k)).collect();
    let only_back: Vec<_> = bi.keys().filter(|k| !fi.contains_key(*k)).collect();
    if !only_front.is_empty() || !only_back.is_empty() {
        let fmt = |v: &[&(String, u64, usize)]| {
            v.iter()
                .map(|(d, s, r)| format!("{d}/seed{s}/repeat{r}"))
                .collect::<Vec<_>>()
                .join(", ")
        };
        return Err(Error::Pairing(format!(
            "unpaired repeats: missing on back side [{}], missing on front side [{}]",
            fmt(&only_front),
            fmt(&only_back)
        )));
    }
    let Some(first) = fi.keys().next() else {
        return Err(Error::Pairing("no tapes given".into()));
    };
    if fi.keys().any(|k| k.0 != first.0) {
        return Err(Error::Pairing("tapes mix several datasets".into()));
    }
    let repeats: Vec<usize> = fi.keys().map(|k| k.2).collect();
    if repeats.iter().enumerate().any(|(i, &r)| i != r) {
        return Err(Error::Pairing(format!(
            "repeat indices must be 0..{} without gaps, found {repeats:?}",
            repeats.len()
        )));
    }
    let mut pairs = Vec::with_capacity(fi.len());
    for (key, &i) in &fi {
        let (f, b) = (&front[i], &back[bi[key]]);
        if f.manifest.batch.size != b.manifest.batch.size {
            return Err(Error::Pairing(format!(
                "repeat {}: batch sizes differ ({} vs {})",
                key.2, f.manifest.batch.size, b.manifest.batch.size
            )));
        }
        pairs.push((f.to_captures(), b.to_captures()));
    }
    similarity_from_captures(&first.0, &pairs)
}
