use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::{DType, Tensor};

pub const DATA_MANIFEST: &str = "data.json";
const DATA_VERSION: u32 = 1;

/// Images `[n, c, h, w]` with one integer label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Split> {
        if images.rank() < 2 || images.shape()[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        Ok(Split { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    /// Rows `idx` of the split, in that order.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if idx.is_empty() {
            return Err(Error::Data("cannot gather an empty batch".into()));
        }
        let s = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * s);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Range(format!(
                    "sample {i} out of range for split of {}",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.images.data()[i * s..(i + 1) * s]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        Ok((Tensor::new(shape, data, self.images.dtype())?, labels))
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut c = vec![0; num_classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub num_classes: usize,
    /// `[c, h, w]`
    pub image_shape: [usize; 3],
    pub seed: u64,
    pub noise: f64,
    pub train: Split,
    pub test: Split,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        for (name, split) in [("train", &self.train), ("test", &self.test)] {
            if split.images.shape()[1..] != self.image_shape {
                return Err(Error::Dimension(format!(
                    "{name} images {:?} do not match shape {:?}",
                    split.images.shape(),
                    self.image_shape
                )));
            }
            if let Some(&y) = split.labels.iter().find(|&&y| y >= self.num_classes) {
                return Err(Error::Data(format!(
                    "{name} label {y} outside [0, {})",
                    self.num_classes
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of the class-prototype generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// `[c, h, w]`
    pub image_shape: [usize; 3],
    /// Standard deviation of the per-sample noise; prototypes have unit RMS.
    pub noise: f64,
}

impl SyntheticConfig {
    pub fn new(
        seed: u64,
        num_classes: usize,
        samples_per_class: usize,
        image_shape: [usize; 3],
    ) -> Self {
        SyntheticConfig {
            seed,
            num_classes,
            samples_per_class,
            image_shape,
            noise: 1.0,
        }
    }

    pub fn dataset_id(&self) -> String {
        let [c, h, w] = self.image_shape;
        format!(
            "synthetic-s{}-k{}-n{}-{c}x{h}x{w}-sigma{}",
            self.seed, self.num_classes, self.samples_per_class, self.noise
        )
    }

    /// Per-class training count; the rest of each class goes to test.
    pub fn train_per_class(&self) -> usize {
        let n = self.samples_per_class;
        (n * 4 / 5).clamp(1, n.max(2) - 1)
    }
}

/// Smooth, unit-RMS random images, one per class.
pub fn class_prototypes(cfg: &SyntheticConfig) -> Vec<Vec<f64>> {
    let [c, h, w] = cfg.image_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.num_classes)
        .map(|_| {
            let raw: Vec<f64> = (0..c * h * w)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            // 3x3 box blur, truncated at the border, gives spatially correlated
            // structure that convolutions can pick up.
            let mut p = vec![0.0; raw.len()];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        let mut n = 0.0;
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let yy = y as i64 + dy;
                                let xx = x as i64 + dx;
                                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                    acc += raw[(ch * h + yy as usize) * w + xx as usize];
                                    n += 1.0;
                                }
                            }
                        }
                        p[(ch * h + y) * w + x] = acc / n;
                    }
                }
            }
            let rms = (p.iter().map(|v| v * v).sum::<f64>() / p.len() as f64).sqrt();
            if rms > 0.0 {
                p.iter_mut().for_each(|v| *v /= rms);
            }
            p
        })
        .collect()
}

/// Gaussian class prototypes plus per-sample noise, split 80/20 within
/// every class. Images are stored as f32.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    let [c, h, w] = cfg.image_shape;
    if cfg.num_classes == 0 || cfg.samples_per_class < 2 || c * h * w == 0 {
        return Err(Error::Contract(
            "need at least one class, two samples per class and positive image extents".into(),
        ));
    }
    if cfg.num_classes > 256 {
        return Err(Error::Contract("at most 256 classes (u8 labels)".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Contract(format!(
            "noise must be >= 0, got {}",
            cfg.noise
        )));
    }
    let protos = class_prototypes(cfg);
    let n_train = cfg.train_per_class();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let (mut tr, mut trl, mut te, mut tel) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (k, p) in protos.iter().enumerate() {
        for s in 0..cfg.samples_per_class {
            let (dst, lab) = if s < n_train {
                (&mut tr, &mut trl)
            } else {
                (&mut te, &mut tel)
            };
            for &v in p {
                let z: f64 = StandardNormal.sample(&mut rng);
                dst.push(v + cfg.noise * z);
            }
            lab.push(k);
        }
    }
    let split = |data: Vec<f64>, labels: Vec<usize>| -> Result<Split> {
        let images = Tensor::new(vec![labels.len(), c, h, w], data, DType::F32)?;
        Split::new(images, labels)
    };
    Ok(Dataset {
        id: cfg.dataset_id(),
        num_classes: cfg.num_classes,
        image_shape: cfg.image_shape,
        seed: cfg.seed,
        noise: cfg.noise,
        train: split(tr, trl)?,
        test: split(te, tel)?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Counts {
    train: usize,
    test: usize,
    train_per_class: Vec<usize>,
    test_per_class: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DataManifest {
    format_version: u32,
    id: String,
    num_classes: usize,
    shape: [usize; 3],
    counts: Counts,
    seed: u64,
    noise: f64,
    blobs: Vec<BlobEntry>,
}

const BLOBS: [&str; 4] = [
    "train_images.f32",
    "train_labels.u8",
    "test_images.f32",
    "test_labels.u8",
];

/// Writes `data.json` plus raw little-endian blobs.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    io::create_dir(dir)?;
    let mut blobs = Vec::new();
    for (split, names) in [(&ds.train, &BLOBS[0..2]), (&ds.test, &BLOBS[2..4])] {
        let n = split.len();
        let img = split.images.cast(DType::F32).to_le_bytes();
        let lab: Vec<u8> = split.labels.iter().map(|&y| y as u8).collect();
        let [c, h, w] = ds.image_shape;
        for (name, bytes, dtype, shape) in [
            (names[0], img, "f32", vec![n, c, h, w]),
            (names[1], lab, "u8", vec![n]),
        ] {
            io::write_bytes(&dir.join(name), &bytes)?;
            blobs.push(BlobEntry {
                name: name.to_string(),
                dtype: dtype.to_string(),
                shape,
                sha256: io::sha256_hex(&bytes),
            });
        }
    }
    let m = DataManifest {
        format_version: DATA_VERSION,
        id: ds.id.clone(),
        num_classes: ds.num_classes,
        shape: ds.image_shape,
        counts: Counts {
            train: ds.train.len(),
            test: ds.test.len(),
            train_per_class: ds.train.class_counts(ds.num_classes),
            test_per_class: ds.test.class_counts(ds.num_classes),
        },
        seed: ds.seed,
        noise: ds.noise,
        blobs,
    };
    io::write_json(&dir.join(DATA_MANIFEST), &m)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(DATA_MANIFEST);
    let m: DataManifest = io::read_json(&mpath)?;
    if m.format_version != DATA_VERSION {
        return Err(Error::format(
            &mpath,
            format!(
                "format_version {} is not supported (expected {DATA_VERSION})",
                m.format_version
            ),
        ));
    }
    let blob = |name: &str| -> Result<(Vec<u8>, &BlobEntry)> {
        let e = m
            .blobs
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::format(&mpath, format!("missing blob entry {name}")))?;
        let p = dir.join(name);
        if !p.exists() {
            return Err(Error::format(&mpath, format!("missing blob {name}")));
        }
        let bytes = io::read_bytes(&p)?;
        let got = io::sha256_hex(&bytes);
        if got != e.sha256 {
            return Err(Error::corruption(
                &p,
                format!("sha256 {got} does not match manifest {}", e.sha256),
            ));
        }
        Ok((bytes, e))
    };
    let [c, h, w] = m.shape;
    let mut splits = Vec::new();
    for names in [&BLOBS[0..2], &BLOBS[2..4]] {
        let (img, ie) = blob(names[0])?;
        let (lab, _) = blob(names[1])?;
        let n = lab.len();
        let labels: Vec<usize> = lab.iter().map(|&y| y as usize).collect();
        let images = Tensor::from_le_bytes(ie.shape.clone(), DType::F32, &img)
            .map_err(|e| Error::corruption(dir.join(names[0]), e.to_string()))?;
        if images.shape() != [n, c, h, w] {
            return Err(Error::format(
                &mpath,
                format!("{} shape disagrees with labels", names[0]),
            ));
        }
        splits.push(Split { images, labels });
    }
    let test = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    let ds = Dataset {
        id: m.id,
        num_classes: m.num_classes,
        image_shape: m.shape,
        seed: m.seed,
        noise: m.noise,
        train,
        test,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SyntheticConfig {
        SyntheticConfig::new(7, 4, 10, [2, 4, 4])
    }

    #[test]
    fn counts_are_exact_and_stratified() {
        let ds = gen_synthetic(&cfg()).unwrap();
        assert_eq!(ds.train.class_counts(4), vec![8; 4]);
        assert_eq!(ds.test.class_counts(4), vec![2; 4]);
        assert_eq!(ds.train.images.shape(), &[32, 2, 4, 4]);
        assert_eq!(ds.train.images.dtype(), DType::F32);
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = gen_synthetic(&cfg()).unwrap();
        let b = gen_synthetic(&cfg()).unwrap();
        assert_eq!(a, b);
        save_dataset(&a, &dir.path().join("a")).unwrap();
        save_dataset(&b, &dir.path().join("b")).unwrap();
        for f in BLOBS.iter().chain([&DATA_MANIFEST]) {
            let x = std::fs::read(dir.path().join("a").join(f)).unwrap();
            let y = std::fs::read(dir.path().join("b").join(f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
        let mut other = cfg();
        other.seed = 8;
        assert_ne!(gen_synthetic(&other).unwrap().train, a.train);
    }

    #[test]
    fn prototypes_are_distinct() {
        let p = class_prototypes(&SyntheticConfig::new(1, 10, 1, [3, 8, 8]));
        let mut min = f64::INFINITY;
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                let d: f64 = p[i].iter().zip(&p[j]).map(|(a, b)| (a - b).powi(2)).sum();
                min = min.min(d);
            }
        }
        assert!(min > 0.0);
    }

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_synthetic(&cfg()).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
        let p = dir.path().join("test_labels.u8");
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] ^= 1;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::Corruption { .. })
        ));
    }

    #[test]
    fn gather_picks_rows() {
        let ds = gen_synthetic(&cfg()).unwrap();
        let (x, y) = ds.train.gather(&[9, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 2, 4, 4]);
        assert_eq!(y, vec![ds.train.labels[9], ds.train.labels[0]]);
        assert_eq!(x.data()[..32], ds.train.images.data()[9 * 32..10 * 32]);
    }

    #[test]
    fn rejects_zero_counts() {
        let mut c = cfg();
        c.samples_per_class = 1;
        assert!(matches!(gen_synthetic(&c), Err(Error::Contract(_))));
    }
}
