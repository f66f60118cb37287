//! Dataset ingestion and synthesis: MNIST IDX files, the Gaussian noise
//! protocol, and labeled Gaussian-mixture fixtures for fast tests.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {err}")]
    Io { path: PathBuf, err: String },
    #[error("{path}: bad magic {got:#010x} at byte 0, expected {expected:#010x}")]
    BadMagic { path: PathBuf, got: u32, expected: u32 },
    #[error("{path}: truncated at byte offset {offset}")]
    Truncated { path: PathBuf, offset: usize },
    #[error("images hold {images} items but labels hold {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at row {row} is not below class count {classes}")]
    LabelRange { row: usize, label: usize, classes: usize },
    #[error("covariance for class {class} is not positive semi-definite")]
    NotPsd { class: usize },
    #[error("mixture spec: {0}")]
    BadSpec(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::Io { path: path.to_path_buf(), err: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Feature matrix plus labels. Features are f64; straight from IDX they are
/// pixel/255 in [0,1], and the noise protocol may push them outside.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    /// Where the values came from, seeds included.
    pub provenance: String,
}

impl Dataset {
    pub fn feature_rows(&self, rows: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            out.extend_from_slice(&self.features[r * self.cols..(r + 1) * self.cols]);
        }
        out
    }

    pub fn label_rows(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&r| self.labels[r]).collect()
    }
}

/// Parse a big-endian IDX image file: magic, count, rows, cols, raw bytes.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    let mut r = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let magic = r.read_u32::<BigEndian>().map_err(|e| io_err(path, e))?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::BadMagic { path: path.to_path_buf(), got: magic, expected: IMAGES_MAGIC });
    }
    let count = r.read_u32::<BigEndian>().map_err(|e| io_err(path, e))? as usize;
    let rows = r.read_u32::<BigEndian>().map_err(|e| io_err(path, e))? as usize;
    let cols = r.read_u32::<BigEndian>().map_err(|e| io_err(path, e))? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    r.read_exact(&mut pixels)
        .map_err(|_| DataError::Truncated { path: path.to_path_buf(), offset: 16 })?;
    Ok((count, rows, cols, pixels))
}

/// Parse a big-endian IDX label file: magic, count, raw bytes.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut r = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let magic = r.read_u32::<BigEndian>().map_err(|e| io_err(path, e))?;
    if magic != LABELS_MAGIC {
        return Err(DataError::BadMagic { path: path.to_path_buf(), got: magic, expected: LABELS_MAGIC });
    }
    let count = r.read_u32::<BigEndian>().map_err(|e| io_err(path, e))? as usize;
    let mut labels = vec![0u8; count];
    r.read_exact(&mut labels)
        .map_err(|_| DataError::Truncated { path: path.to_path_buf(), offset: 8 })?;
    Ok(labels)
}

/// Write an IDX image file bit-exactly (round-trips with `read_idx_images`).
pub fn write_idx_images(path: &Path, count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    w.write_u32::<BigEndian>(IMAGES_MAGIC).map_err(|e| io_err(path, e))?;
    w.write_u32::<BigEndian>(count as u32).map_err(|e| io_err(path, e))?;
    w.write_u32::<BigEndian>(rows as u32).map_err(|e| io_err(path, e))?;
    w.write_u32::<BigEndian>(cols as u32).map_err(|e| io_err(path, e))?;
    w.write_all(pixels).map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    w.write_u32::<BigEndian>(LABELS_MAGIC).map_err(|e| io_err(path, e))?;
    w.write_u32::<BigEndian>(labels.len() as u32).map_err(|e| io_err(path, e))?;
    w.write_all(labels).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Load an image/label IDX pair into a dataset with pixels divided by 255.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset, DataError> {
    let (count, rows, cols, pixels) = read_idx_images(images_path)?;
    let labels_raw = read_idx_labels(labels_path)?;
    if labels_raw.len() != count {
        return Err(DataError::CountMismatch { images: count, labels: labels_raw.len() });
    }
    let features: Vec<f64> = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = labels_raw.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        features,
        rows: count,
        cols: rows * cols,
        labels,
        classes,
        split,
        provenance: format!("idx:{}", images_path.display()),
    })
}

/// Add i.i.d. N(0,1) noise to every feature, once, deterministically per
/// seed. Values are not re-clipped afterwards.
pub fn add_gaussian_noise(data: &Dataset, seed: u64) -> Dataset {
    let mut rng = seeds::stream(seed, "pixel-noise", 0);
    let mut out = data.clone();
    for v in out.features.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += z;
    }
    out.provenance = format!("{}+noise(seed={seed})", data.provenance);
    out
}

/// One mixture component: mean vector and a full covariance matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSpec {
    pub mean: Vec<f64>,
    /// Row-major d x d covariance, must be positive semi-definite.
    pub cov: Vec<Vec<f64>>,
    /// Relative sampling weight (normalized over classes).
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

/// Labeled Gaussian-mixture dataset description (JSON-loadable).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub classes: Vec<ClassSpec>,
    pub n: usize,
}

/// Cholesky-like factorization that tolerates semi-definite matrices;
/// rejects anything with a negative pivot beyond rounding.
fn psd_factor(cov: &[f64], d: usize, class: usize) -> Result<Vec<f64>, DataError> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = cov[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s < -1e-10 {
                    return Err(DataError::NotPsd { class });
                }
                l[i * d + i] = s.max(0.0).sqrt();
            } else if l[j * d + j] > 0.0 {
                l[i * d + j] = s / l[j * d + j];
            } else if s.abs() > 1e-10 {
                return Err(DataError::NotPsd { class });
            }
        }
    }
    Ok(l)
}

/// Sample a labeled Gaussian mixture, deterministic per seed. Class labels
/// are drawn by weight, then features from N(mean_y, cov_y).
pub fn synth_mixture(spec: &MixtureSpec, seed: u64) -> Result<Dataset, DataError> {
    if spec.classes.is_empty() || spec.n == 0 {
        return Err(DataError::BadSpec("need at least one class and n >= 1".into()));
    }
    let d = spec.classes[0].mean.len();
    let mut factors = Vec::new();
    for (ci, class) in spec.classes.iter().enumerate() {
        if class.mean.len() != d || class.cov.len() != d || class.cov.iter().any(|r| r.len() != d) {
            return Err(DataError::BadSpec(format!("class {ci}: inconsistent dimensions")));
        }
        if class.weight <= 0.0 {
            return Err(DataError::BadSpec(format!("class {ci}: weight must be positive")));
        }
        let flat: Vec<f64> = class.cov.iter().flatten().copied().collect();
        factors.push(psd_factor(&flat, d, ci)?);
    }
    let total_weight: f64 = spec.classes.iter().map(|c| c.weight).sum();
    let mut rng = seeds::stream(seed, "synth-mixture", 0);
    let mut features = Vec::with_capacity(spec.n * d);
    let mut labels = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let mut u: f64 = rng.random::<f64>() * total_weight;
        let mut y = spec.classes.len() - 1;
        for (ci, class) in spec.classes.iter().enumerate() {
            if u < class.weight {
                y = ci;
                break;
            }
            u -= class.weight;
        }
        let z: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let l = &factors[y];
        for i in 0..d {
            let mut v = spec.classes[y].mean[i];
            for k in 0..=i {
                v += l[i * d + k] * z[k];
            }
            features.push(v);
        }
        labels.push(y);
    }
    Ok(Dataset {
        features,
        rows: spec.n,
        cols: d,
        labels,
        classes: spec.classes.len(),
        split: Split::Train,
        provenance: format!("synth(seed={seed})"),
    })
}

/// File names of the standard MNIST IDX pair for a split.
pub fn mnist_file_names(split: Split) -> (&'static str, &'static str) {
    match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }
}

/// Load one MNIST split from a directory laid out with the official names.
pub fn load_mnist_split(dir: &Path, split: Split) -> Result<Dataset, DataError> {
    let (images, labels) = mnist_file_names(split);
    load_idx(&dir.join(images), &dir.join(labels), split)
}
