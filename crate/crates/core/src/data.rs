//! MNIST (IDX) and CIFAR-10 (binary batch) loaders and minibatch order.
//!
//! Pixels are kept as the source bytes; the normalized value of byte `b` is
//! exactly `b / 255`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::rng::derive_seed;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: bad magic {found:#010x} at offset {offset} (expected {expected:#010x})")]
    BadMagic { path: PathBuf, offset: usize, found: u32, expected: u32 },
    #[error("{path}: truncated: header promises {expected} bytes, file has {actual}")]
    Truncated { path: PathBuf, expected: usize, actual: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: length {len} is not a multiple of the {record}-byte record")]
    RecordSize { path: PathBuf, len: usize, record: usize },
    #[error("{path}: label {label} at record {index} is out of range")]
    Label { path: PathBuf, index: usize, label: u8 },
    #[error("minibatch size must be at least 1")]
    BatchSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Images `N x C x H x W` (planar) with labels in `0..10`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub split: Split,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(
        split: Split,
        (channels, height, width): (usize, usize, usize),
        pixels: Vec<u8>,
        labels: Vec<u8>,
    ) -> Result<Self, DataError> {
        let per = channels * height * width;
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(DataError::CountMismatch { images: pixels.len() / per.max(1), labels: labels.len() });
        }
        Ok(Self { split, channels, height, width, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Normalized pixel values in `[0, 1]`.
    pub fn image(&self, i: usize) -> Vec<f64> {
        self.image_bytes(i).iter().map(|&b| b as f64 / 255.0).collect()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// The first `n` items (all of them if `n` is larger).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            pixels: self.pixels[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }
}

/// Inverse of the `b / 255` normalization.
pub fn encode_pixel(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated { path: path.to_path_buf(), expected: offset + 4, actual: bytes.len() })
}

/// Parse an IDX image file: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic { path: path.to_path_buf(), offset: 0, found: magic, expected: IDX_IMAGES_MAGIC });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(DataError::Truncated { path: path.to_path_buf(), expected, actual: bytes.len() });
    }
    Ok((n, rows, cols, bytes[16..expected].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>, DataError> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic { path: path.to_path_buf(), offset: 0, found: magic, expected: IDX_LABELS_MAGIC });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(DataError::Truncated { path: path.to_path_buf(), expected, actual: bytes.len() });
    }
    let labels = bytes[8..expected].to_vec();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= NUM_CLASSES) {
        return Err(DataError::Label { path: path.to_path_buf(), index, label });
    }
    Ok(labels)
}

fn load_idx_pair(dir: &Path, images: &str, labels: &str, split: Split) -> Result<Dataset, DataError> {
    let ip = dir.join(images);
    let lp = dir.join(labels);
    let (n, rows, cols, pixels) = parse_idx_images(&read(&ip)?, &ip)?;
    let labels = parse_idx_labels(&read(&lp)?, &lp)?;
    if n != labels.len() {
        return Err(DataError::CountMismatch { images: n, labels: labels.len() });
    }
    Dataset::new(split, (1, rows, cols), pixels, labels)
}

/// Load `train-*` and `t10k-*` IDX files (uncompressed) from `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    let train = load_idx_pair(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte", Split::Train)?;
    let test = load_idx_pair(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", Split::Test)?;
    Ok((train, test))
}

/// Parse CIFAR-10 binary records: one label byte, then 1024 bytes each of
/// the R, G and B planes.
pub fn parse_cifar_batch(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<u8>), DataError> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(DataError::RecordSize { path: path.to_path_buf(), len: bytes.len(), record: CIFAR_RECORD });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (index, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= NUM_CLASSES {
            return Err(DataError::Label { path: path.to_path_buf(), index, label: rec[0] });
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

fn load_cifar_files(dir: &Path, names: &[String], split: Split) -> Result<Dataset, DataError> {
    let (mut pixels, mut labels) = (Vec::new(), Vec::new());
    for name in names {
        let p = dir.join(name);
        let (px, lb) = parse_cifar_batch(&read(&p)?, &p)?;
        pixels.extend(px);
        labels.extend(lb);
    }
    Dataset::new(split, (3, 32, 32), pixels, labels)
}

/// Load `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    let train_names: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    let train = load_cifar_files(dir, &train_names, Split::Train)?;
    let test = load_cifar_files(dir, &["test_batch.bin".to_string()], Split::Test)?;
    Ok((train, test))
}

/// Shuffled minibatches of `0..n` keyed by `(seed, epoch)`. The final
/// partial batch is dropped.
pub fn minibatches(n: usize, size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>, DataError> {
    if size == 0 {
        return Err(DataError::BatchSize);
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch));
    order.shuffle(&mut rng);
    Ok(order.chunks_exact(size).map(|c| c.to_vec()).collect())
}
