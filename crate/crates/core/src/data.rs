//! MNIST IDX loading and deterministic batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;
pub const TRAIN_SIZE: usize = 55_000;
pub const VALIDATION_SIZE: usize = 5_000;

/// SHA-256 of the canonical uncompressed `train-labels-idx1-ubyte`.
pub const CANONICAL_TRAIN_LABELS_SHA256: &str =
    "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5";

/// Normalized images with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    images: Vec<f64>,
    labels: Vec<u8>,
    sample_shape: [usize; 3],
}

impl Split {
    pub fn new(images: Vec<f64>, labels: Vec<u8>, sample_shape: [usize; 3]) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if images.len() != labels.len() * per {
            return Err(Error::Data(format!(
                "{} pixel values for {} samples of shape {:?}",
                images.len(),
                labels.len(),
                sample_shape
            )));
        }
        Ok(Split { images, labels, sample_shape })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        self.sample_shape
    }

    fn per_sample(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// Gathers the listed samples into a `[B, C, H, W]` tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.per_sample();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images[i * per..(i + 1) * per]);
        }
        let [c, h, w] = self.sample_shape;
        let t = Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape");
        (t, indices.iter().map(|&i| self.labels[i] as usize).collect())
    }

    /// Contiguous range of samples as a new split.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Split {
        let per = self.per_sample();
        Split {
            images: self.images[range.start * per..range.end * per].to_vec(),
            labels: self.labels[range].to_vec(),
            sample_shape: self.sample_shape,
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Split {
        self.slice(0..n.min(self.len()))
    }
}

#[derive(Clone, Debug)]
pub struct DatasetHandle {
    pub train: Split,
    pub validation: Split,
    pub test: Split,
    pub mean: f64,
    pub std: f64,
    /// SHA-256 of the raw training-label file as loaded.
    pub train_labels_sha256: String,
}

impl DatasetHandle {
    pub fn is_canonical(&self) -> bool {
        self.train_labels_sha256 == CANONICAL_TRAIN_LABELS_SHA256
    }

    /// Truncates every split; used for quick runs and smoke tests.
    pub fn truncated(&self, train: usize, validation: usize, test: usize) -> DatasetHandle {
        DatasetHandle {
            train: self.train.take(train),
            validation: self.validation.take(validation),
            test: self.test.take(test),
            ..self.clone()
        }
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Data(format!("{what}: truncated header")))
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Data(format!("images: bad magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Data(format!("images: bad dimensions {rows}x{cols}")));
    }
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Data(format!(
            "images: header promises {n}x{rows}x{cols} pixels, file holds {}",
            body.len()
        )));
    }
    Ok((n, rows, cols, body))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Data(format!("labels: bad magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Data(format!("labels: header promises {n} labels, file holds {}", body.len())));
    }
    if let Some(bad) = body.iter().find(|&&l| l > 9) {
        return Err(Error::Data(format!("labels: value {bad} out of range")));
    }
    Ok(body)
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    std::fs::read(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn load_pair(dir: &Path, prefix: &str) -> Result<(Split, Vec<u8>)> {
    let img_bytes = read(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let lbl_bytes = read(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes)?;
    let labels = parse_idx_labels(&lbl_bytes)?;
    if labels.len() != n {
        return Err(Error::Data(format!("{prefix}: {n} images but {} labels", labels.len())));
    }
    let images = pixels
        .iter()
        .map(|&p| (p as f64 / 255.0 - MNIST_MEAN) / MNIST_STD)
        .collect();
    Ok((Split::new(images, labels.to_vec(), [1, rows, cols])?, lbl_bytes))
}

/// Loads the four uncompressed IDX files from `dir`. The 60k training
/// images are split into the first 55k for training and the last 5k for
/// validation.
pub fn load_mnist(dir: &Path) -> Result<DatasetHandle> {
    let (full, label_bytes) = load_pair(dir, "train")?;
    let (test, _) = load_pair(dir, "t10k")?;
    if full.len() != TRAIN_SIZE + VALIDATION_SIZE {
        return Err(Error::Data(format!(
            "expected {} training samples, found {}",
            TRAIN_SIZE + VALIDATION_SIZE,
            full.len()
        )));
    }
    let digest = Sha256::digest(&label_bytes);
    let train_labels_sha256 = digest.iter().map(|b| format!("{b:02x}")).collect();
    Ok(DatasetHandle {
        train: full.slice(0..TRAIN_SIZE),
        validation: full.slice(TRAIN_SIZE..TRAIN_SIZE + VALIDATION_SIZE),
        test,
        mean: MNIST_MEAN,
        std: MNIST_STD,
        train_labels_sha256,
    })
}

/// Sample order for one epoch. Depends only on `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}
