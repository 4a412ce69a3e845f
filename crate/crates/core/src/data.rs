//! MNIST IDX files and synthetic Gaussian blobs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// `[N×features]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
    pub provenance: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: &str, provenance: &str) -> Result<Self> {
        let (n, _) = images.dims2("dataset images")?;
        if n != labels.len() {
            return Err(Error::shape("dataset labels", images.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Index(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split: split.to_string(),
            provenance: provenance.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.images.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// The first `k` samples after a seeded shuffle (all of them if `k`
    /// exceeds the size).
    pub fn subset(&self, k: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(k);
        let mut out = self.select(&idx);
        out.provenance = format!("{} (seeded subset {k}, seed {seed})", self.provenance);
        out
    }
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse(format!("{what}: truncated header")))
}

/// Parse an IDX image file into `[N×(rows·cols)]` pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = read_u32(bytes, 0, "IDX images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse(format!(
            "IDX images: bad magic {magic:#010x} (expected {IDX_IMAGES_MAGIC:#010x})"
        )));
    }
    let n = read_u32(bytes, 4, "IDX images")? as usize;
    let rows = read_u32(bytes, 8, "IDX images")? as usize;
    let cols = read_u32(bytes, 12, "IDX images")? as usize;
    let len = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(Error::Parse(format!(
            "IDX images: truncated file, expected {len} pixel bytes, found {}",
            body.len()
        )));
    }
    let data = body[..len].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(&[n, rows * cols], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, "IDX labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse(format!(
            "IDX labels: bad magic {magic:#010x} (expected {IDX_LABELS_MAGIC:#010x})"
        )));
    }
    let n = read_u32(bytes, 4, "IDX labels")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Parse(format!(
            "IDX labels: truncated file, expected {n} labels, found {}",
            body.len()
        )));
    }
    Ok(body[..n].iter().map(|&b| b as usize).collect())
}

/// Load an IDX image/label pair. Labels are assumed to be digits (10 classes).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if images.rows() != labels.len() {
        return Err(Error::Parse(format!(
            "IDX count mismatch: {} images vs {} labels",
            images.rows(),
            labels.len()
        )));
    }
    let split = images_path.file_name().and_then(|s| s.to_str()).unwrap_or("idx").to_string();
    Dataset::new(images, labels, 10, &split, &format!("IDX {}", images_path.display()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Resolve `name` inside `dir`, accepting both the hyphenated and the dotted
/// (`train-images.idx3-ubyte`) spellings of the MNIST file names.
fn mnist_file(dir: &Path, name: &str) -> Result<PathBuf> {
    let dotted = name.replacen("-idx", ".idx", 1);
    [name, dotted.as_str()]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
        .ok_or_else(|| Error::Config(format!("MNIST file {} not found", dir.join(name).display())))
}

/// Load the standard MNIST split from `dir`.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (img, lab, tag) = match split {
        Split::Train => (MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS, "train"),
        Split::Test => (MNIST_TEST_IMAGES, MNIST_TEST_LABELS, "test"),
    };
    let mut ds = load_idx(&mnist_file(dir, img)?, &mnist_file(dir, lab)?)?;
    ds.split = tag.to_string();
    ds.provenance = format!("MNIST {tag} from {}", dir.display());
    Ok(ds)
}

/// `per_class` samples of each of `classes` isotropic unit Gaussians in the
/// plane, centered on a circle of radius `separation`.
pub fn synth_blobs(classes: usize, per_class: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(classes * per_class * 2);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
        let (cx, cy) = (separation * angle.cos(), separation * angle.sin());
        for _ in 0..per_class {
            data.push(cx + rng.sample::<f64, _>(StandardNormal));
            data.push(cy + rng.sample::<f64, _>(StandardNormal));
            labels.push(c);
        }
    }
    let images = Tensor::new(&[classes * per_class, 2], data)?;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut rng);
    let ds = Dataset::new(images, labels, classes, "synthetic", &format!("blobs(classes={classes}, separation={separation}, seed={seed})"))?;
    Ok(ds.select(&order))
}

/// Squash features into `[0, 1]` with a per-dataset affine map (for feeding
/// synthetic data to models that expect pixel ranges).
pub fn rescale_unit(ds: &Dataset) -> Dataset {
    let lo = ds.images.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ds.images.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = ds.clone();
    out.images = ds.images.map(|v| (v - lo) / span);
    out
}
