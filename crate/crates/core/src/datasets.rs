//! Datasets: the MNIST IDX loader, a synthetic Gaussian-blob fixture, and
//! the Dirichlet non-IID client partitioner.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose, Rng};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Image shape `(channels, width, height)`.
pub type Dims = (usize, usize, usize);

/// Labelled images with pixels in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(n, c, w, h)`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::shape(format!(
                "dataset images must be (n, c, w, h), got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::contract(format!("label {bad} >= class count {classes}")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> Dims {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Sample indices grouped by class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }
}

/// Linear map of a pixel byte onto `[-1, 1]`.
pub fn byte_to_unit(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Inverse of [`byte_to_unit`], rounding to the nearest byte.
pub fn unit_to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

// -------------------------------------------------------------------------
// IDX

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(format!("{what}: truncated header")))
}

/// Parses in-memory IDX image and label files.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!(
            "images: bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;

    let magic = be_u32(labels, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!(
            "labels: bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let label_count = be_u32(labels, 4, "labels")? as usize;
    if label_count != count {
        return Err(Error::format(format!("{count} images but {label_count} labels")));
    }

    let pixels = count * rows * cols;
    let body = images
        .get(16..16 + pixels)
        .ok_or_else(|| Error::format(format!("images: truncated, expected {pixels} pixel bytes")))?;
    let label_bytes = labels
        .get(8..8 + count)
        .ok_or_else(|| Error::format(format!("labels: truncated, expected {count} label bytes")))?;

    let data = body.iter().map(|&b| byte_to_unit(b)).collect();
    let images = Tensor::new(vec![count, 1, rows, cols], data)?;
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(images, labels, classes)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels)
}

/// Serializes a single-channel dataset to IDX bytes `(images, labels)`.
pub fn encode_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (c, w, h) = ds.dims();
    if c != 1 {
        return Err(Error::format("IDX images hold a single channel"));
    }
    let n = ds.len() as u32;
    let mut images = Vec::with_capacity(16 + ds.images.numel());
    for v in [IDX_IMAGES_MAGIC, n, w as u32, h as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(ds.images.data().iter().map(|&v| unit_to_byte(v)));
    let mut labels = Vec::with_capacity(8 + ds.len());
    for v in [IDX_LABELS_MAGIC, n] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    for &y in &ds.labels {
        labels.push(u8::try_from(y).map_err(|_| Error::format("label does not fit a byte"))?);
    }
    Ok((images, labels))
}

// -------------------------------------------------------------------------
// synthetic blobs

/// Gaussian class clusters around fixed per-class mean images.
#[derive(Clone, Debug)]
pub struct BlobSource {
    means: Vec<Vec<f64>>,
    dims: Dims,
    spread: f64,
    seed: u64,
}

impl BlobSource {
    pub fn new(classes: usize, dims: Dims, spread: f64, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::contract("blobs need at least 2 classes"));
        }
        if !(spread >= 0.0 && spread.is_finite()) {
            return Err(Error::contract("blob spread must be finite and >= 0"));
        }
        let d = dims.0 * dims.1 * dims.2;
        let mut rng = rng::stream(seed, Purpose::Blobs, &[0]);
        let means = (0..classes)
            .map(|_| (0..d).map(|_| rng.random_range(-0.5..=0.5)).collect())
            .collect();
        Ok(BlobSource {
            means,
            dims,
            spread,
            seed,
        })
    }

    /// Draws `n_per_class` samples of every class, labels in class order.
    /// `split` selects an independent noise stream (e.g. 0 = train, 1 = test).
    pub fn sample(&self, n_per_class: usize, split: u64) -> Result<Dataset> {
        if n_per_class == 0 {
            return Err(Error::contract("n_per_class must be >= 1"));
        }
        let k = self.means.len();
        let d = self.means[0].len();
        let mut rng = rng::stream(self.seed, Purpose::Blobs, &[1, split]);
        let noise = Normal::new(0.0, 1.0).expect("unit normal");
        let mut data = Vec::with_capacity(k * n_per_class * d);
        let mut labels = Vec::with_capacity(k * n_per_class);
        for (class, mean) in self.means.iter().enumerate() {
            for _ in 0..n_per_class {
                data.extend(mean.iter().map(|&m| {
                    let e: f64 = noise.sample(&mut rng);
                    (m + self.spread * e).clamp(-1.0, 1.0)
                }));
                labels.push(class);
            }
        }
        let (c, w, h) = self.dims;
        let images = Tensor::new(vec![k * n_per_class, c, w, h], data)?;
        Dataset::new(images, labels, k)
    }
}

/// Deterministic blob dataset with `classes * n_per_class` samples.
pub fn synth_blobs(classes: usize, n_per_class: usize, dims: Dims, spread: f64, seed: u64) -> Result<Dataset> {
    BlobSource::new(classes, dims, spread, seed)?.sample(n_per_class, 0)
}

// -------------------------------------------------------------------------
// partitioning

#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    /// Sample indices owned by each client.
    pub assignments: Vec<Vec<usize>>,
    /// `p^c = n^c / sum n^c`.
    pub weights: Vec<f64>,
}

impl Partition {
    fn from_assignments(assignments: Vec<Vec<usize>>) -> Self {
        let total: usize = assignments.iter().map(Vec::len).sum();
        let weights = assignments.iter().map(|a| a.len() as f64 / total as f64).collect();
        Partition { assignments, weights }
    }

    pub fn clients(&self) -> usize {
        self.assignments.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionConfig {
    pub clients: usize,
    pub alpha: f64,
    pub fraction: f64,
    /// Pathological setting: each client only receives samples from this
    /// many randomly chosen classes.
    pub max_classes_per_client: Option<usize>,
    pub seed: u64,
}

const MAX_PARTITION_RETRIES: usize = 100;

/// Splits `ds` across clients with per-class Dirichlet proportions.
pub fn dirichlet_partition(ds: &Dataset, cfg: &PartitionConfig) -> Result<Partition> {
    if cfg.clients == 0 {
        return Err(Error::contract("client count must be >= 1"));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha.is_finite()) {
        return Err(Error::contract("dirichlet alpha must be > 0"));
    }
    if !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
        return Err(Error::contract("fraction must be in (0, 1]"));
    }
    if cfg.max_classes_per_client == Some(0) {
        return Err(Error::contract("max_classes_per_client must be >= 1"));
    }

    let mut rng = rng::stream(cfg.seed, Purpose::Partition, &[]);

    let mut pools = ds.class_indices();
    for pool in &mut pools {
        pool.shuffle(&mut rng);
        let keep = (cfg.fraction * pool.len() as f64).round() as usize;
        pool.truncate(keep);
    }

    // Which clients may receive each class.
    let allowed: Vec<Vec<usize>> = match cfg.max_classes_per_client {
        None => vec![(0..cfg.clients).collect(); ds.classes],
        Some(m) => {
            let mut allowed = vec![Vec::new(); ds.classes];
            let mut classes: Vec<usize> = (0..ds.classes).collect();
            for c in 0..cfg.clients {
                classes.shuffle(&mut rng);
                for &k in classes.iter().take(m) {
                    allowed[k].push(c);
                }
            }
            for a in allowed.iter_mut().filter(|a| a.is_empty()) {
                *a = (0..cfg.clients).collect();
            }
            allowed
        }
    };

    let gamma = Gamma::new(cfg.alpha, 1.0).map_err(|e| Error::contract(e.to_string()))?;
    for _ in 0..MAX_PARTITION_RETRIES {
        let mut assignments = vec![Vec::new(); cfg.clients];
        for (pool, owners) in pools.iter().zip(&allowed) {
            if pool.is_empty() {
                continue;
            }
            let q = sample_dirichlet(&gamma, owners.len(), &mut rng);
            let counts = largest_remainder(&q, pool.len());
            let mut start = 0;
            for (&owner, &count) in owners.iter().zip(&counts) {
                assignments[owner].extend_from_slice(&pool[start..start + count]);
                start += count;
            }
        }
        if assignments.iter().all(|a| !a.is_empty()) {
            for a in &mut assignments {
                a.sort_unstable();
            }
            return Ok(Partition::from_assignments(assignments));
        }
    }
    Err(Error::RetryExhausted(MAX_PARTITION_RETRIES))
}

/// Symmetric Dirichlet draw via normalized Gamma variates.
fn sample_dirichlet(gamma: &Gamma<f64>, k: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = g.iter().sum();
        if total > 0.0 && total.is_finite() {
            return g.into_iter().map(|x| x / total).collect();
        }
    }
}

/// Integer counts proportional to `q` that sum exactly to `n`.
pub fn largest_remainder(q: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = q.iter().map(|&p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..q.len()).collect();
    // Stable sort keeps index order among equal remainders.
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra)
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}
