//! Client-side meta knowledge extraction.
//!
//! A client condenses its private data into a small synthetic dataset (the
//! meta knowledge) by bi-level optimization:
//!
//! * inner: `w* = w - eta * grad_w L(w, meta)`, recorded on the tape so that
//!   `w*` is a differentiable function of the meta images;
//! * outer: `meta <- meta - alpha * grad_meta (1/|B|) sum_i phi_i * l(w*, x_i, y_i)`
//!   over a batch `B` of real samples, where `phi_i = sigmoid(tau * l(w, x_i, y_i))`
//!   is a per-sample weight computed on the broadcast model and held constant.
//!
//! Labels are fixed and balanced; only the images are learned. Images are
//! clipped to `[-1, 1]` after every outer step.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::datasets::{Dataset, Dims};
use crate::error::{Error, Result};
use crate::models::{self, ClassifierModel, ClassifierVars};
use crate::rng::{self, Purpose, Rng};
use crate::tensor::Tensor;

/// Bytes per transmitted value (float32 on the wire).
pub const WIRE_BYTES_PER_VALUE: u64 = 4;

/// A client's learnable synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaKnowledge {
    /// `(classes * per_class, c, w, h)`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl MetaKnowledge {
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

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Every class holds the same number of samples.
    pub fn is_balanced(&self) -> bool {
        let counts = self.class_counts();
        counts.windows(2).all(|w| w[0] == w[1])
    }

    /// Upload size of the images in bytes.
    pub fn payload_bytes(&self) -> u64 {
        self.images.numel() as u64 * WIRE_BYTES_PER_VALUE
    }

    /// Concatenates several clients' meta knowledge into one training set.
    pub fn concat(parts: &[&MetaKnowledge]) -> Result<MetaKnowledge> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("no meta knowledge to concatenate"))?;
        if parts.iter().any(|m| m.classes != first.classes) {
            return Err(Error::shape("meta knowledge class counts differ"));
        }
        let images = Tensor::concat_rows(&parts.iter().map(|m| &m.images).collect::<Vec<_>>())?;
        let labels = parts.iter().flat_map(|m| m.labels.iter().copied()).collect();
        Ok(MetaKnowledge {
            images,
            labels,
            classes: first.classes,
        })
    }

    pub fn as_dataset(&self) -> Result<Dataset> {
        Dataset::new(self.images.clone(), self.labels.clone(), self.classes)
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint {
            kind: "meta_knowledge".into(),
            config_hash: config_hash.into(),
            tensors: vec![("images".into(), self.images.clone())],
            extra: serde_json::json!({ "labels": self.labels, "classes": self.classes }),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != "meta_knowledge" || ckpt.tensors.len() != 1 {
            return Err(Error::format("not a meta knowledge checkpoint"));
        }
        let labels: Vec<usize> =
            serde_json::from_value(ckpt.extra["labels"].clone()).map_err(|e| Error::format(format!("labels: {e}")))?;
        let classes = ckpt.extra["classes"]
            .as_u64()
            .ok_or_else(|| Error::format("missing class count"))? as usize;
        let images = ckpt.tensors[0].1.clone();
        Dataset::new(images.clone(), labels.clone(), classes)?;
        Ok(MetaKnowledge {
            images,
            labels,
            classes,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FmkeConfig {
    /// Inner-loop learning rate.
    pub eta: f64,
    /// Outer-loop (meta image) learning rate.
    pub alpha_meta: f64,
    /// Sigmoid sharpness of the dynamic weights.
    pub tau: f64,
    pub outer_steps: usize,
    pub inner_steps: usize,
    pub batch_size: usize,
    pub meta_per_class: usize,
    /// When false every real sample gets weight 1.
    pub dynamic_weights: bool,
}

impl Default for FmkeConfig {
    fn default() -> Self {
        FmkeConfig {
            eta: 1.0,
            alpha_meta: 1000.0,
            tau: 5.0,
            outer_steps: 20,
            inner_steps: 1,
            batch_size: 32,
            meta_per_class: 20,
            dynamic_weights: true,
        }
    }
}

impl FmkeConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("eta", self.eta), ("alpha_meta", self.alpha_meta), ("tau", self.tau)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("{name} must be > 0")));
            }
        }
        if self.inner_steps == 0 || self.batch_size == 0 || self.meta_per_class == 0 {
            return Err(Error::contract(
                "inner_steps, batch_size and meta_per_class must be >= 1",
            ));
        }
        Ok(())
    }
}

// -------------------------------------------------------------------------
// initialization

/// Meta images i.i.d. uniform in `[-1, 1]`, `per_class` samples of every class.
pub fn uniform_init(classes: usize, per_class: usize, dims: Dims, seed: u64) -> MetaKnowledge {
    let mut rng = rng::stream(seed, Purpose::MetaInit, &[]);
    let n = classes * per_class;
    let data = (0..n * dims.0 * dims.1 * dims.2)
        .map(|_| rng.random_range(-1.0..=1.0))
        .collect();
    let labels = (0..classes).flat_map(|k| std::iter::repeat_n(k, per_class)).collect();
    MetaKnowledge {
        images: Tensor::new(vec![n, dims.0, dims.1, dims.2], data).expect("sized"),
        labels,
        classes,
    }
}

/// Starts from a copy of a random other client's previous-round meta
/// knowledge, or from [`uniform_init`] when no other client has any.
pub fn conditional_init(
    pool: &BTreeMap<usize, MetaKnowledge>,
    client: usize,
    classes: usize,
    per_class: usize,
    dims: Dims,
    rng: &mut Rng,
) -> MetaKnowledge {
    let peers: Vec<&MetaKnowledge> = pool.iter().filter(|(&c, _)| c != client).map(|(_, m)| m).collect();
    if peers.is_empty() {
        return uniform_init(classes, per_class, dims, rng.random());
    }
    peers[rng.random_range(0..peers.len())].clone()
}

// -------------------------------------------------------------------------
// dynamic weights

/// `phi = 1 / (1 + exp(-tau * loss))`.
pub fn dynamic_weight(loss: f64, tau: f64) -> f64 {
    sigmoid(tau * loss)
}

/// Per-sample weights of a real-data batch under `model`.
pub fn dynamic_weights(model: &ClassifierModel, images: &Tensor, labels: &[usize], tau: f64) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::contract("dynamic weights need a nonempty batch"));
    }
    let losses = models::per_sample_loss(model, images, labels)?;
    Ok(losses.into_iter().map(|l| dynamic_weight(l, tau)).collect())
}

// -------------------------------------------------------------------------
// bi-level steps

/// One differentiable SGD step on the meta knowledge loss:
/// `w* = w - eta * grad_w CE(w, meta)`.
pub fn inner_step(
    g: &mut Graph,
    model: &ClassifierModel,
    w: &ClassifierVars,
    meta_images: Var,
    meta_labels: &[usize],
    eta: f64,
) -> Result<ClassifierVars> {
    let (_, logits) = models::classifier_forward(g, &model.arch, w, meta_images)?;
    let loss = g.cross_entropy(logits, meta_labels)?;
    let params = w.all();
    let grads = g.grad(loss, &params)?;
    let mut updated = Vec::with_capacity(params.len());
    for (p, d) in params.into_iter().zip(grads) {
        let step = g.scale(d, eta)?;
        updated.push(g.sub(p, step)?);
    }
    Ok(w.from_flat(&updated))
}

/// [`inner_step`] on plain values.
pub fn inner_step_model(model: &ClassifierModel, meta: &MetaKnowledge, eta: f64) -> Result<ClassifierModel> {
    if meta.is_empty() {
        return Err(Error::contract("meta knowledge is empty"));
    }
    let mut g = Graph::new();
    let w = model.bind(&mut g, true);
    let x = g.constant(meta.images.clone());
    let updated = inner_step(&mut g, model, &w, x, &meta.labels, eta)?;
    let mut out = model.clone();
    out.set_params(updated.all().iter().map(|&v| g.value(v).clone()).collect())?;
    Ok(out)
}

/// A batch of real samples with their (constant) outer-loss weights.
pub struct WeightedBatch<'a> {
    pub images: &'a Tensor,
    pub labels: &'a [usize],
    pub weights: &'a [f64],
}

/// Outer loss at the inner-updated model and its gradient w.r.t. the meta
/// images.
pub fn hypergradient(
    meta: &MetaKnowledge,
    model: &ClassifierModel,
    batch: &WeightedBatch<'_>,
    cfg: &FmkeConfig,
) -> Result<(f64, Tensor)> {
    if batch.labels.len() != batch.weights.len() || batch.labels.is_empty() {
        return Err(Error::contract("batch labels and weights must be nonempty and aligned"));
    }
    let mut g = Graph::new();
    let mut w = model.bind(&mut g, true);
    let x_meta = g.param(meta.images.clone());
    for _ in 0..cfg.inner_steps {
        w = inner_step(&mut g, model, &w, x_meta, &meta.labels, cfg.eta)?;
    }
    let xb = g.constant(batch.images.clone());
    let (_, logits) = models::classifier_forward(&mut g, &model.arch, &w, xb)?;
    let losses = g.softmax_cross_entropy(logits, batch.labels)?;
    let phi = g.constant(Tensor::from_vec(batch.weights.to_vec()));
    let weighted = g.mul(losses, phi)?;
    let outer = g.mean(weighted)?;
    let hg = g.grad(outer, &[x_meta])?[0];
    let hg = g.value(hg).clone();
    if !hg.is_finite() {
        return Err(Error::numeric("non-finite hypergradient"));
    }
    Ok((g.value(outer).item(), hg))
}

/// One outer update of the meta images; labels are untouched.
pub fn outer_step(
    meta: &MetaKnowledge,
    model: &ClassifierModel,
    batch: &WeightedBatch<'_>,
    cfg: &FmkeConfig,
) -> Result<MetaKnowledge> {
    let (_, hg) = hypergradient(meta, model, batch, cfg)?;
    let mut next = meta.clone();
    for (x, d) in next.images.data_mut().iter_mut().zip(hg.data()) {
        *x = (*x - cfg.alpha_meta * d).clamp(-1.0, 1.0);
    }
    if !next.images.is_finite() {
        return Err(Error::numeric("meta knowledge became non-finite"));
    }
    Ok(next)
}

/// Batch indices: without replacement when the data is large enough.
pub fn sample_batch(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<usize> {
    if n >= batch_size {
        index::sample(rng, n, batch_size).into_vec()
    } else {
        (0..batch_size).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Runs `cfg.outer_steps` outer updates of `init` against `local`.
pub fn extract_meta_knowledge(
    client: usize,
    local: &Dataset,
    broadcast: &ClassifierModel,
    init: MetaKnowledge,
    cfg: &FmkeConfig,
    rng: &mut Rng,
) -> Result<MetaKnowledge> {
    if local.is_empty() {
        return Err(Error::contract(format!("client {client} holds no data")));
    }
    let mut meta = init;
    for _ in 0..cfg.outer_steps {
        let idx = sample_batch(local.len(), cfg.batch_size, rng);
        let images = local.images.select_rows(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| local.labels[i]).collect();
        let weights = if cfg.dynamic_weights {
            dynamic_weights(broadcast, &images, &labels, cfg.tau).map_err(|e| e.in_client(client))?
        } else {
            vec![1.0; labels.len()]
        };
        let batch = WeightedBatch {
            images: &images,
            labels: &labels,
            weights: &weights,
        };
        meta = outer_step(&meta, broadcast, &batch, cfg).map_err(|e| e.in_client(client))?;
    }
    Ok(meta)
}
