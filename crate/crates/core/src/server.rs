//! Server-side central model training.
//!
//! The uploaded meta knowledge `D` is ordinary training data for the global
//! model. A conditional generator learns, against the frozen classifier
//! head, to emit latents the head assigns to a requested label. Latents
//! sampled from it ("pseudo" meta knowledge) enter the global update as a
//! second loss term weighted by `beta = |D_pseu| / |D|`. They are fed
//! straight into the head, so that term never touches the feature extractor.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::fmke::MetaKnowledge;
use crate::models::{self, ClassifierModel, ConditionalGenerator};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub generator_steps: usize,
    pub generator_lr: f64,
    pub generator_batch: usize,
    /// Pseudo samples per round; `None` means `|D|` (so `beta = 1`).
    pub n_pseudo: Option<usize>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            epochs: 5,
            lr: 0.01,
            batch_size: 32,
            generator_steps: 100,
            generator_lr: 0.01,
            generator_batch: 64,
            n_pseudo: None,
        }
    }
}

/// Meta knowledge received in one round.
#[derive(Clone, Debug)]
pub struct UploadBundle {
    pub round: usize,
    pub senders: Vec<usize>,
    pub metas: Vec<MetaKnowledge>,
}

impl UploadBundle {
    /// `D = union of all uploads`.
    pub fn concat(&self) -> Result<MetaKnowledge> {
        let first = self
            .metas
            .first()
            .ok_or_else(|| Error::contract("empty upload bundle"))?;
        if self.metas.iter().any(|m| m.dims() != first.dims()) {
            return Err(Error::shape("uploads disagree on image dims"));
        }
        MetaKnowledge::concat(&self.metas.iter().collect::<Vec<_>>())
    }
}

/// Generator-sampled latents with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoKnowledge {
    /// `(n, latent_dim)`.
    pub latents: Tensor,
    pub labels: Vec<usize>,
}

impl PseudoKnowledge {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `beta = |D_pseu| / |D|`.
pub fn beta(pseudo_len: usize, meta_len: usize) -> f64 {
    pseudo_len as f64 / meta_len as f64
}

/// Labels drawn i.i.d. from the empirical label distribution of `meta`.
fn sample_labels(meta: &MetaKnowledge, n: usize, rng: &mut Rng) -> Vec<usize> {
    (0..n)
        .map(|_| meta.labels[rng.random_range(0..meta.labels.len())])
        .collect()
}

fn standard_normal(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("sized")
}

/// Gradients of `CE(W, x, y) + beta * CE(head(W^C, z_pseu), y_pseu)` w.r.t.
/// every classifier parameter, in [`ClassifierModel::params`] order.
pub fn combined_gradients(
    model: &ClassifierModel,
    images: &Tensor,
    labels: &[usize],
    pseudo: Option<(&Tensor, &[usize])>,
    beta: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true);
    let x = g.constant(images.clone());
    let (_, logits) = models::classifier_forward(&mut g, &model.arch, &vars, x)?;
    let mut loss = g.cross_entropy(logits, labels)?;
    if let Some((latents, pseudo_labels)) = pseudo {
        let z = g.constant(latents.clone());
        let pl = models::head_forward(&mut g, &vars.head, z)?;
        let pseudo_loss = g.cross_entropy(pl, pseudo_labels)?;
        let weighted = g.scale(pseudo_loss, beta)?;
        loss = g.add(loss, weighted)?;
    }
    let grads = g.grad(loss, &vars.all())?;
    let value = g.value(loss).item();
    Ok((value, grads.into_iter().map(|v| g.value(v).clone()).collect()))
}

/// Mini-batch SGD on the uploaded meta knowledge alone.
pub fn train_global_on_meta(
    model: &ClassifierModel,
    meta_all: &MetaKnowledge,
    cfg: &ServerConfig,
    rng: &mut Rng,
) -> Result<ClassifierModel> {
    let empty = PseudoKnowledge {
        latents: Tensor::zeros(&[0, model.arch.latent_dim]),
        labels: vec![],
    };
    train_global_combined(model, meta_all, &empty, cfg, rng)
}

/// Mini-batch SGD on `L(W, D) + beta * L(W, D_pseu)`.
///
/// Each step pairs a batch of meta knowledge with a batch of pseudo
/// knowledge of the same size; the pseudo set is reshuffled whenever it is
/// exhausted. With an empty pseudo set no extra random draws are made.
pub fn train_global_combined(
    model: &ClassifierModel,
    meta_all: &MetaKnowledge,
    pseudo: &PseudoKnowledge,
    cfg: &ServerConfig,
    rng: &mut Rng,
) -> Result<ClassifierModel> {
    if meta_all.is_empty() {
        return Err(Error::contract("no meta knowledge to train on"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::contract("batch_size must be >= 1"));
    }
    let beta = beta(pseudo.len(), meta_all.len());
    let mut model = model.clone();
    let mut order: Vec<usize> = (0..meta_all.len()).collect();
    let mut pseudo_order: Vec<usize> = (0..pseudo.len()).collect();
    let mut pseudo_cursor = pseudo.len();

    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let images = meta_all.images.select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| meta_all.labels[i]).collect();

            let pseudo_batch = if pseudo.is_empty() {
                None
            } else {
                let mut picked = Vec::with_capacity(chunk.len());
                while picked.len() < chunk.len() {
                    if pseudo_cursor == pseudo_order.len() {
                        pseudo_order.shuffle(rng);
                        pseudo_cursor = 0;
                    }
                    picked.push(pseudo_order[pseudo_cursor]);
                    pseudo_cursor += 1;
                }
                let z = pseudo.latents.select_rows(&picked);
                let y: Vec<usize> = picked.iter().map(|&i| pseudo.labels[i]).collect();
                Some((z, y))
            };

            let (loss, grads) = combined_gradients(
                &model,
                &images,
                &labels,
                pseudo_batch.as_ref().map(|(z, y)| (z, y.as_slice())),
                beta,
            )?;
            if !loss.is_finite() {
                return Err(Error::numeric("global training loss diverged"));
            }
            model.sgd_step(&grads, cfg.lr);
        }
    }
    Ok(model)
}

/// Trains the generator to produce latents the frozen head classifies as
/// the conditioning label. Only generator parameters change.
pub fn train_generator(
    gen: &ConditionalGenerator,
    model: &ClassifierModel,
    meta_all: &MetaKnowledge,
    cfg: &ServerConfig,
    rng: &mut Rng,
) -> Result<ConditionalGenerator> {
    if meta_all.is_empty() {
        return Err(Error::contract("no meta knowledge to model"));
    }
    let mut gen = gen.clone();
    for _ in 0..cfg.generator_steps {
        let labels = sample_labels(meta_all, cfg.generator_batch, rng);
        let noise = standard_normal(labels.len(), gen.arch.noise_dim, rng);

        let mut g = Graph::new();
        let gvars = gen.bind(&mut g, true);
        let head = model.bind_parts(&mut g, false, false).head;
        let z = models::generator_forward(&mut g, &gen.arch, &gvars, &labels, &noise)?;
        let logits = models::head_forward(&mut g, &head, z)?;
        let loss = g.cross_entropy(logits, &labels)?;
        let params: Vec<_> = gvars.iter().flat_map(|l| [l.weight, l.bias]).collect();
        let grads = g.grad(loss, &params)?;
        let grads: Vec<Tensor> = grads.into_iter().map(|v| g.value(v).clone()).collect();
        gen.sgd_step(&grads, cfg.generator_lr);
    }
    Ok(gen)
}

/// Mean cross-entropy of `head(G(y, eps))` against `y` on a fresh sample.
pub fn generator_loss(
    gen: &ConditionalGenerator,
    model: &ClassifierModel,
    meta_all: &MetaKnowledge,
    n: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let pseudo = sample_pseudo(gen, meta_all, n, rng)?;
    let mut g = Graph::new();
    let head = model.bind_parts(&mut g, false, false).head;
    let z = g.constant(pseudo.latents);
    let logits = models::head_forward(&mut g, &head, z)?;
    let loss = g.cross_entropy(logits, &pseudo.labels)?;
    Ok(g.value(loss).item())
}

/// Samples `n` pseudo latents with labels from the empirical label
/// distribution of `meta_all`.
pub fn sample_pseudo(
    gen: &ConditionalGenerator,
    meta_all: &MetaKnowledge,
    n: usize,
    rng: &mut Rng,
) -> Result<PseudoKnowledge> {
    if n == 0 {
        return Ok(PseudoKnowledge {
            latents: Tensor::zeros(&[0, gen.arch.latent_dim]),
            labels: vec![],
        });
    }
    if meta_all.is_empty() {
        return Err(Error::contract("no meta knowledge to sample labels from"));
    }
    let labels = sample_labels(meta_all, n, rng);
    let noise = standard_normal(n, gen.arch.noise_dim, rng);
    let latents = models::generate(gen, &labels, &noise)?;
    Ok(PseudoKnowledge { latents, labels })
}
