//! The global classifier `W_G = (W^F, W^C)` and the conditional generator.
//!
//! Models are plain parameter containers. To run one differentiably, bind
//! it onto a [`Graph`] (which copies the parameters in as leaves) and call
//! the matching forward function with the returned vars.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::datasets::Dims;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// `(channels, width, height)`.
    pub input: Dims,
    /// Hidden widths of the feature extractor before the latent layer.
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub classes: usize,
    pub noise_dim: usize,
    pub generator_hidden: usize,
}

impl ArchConfig {
    /// Default MLP: flatten -> 128 relu -> 64 relu | 64 -> K.
    pub fn mlp(input: Dims, classes: usize) -> Self {
        ArchConfig {
            input,
            hidden: vec![128],
            latent_dim: 64,
            classes,
            noise_dim: 32,
            generator_hidden: 128,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.input.0,
            self.input.1,
            self.input.2,
            self.latent_dim,
            self.noise_dim,
            self.generator_hidden,
        ];
        if widths.iter().chain(&self.hidden).any(|&w| w == 0) {
            return Err(Error::contract("all layer widths must be >= 1"));
        }
        if self.classes < 2 {
            return Err(Error::contract("need at least 2 classes"));
        }
        Ok(())
    }
}

/// Dense layer `y = x W + b` with `W: (in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut rng::Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], w).expect("sized"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> LinearVars {
        let (weight, bias) = if trainable {
            (g.param(self.weight.clone()), g.param(self.bias.clone()))
        } else {
            (g.constant(self.weight.clone()), g.constant(self.bias.clone()))
        };
        LinearVars { weight, bias }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

fn linear(g: &mut Graph, layer: &LinearVars, x: Var) -> Result<Var> {
    let xw = g.matmul(x, layer.weight)?;
    g.add_row(xw, layer.bias)
}

fn layers_params(layers: &[Linear]) -> impl Iterator<Item = &Tensor> {
    layers.iter().flat_map(|l| [&l.weight, &l.bias])
}

fn layers_params_mut(layers: &mut [Linear]) -> impl Iterator<Item = &mut Tensor> {
    layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
}

fn vars_of(layers: &[LinearVars]) -> impl Iterator<Item = Var> + '_ {
    layers.iter().flat_map(|l| [l.weight, l.bias])
}

// -------------------------------------------------------------------------
// classifier

/// `W^F`: image -> latent `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor(pub Vec<Linear>);

/// `W^C`: latent `z` -> logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead(pub Linear);

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub arch: ArchConfig,
    pub extractor: FeatureExtractor,
    pub head: ClassifierHead,
}

#[derive(Clone, Debug)]
pub struct ClassifierVars {
    pub extractor: Vec<LinearVars>,
    pub head: LinearVars,
}

impl ClassifierVars {
    /// All parameter vars, extractor first, in [`ClassifierModel::params`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut v: Vec<Var> = vars_of(&self.extractor).collect();
        v.extend([self.head.weight, self.head.bias]);
        v
    }

    pub fn extractor_vars(&self) -> Vec<Var> {
        vars_of(&self.extractor).collect()
    }

    pub fn head_vars(&self) -> Vec<Var> {
        vec![self.head.weight, self.head.bias]
    }

    /// Rebuilds the structure from a flat list in [`Self::all`] order.
    pub fn from_flat(&self, flat: &[Var]) -> Self {
        let n = self.extractor.len();
        let extractor = (0..n)
            .map(|i| LinearVars {
                weight: flat[2 * i],
                bias: flat[2 * i + 1],
            })
            .collect();
        ClassifierVars {
            extractor,
            head: LinearVars {
                weight: flat[2 * n],
                bias: flat[2 * n + 1],
            },
        }
    }
}

impl ClassifierModel {
    /// Fan-in uniform weights, zero biases.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, Purpose::ModelInit, &[]);
        let mut widths = vec![arch.input_len()];
        widths.extend(&arch.hidden);
        widths.push(arch.latent_dim);
        let extractor = widths.windows(2).map(|w| Linear::init(w[0], w[1], &mut rng)).collect();
        let head = Linear::init(arch.latent_dim, arch.classes, &mut rng);
        Ok(ClassifierModel {
            arch: arch.clone(),
            extractor: FeatureExtractor(extractor),
            head: ClassifierHead(head),
        })
    }

    pub fn into_parts(self) -> (FeatureExtractor, ClassifierHead) {
        (self.extractor, self.head)
    }

    pub fn from_parts(arch: ArchConfig, extractor: FeatureExtractor, head: ClassifierHead) -> Self {
        ClassifierModel { arch, extractor, head }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = layers_params(&self.extractor.0).collect();
        p.extend([&self.head.0.weight, &self.head.0.bias]);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = layers_params_mut(&mut self.extractor.0).collect();
        p.extend([&mut self.head.0.weight, &mut self.head.0.bias]);
        p
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Number of parameters of the classifier `arch` describes.
    pub fn param_count_for(arch: &ArchConfig) -> usize {
        let mut widths = vec![arch.input_len()];
        widths.extend(&arch.hidden);
        widths.push(arch.latent_dim);
        widths.push(arch.classes);
        widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Overwrites parameters with `values` (in [`Self::params`] order).
    pub fn set_params(&mut self, values: Vec<Tensor>) -> Result<()> {
        let slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(Error::shape("parameter count mismatch"));
        }
        for (slot, v) in slots.into_iter().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::shape(format!(
                    "parameter shape {:?} vs {:?}",
                    slot.shape(),
                    v.shape()
                )));
            }
            *slot = v;
        }
        Ok(())
    }

    /// `p <- p - lr * grad` for every parameter.
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) {
        for (p, g) in self.params_mut().into_iter().zip(grads) {
            for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                *x -= lr * d;
            }
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ClassifierVars {
        self.bind_parts(g, trainable, trainable)
    }

    pub fn bind_parts(&self, g: &mut Graph, extractor: bool, head: bool) -> ClassifierVars {
        ClassifierVars {
            extractor: self.extractor.0.iter().map(|l| l.bind(g, extractor)).collect(),
            head: self.head.0.bind(g, head),
        }
    }

    /// Bit-level fingerprint of all parameters.
    pub fn checksum(&self) -> u64 {
        params_checksum(self.params())
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        let mut tensors = Vec::new();
        for (i, l) in self.extractor.0.iter().enumerate() {
            tensors.push((format!("extractor.{i}.weight"), l.weight.clone()));
            tensors.push((format!("extractor.{i}.bias"), l.bias.clone()));
        }
        tensors.push(("head.weight".into(), self.head.0.weight.clone()));
        tensors.push(("head.bias".into(), self.head.0.bias.clone()));
        Checkpoint {
            kind: "classifier".into(),
            config_hash: config_hash.into(),
            extra: serde_json::to_value(&self.arch).expect("arch serializes"),
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != "classifier" {
            return Err(Error::format(format!(
                "expected a classifier checkpoint, got {}",
                ckpt.kind
            )));
        }
        let arch: ArchConfig =
            serde_json::from_value(ckpt.extra.clone()).map_err(|e| Error::format(format!("checkpoint arch: {e}")))?;
        let mut model = ClassifierModel::init(&arch, 0)?;
        model.set_params(ckpt.tensors.iter().map(|(_, t)| t.clone()).collect())?;
        Ok(model)
    }
}

/// Flattens `(n, c, w, h)` inputs to `(n, c*w*h)`; rank-2 inputs pass through.
fn flatten_input(g: &mut Graph, arch: &ArchConfig, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    match shape.as_slice() {
        [n, c, w, h] if (*c, *w, *h) == arch.input => g.reshape(x, &[*n, c * w * h]),
        [_, d] if *d == arch.input_len() => Ok(x),
        s => Err(Error::shape(format!(
            "input {:?} does not match architecture input {:?}",
            s, arch.input
        ))),
    }
}

/// `z = F(W^F, x)`.
pub fn extractor_forward(g: &mut Graph, arch: &ArchConfig, vars: &ClassifierVars, x: Var) -> Result<Var> {
    let mut h = flatten_input(g, arch, x)?;
    for layer in &vars.extractor {
        let pre = linear(g, layer, h)?;
        h = g.relu(pre)?;
    }
    Ok(h)
}

/// `logits = C(W^C, z)`.
pub fn head_forward(g: &mut Graph, head: &LinearVars, z: Var) -> Result<Var> {
    linear(g, head, z)
}

/// Returns `(z, logits)`.
pub fn classifier_forward(g: &mut Graph, arch: &ArchConfig, vars: &ClassifierVars, x: Var) -> Result<(Var, Var)> {
    let z = extractor_forward(g, arch, vars, x)?;
    let logits = head_forward(g, &vars.head, z)?;
    Ok((z, logits))
}

/// Per-sample cross-entropy of `model` on a batch, as plain values.
pub fn per_sample_loss(model: &ClassifierModel, images: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let x = g.constant(images.clone());
    let (_, logits) = classifier_forward(&mut g, &model.arch, &vars, x)?;
    let l = g.softmax_cross_entropy(logits, labels)?;
    Ok(g.value(l).data().to_vec())
}

/// Predicted class per image, evaluated in chunks.
pub fn predict(model: &ClassifierModel, images: &Tensor) -> Result<Vec<usize>> {
    const CHUNK: usize = 1000;
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let x = g.constant(images.slice_rows(start, end));
        let (_, logits) = classifier_forward(&mut g, &model.arch, &vars, x)?;
        out.extend(g.value(logits).argmax_rows());
        start = end;
    }
    Ok(out)
}

pub fn accuracy(model: &ClassifierModel, images: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(model, images)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

// -------------------------------------------------------------------------
// generator

/// Maps `(one-hot y, noise)` to a latent vector:
/// concat -> hidden relu -> `latent_dim` linear.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalGenerator {
    pub arch: ArchConfig,
    pub layers: Vec<Linear>,
}

impl ConditionalGenerator {
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, Purpose::GeneratorInit, &[]);
        let input = arch.classes + arch.noise_dim;
        let layers = vec![
            Linear::init(input, arch.generator_hidden, &mut rng),
            Linear::init(arch.generator_hidden, arch.latent_dim, &mut rng),
        ];
        Ok(ConditionalGenerator {
            arch: arch.clone(),
            layers,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        layers_params(&self.layers).collect()
    }

    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) {
        for (p, g) in layers_params_mut(&mut self.layers).zip(grads) {
            for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                *x -= lr * d;
            }
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<LinearVars> {
        self.layers.iter().map(|l| l.bind(g, trainable)).collect()
    }

    pub fn checksum(&self) -> u64 {
        params_checksum(self.params())
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        let tensors = self
            .layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("layer.{i}.weight"), l.weight.clone()),
                    (format!("layer.{i}.bias"), l.bias.clone()),
                ]
            })
            .collect();
        Checkpoint {
            kind: "generator".into(),
            config_hash: config_hash.into(),
            extra: serde_json::to_value(&self.arch).expect("arch serializes"),
            tensors,
        }
    }
}

/// Builds the `(n, K + d_eps)` generator input.
pub fn generator_input(arch: &ArchConfig, labels: &[usize], noise: &Tensor) -> Result<Tensor> {
    let n = labels.len();
    if noise.shape() != [n, arch.noise_dim] {
        return Err(Error::shape(format!(
            "noise shape {:?}, expected ({n}, {})",
            noise.shape(),
            arch.noise_dim
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= arch.classes) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {} classes",
            arch.classes
        )));
    }
    let width = arch.classes + arch.noise_dim;
    let mut data = vec![0.0; n * width];
    for (i, (&y, eps)) in labels.iter().zip(noise.data().chunks(arch.noise_dim)).enumerate() {
        let row = &mut data[i * width..(i + 1) * width];
        row[y] = 1.0;
        row[arch.classes..].copy_from_slice(eps);
    }
    Tensor::new(vec![n, width], data)
}

/// `z = G(y, eps)` on the graph.
pub fn generator_forward(
    g: &mut Graph,
    arch: &ArchConfig,
    layers: &[LinearVars],
    labels: &[usize],
    noise: &Tensor,
) -> Result<Var> {
    let input = generator_input(arch, labels, noise)?;
    let mut h = g.constant(input);
    let last = layers.len() - 1;
    for (i, layer) in layers.iter().enumerate() {
        h = linear(g, layer, h)?;
        if i < last {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

/// Evaluates the generator outside of any training graph.
pub fn generate(gen: &ConditionalGenerator, labels: &[usize], noise: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = gen.bind(&mut g, false);
    let z = generator_forward(&mut g, &gen.arch, &vars, labels, noise)?;
    Ok(g.value(z).clone())
}

fn params_checksum<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> u64 {
    // FNV-1a over the raw bit patterns.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in params {
        for v in t.data() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    h
}
