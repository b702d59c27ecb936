//! Independent numeric oracles shared by the integration tests.
//!
//! Nothing here touches the autodiff engine: the two-layer network below
//! is evaluated and differentiated by hand with plain loops.

#![allow(dead_code, clippy::needless_range_loop)]

pub mod gradcheck;
pub mod invariants;

use std::path::PathBuf;

use fedmeta_core::datasets::{load_idx, BlobSource, Dataset};
use fedmeta_core::orchestrator::{FederationConfig, ModelConfig};
use fedmeta_core::rng::{self, Purpose};
use fedmeta_core::tensor::Tensor;
use rand::Rng as _;

/// Uniform tensor in `[lo, hi]` from a test-only stream.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, Purpose::Blobs, &[0xfd]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..=hi)).collect()).unwrap()
}

/// Central differences of a scalar function over every element of `x`.
pub fn central_diff(x: &Tensor, eps: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Largest elementwise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel_err(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// `x (n, d_in) -> relu(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug)]
pub struct TwoLayer {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub d_in: usize,
    pub d_h: usize,
    pub k: usize,
}

pub struct TwoLayerGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl TwoLayer {
    /// From the flat parameter list `[W1, b1, W2, b2]` of a one-hidden-layer
    /// classifier.
    pub fn from_params(p: &[&Tensor]) -> Self {
        let (d_in, d_h) = (p[0].shape()[0], p[0].shape()[1]);
        TwoLayer {
            w1: p[0].data().to_vec(),
            b1: p[1].data().to_vec(),
            w2: p[2].data().to_vec(),
            b2: p[3].data().to_vec(),
            d_in,
            d_h,
            k: p[2].shape()[1],
        }
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        (0..self.d_h)
            .map(|j| {
                let pre: f64 = self.b1[j] + (0..self.d_in).map(|i| x[i] * self.w1[i * self.d_h + j]).sum::<f64>();
                pre.max(0.0)
            })
            .collect()
    }

    fn logits(&self, h: &[f64]) -> Vec<f64> {
        (0..self.k)
            .map(|c| self.b2[c] + (0..self.d_h).map(|j| h[j] * self.w2[j * self.k + c]).sum::<f64>())
            .collect()
    }

    /// Per-sample cross-entropy.
    pub fn losses(&self, x: &[f64], y: &[usize]) -> Vec<f64> {
        x.chunks(self.d_in)
            .zip(y)
            .map(|(xi, &yi)| {
                let z = self.logits(&self.hidden(xi));
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - z[yi]
            })
            .collect()
    }

    /// Gradient of the mean cross-entropy over the batch.
    pub fn mean_ce_grads(&self, x: &[f64], y: &[usize]) -> TwoLayerGrads {
        let n = y.len() as f64;
        let mut g = TwoLayerGrads {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
        };
        for (xi, &yi) in x.chunks(self.d_in).zip(y) {
            let h = self.hidden(xi);
            let z = self.logits(&h);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let dz: Vec<f64> = (0..self.k)
                .map(|c| (e[c] / s - if c == yi { 1.0 } else { 0.0 }) / n)
                .collect();
            for c in 0..self.k {
                g.b2[c] += dz[c];
                for j in 0..self.d_h {
                    g.w2[j * self.k + c] += h[j] * dz[c];
                }
            }
            for j in 0..self.d_h {
                if h[j] <= 0.0 {
                    continue;
                }
                let dh: f64 = (0..self.k).map(|c| self.w2[j * self.k + c] * dz[c]).sum();
                g.b1[j] += dh;
                for i in 0..self.d_in {
                    g.w1[i * self.d_h + j] += xi[i] * dh;
                }
            }
        }
        g
    }

    pub fn step(&self, g: &TwoLayerGrads, eta: f64) -> TwoLayer {
        let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, d)| x - eta * d).collect();
        TwoLayer {
            w1: sub(&self.w1, &g.w1),
            b1: sub(&self.b1, &g.b1),
            w2: sub(&self.w2, &g.w2),
            b2: sub(&self.b2, &g.b2),
            ..*self
        }
    }
}

/// The outer objective evaluated from scratch: one SGD step on the meta
/// batch, then the weighted mean cross-entropy on the real batch.
pub fn bilevel_loss(
    net: &TwoLayer,
    meta_x: &[f64],
    meta_y: &[usize],
    eta: f64,
    real_x: &[f64],
    real_y: &[usize],
    phi: &[f64],
) -> f64 {
    let updated = net.step(&net.mean_ce_grads(meta_x, meta_y), eta);
    let l = updated.losses(real_x, real_y);
    l.iter().zip(phi).map(|(a, b)| a * b).sum::<f64>() / l.len() as f64
}

/// The small blob federation used for ablation and end-to-end checks:
/// 4 classes in 1x4x4, 8 clients with 4 active, 10 rounds.
pub fn blob_federation(seed: u64) -> (FederationConfig, Dataset, Dataset) {
    let source = BlobSource::new(4, (1, 4, 4), 0.5, seed).unwrap();
    let train = source.sample(100, 0).unwrap();
    let test = source.sample(250, 1).unwrap();
    let mut cfg = FederationConfig {
        clients: 8,
        active: 4,
        rounds: 10,
        fraction: 1.0,
        alpha_dirichlet: 0.5,
        model: ModelConfig {
            hidden: vec![32],
            latent_dim: 16,
            noise_dim: 8,
            generator_hidden: 32,
        },
        seed,
        ..FederationConfig::default()
    };
    cfg.fmke.meta_per_class = 10;
    cfg.fmke.outer_steps = 50;
    (cfg, train, test)
}

/// The bundled 5,000/5,000 MNIST subset as `(train, test)`.
pub fn mnist() -> (Dataset, Dataset) {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let load = |split: &str| {
        load_idx(
            dir.join(format!("{split}-images-idx3-ubyte")),
            dir.join(format!("{split}-labels-idx1-ubyte")),
        )
        .unwrap()
    };
    (load("train"), load("t10k"))
}

/// The desk-scale MNIST federation: 20 clients, 10 active per round,
/// Dir(0.5), 10 rounds, 20 meta images per class.
pub fn mnist_federation(seed: u64) -> FederationConfig {
    let mut cfg = FederationConfig {
        fraction: 1.0,
        seed,
        ..FederationConfig::default()
    };
    cfg.fmke.outer_steps = 50;
    cfg.server.epochs = 2;
    cfg
}
