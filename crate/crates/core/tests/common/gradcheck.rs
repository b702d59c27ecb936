//! Finite-difference checks of the autodiff primitives and the classifier.
//!
//! Each check panics with the offending op, input and seed.

use super::{central_diff, max_rel_err, uniform};
use fedmeta_core::models::{self, ArchConfig, ClassifierModel};
use fedmeta_core::{Graph, Result, Tensor, Var};

pub const SEEDS: u64 = 20;
const EPS: f64 = 1e-6;
const TOL: f64 = 1e-4;

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Contracts the op output with a fixed random tensor so every output
/// element contributes to the checked scalar.
fn scalarize(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let r = uniform(g.shape(y), -1.0, 1.0, seed ^ 0xabc);
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn eval(build: &Build, inputs: &[Tensor], seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = build(&mut g, &vars).unwrap();
    let s = scalarize(&mut g, y, seed).unwrap();
    g.value(s).item()
}

fn check(name: &str, inputs: Vec<Tensor>, seed: u64, build: &Build) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = build(&mut g, &vars).unwrap();
    let s = scalarize(&mut g, y, seed).unwrap();
    let grads = g.grad(s, &vars).unwrap();
    for (i, gv) in grads.iter().enumerate() {
        let analytic = g.value(*gv).clone();
        let numeric = central_diff(&inputs[i], EPS, |probe| {
            let mut xs = inputs.clone();
            xs[i] = probe.clone();
            eval(build, &xs, seed)
        });
        let err = max_rel_err(&analytic, &numeric, 1e-3);
        assert!(err < TOL, "{name} input {i} seed {seed}: rel err {err:e}");
    }
}

/// Uniform values pushed away from zero so kinks and poles stay out of
/// reach of the finite-difference stencil.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    uniform(shape, -1.0, 1.0, seed).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

pub fn elementwise_ops() {
    for seed in 0..SEEDS {
        let a = uniform(&[3, 4], -1.0, 1.0, seed);
        let b = uniform(&[3, 4], -1.0, 1.0, seed + 100);
        let pos = uniform(&[3, 4], 0.2, 2.0, seed + 200);
        check("add", vec![a.clone(), b.clone()], seed, &|g, v| g.add(v[0], v[1]));
        check("sub", vec![a.clone(), b.clone()], seed, &|g, v| g.sub(v[0], v[1]));
        check("mul", vec![a.clone(), b.clone()], seed, &|g, v| g.mul(v[0], v[1]));
        check("scale", vec![a.clone()], seed, &|g, v| g.scale(v[0], -2.5));
        check("add_scalar", vec![a.clone()], seed, &|g, v| g.add_scalar(v[0], 0.7));
        check("relu", vec![away_from_zero(&[3, 4], seed)], seed, &|g, v| g.relu(v[0]));
        check("sigmoid", vec![a.clone()], seed, &|g, v| g.sigmoid(v[0]));
        check("exp", vec![a.clone()], seed, &|g, v| g.exp(v[0]));
        check("log", vec![pos.clone()], seed, &|g, v| g.log(v[0]));
        check("recip", vec![pos.clone()], seed, &|g, v| g.recip(v[0]));
    }
}

pub fn scalar_broadcast_in_binary_ops() {
    for seed in 0..SEEDS {
        let a = uniform(&[2, 3], -1.0, 1.0, seed);
        let s = uniform(&[1], -1.0, 1.0, seed + 1);
        check("mul scalar", vec![a.clone(), s.clone()], seed, &|g, v| {
            g.mul(v[0], v[1])
        });
        check("add scalar", vec![s.clone(), a.clone()], seed, &|g, v| {
            g.add(v[0], v[1])
        });
        check("sub scalar", vec![a.clone(), s.clone()], seed, &|g, v| {
            g.sub(v[0], v[1])
        });
    }
}

pub fn reductions_and_layout_ops() {
    for seed in 0..SEEDS {
        let a = uniform(&[3, 4], -1.0, 1.0, seed);
        let row = uniform(&[4], -1.0, 1.0, seed + 1);
        let col = uniform(&[3], -1.0, 1.0, seed + 2);
        let s = uniform(&[1], -1.0, 1.0, seed + 3);
        check("sum", vec![a.clone()], seed, &|g, v| g.sum(v[0]));
        check("mean", vec![a.clone()], seed, &|g, v| g.mean(v[0]));
        check("sum_axis0", vec![a.clone()], seed, &|g, v| g.sum_axis0(v[0]));
        check("sum_axis1", vec![a.clone()], seed, &|g, v| g.sum_axis1(v[0]));
        check("reshape", vec![a.clone()], seed, &|g, v| g.reshape(v[0], &[2, 6]));
        check("transpose", vec![a.clone()], seed, &|g, v| g.transpose(v[0]));
        check("broadcast_scalar", vec![s.clone()], seed, &|g, v| {
            g.broadcast_scalar(v[0], &[2, 5])
        });
        check("broadcast_rows", vec![row.clone()], seed, &|g, v| {
            g.broadcast_rows(v[0], 3)
        });
        check("broadcast_cols", vec![col.clone()], seed, &|g, v| {
            g.broadcast_cols(v[0], 5)
        });
        check("add_row", vec![a.clone(), row.clone()], seed, &|g, v| {
            g.add_row(v[0], v[1])
        });
    }
}

pub fn matmul_and_softmax_family() {
    for seed in 0..SEEDS {
        let a = uniform(&[3, 5], -1.0, 1.0, seed);
        let b = uniform(&[5, 4], -1.0, 1.0, seed + 1);
        let logits = uniform(&[6, 4], -2.0, 2.0, seed + 2);
        let labels: Vec<usize> = (0..6).map(|i| (i + seed as usize) % 4).collect();
        check("matmul", vec![a.clone(), b.clone()], seed, &|g, v| g.matmul(v[0], v[1]));
        check("softmax", vec![logits.clone()], seed, &|g, v| g.softmax(v[0]));
        let l1 = labels.clone();
        check("softmax_cross_entropy", vec![logits.clone()], seed, &move |g, v| {
            g.softmax_cross_entropy(v[0], &l1)
        });
        let l2 = labels.clone();
        check("cross_entropy", vec![logits.clone()], seed, &move |g, v| {
            g.cross_entropy(v[0], &l2)
        });
    }
}

fn small_arch() -> ArchConfig {
    ArchConfig {
        input: (1, 3, 3),
        hidden: vec![5],
        latent_dim: 4,
        classes: 3,
        noise_dim: 2,
        generator_hidden: 4,
    }
}

/// A classifier with nonzero biases so no unit sits exactly at a kink.
fn jittered_model(seed: u64) -> ClassifierModel {
    let mut m = ClassifierModel::init(&small_arch(), seed).unwrap();
    for (i, p) in m.params_mut().into_iter().enumerate() {
        let noise = uniform(p.shape(), -0.3, 0.3, seed * 31 + i as u64);
        for (x, e) in p.data_mut().iter_mut().zip(noise.data()) {
            *x += e;
        }
    }
    m
}

pub fn classifier_forward_pass() {
    for seed in 0..SEEDS {
        let model = jittered_model(seed);
        let arch = model.arch.clone();
        let x = uniform(&[4, 1, 3, 3], -1.0, 1.0, seed + 7);
        let labels = vec![0, 2, 1, 2];
        let mut inputs: Vec<Tensor> = model.params().into_iter().cloned().collect();
        inputs.push(x);
        let build = move |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let vars = model.bind(g, false).from_flat(&v[..v.len() - 1]);
            let (_, logits) = models::classifier_forward(g, &arch, &vars, v[v.len() - 1])?;
            g.softmax_cross_entropy(logits, &labels)
        };
        check("classifier", inputs, seed, &build);
    }
}

/// Hessian-vector products through `grad` agree with differences of the
/// first-order gradient.
pub fn second_order_through_grad() {
    for seed in 0..SEEDS {
        let model = jittered_model(seed);
        let x = uniform(&[4, 1, 3, 3], -1.0, 1.0, seed + 9);
        let labels = [1, 0, 2, 1];
        let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
        let dirs: Vec<Tensor> = params
            .iter()
            .enumerate()
            .map(|(i, p)| uniform(p.shape(), -1.0, 1.0, seed * 7 + i as u64))
            .collect();

        let gradient = |ps: &[Tensor]| -> Vec<Tensor> {
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
            let cv = model.bind(&mut g, false).from_flat(&vars);
            let xv = g.constant(x.clone());
            let (_, logits) = models::classifier_forward(&mut g, &model.arch, &cv, xv).unwrap();
            let loss = g.cross_entropy(logits, &labels).unwrap();
            let gr = g.grad(loss, &vars).unwrap();
            gr.iter().map(|v| g.value(*v).clone()).collect()
        };

        // Analytic: grad of <grad L, v>.
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let cv = model.bind(&mut g, false).from_flat(&vars);
        let xv = g.constant(x.clone());
        let (_, logits) = models::classifier_forward(&mut g, &model.arch, &cv, xv).unwrap();
        let loss = g.cross_entropy(logits, &labels).unwrap();
        let gr = g.grad(loss, &vars).unwrap();
        let mut dot = None;
        for (gi, d) in gr.iter().zip(&dirs) {
            let dv = g.constant(d.clone());
            let p = g.mul(*gi, dv).unwrap();
            let s = g.sum(p).unwrap();
            dot = Some(match dot {
                None => s,
                Some(acc) => g.add(acc, s).unwrap(),
            });
        }
        let hvp = g.grad(dot.unwrap(), &vars).unwrap();

        let eps = 1e-5;
        let shifted = |sign: f64| -> Vec<Tensor> {
            params
                .iter()
                .zip(&dirs)
                .map(|(p, d)| {
                    let data = p.data().iter().zip(d.data()).map(|(a, b)| a + sign * eps * b).collect();
                    Tensor::new(p.shape().to_vec(), data).unwrap()
                })
                .collect()
        };
        let (up, down) = (gradient(&shifted(1.0)), gradient(&shifted(-1.0)));
        for i in 0..params.len() {
            let data = up[i]
                .data()
                .iter()
                .zip(down[i].data())
                .map(|(a, b)| (a - b) / (2.0 * eps))
                .collect();
            let numeric = Tensor::new(params[i].shape().to_vec(), data).unwrap();
            let err = max_rel_err(g.value(hvp[i]), &numeric, 1e-3);
            assert!(err < 1e-3, "hvp param {i} seed {seed}: rel err {err:e}");
        }
    }
}

pub fn third_derivative_of_a_cubic() {
    // d^3/dx^3 (x^3) = 6 everywhere.
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(-1.3));
    let x2 = g.mul(x, x).unwrap();
    let x3 = g.mul(x2, x).unwrap();
    let d1 = g.grad(x3, &[x]).unwrap()[0];
    let d2 = g.grad(d1, &[x]).unwrap()[0];
    let d3 = g.grad(d2, &[x]).unwrap()[0];
    assert!((g.value(d1).item() - 3.0 * 1.69).abs() < 1e-12);
    assert!((g.value(d2).item() + 6.0 * 1.3).abs() < 1e-12);
    assert!((g.value(d3).item() - 6.0).abs() < 1e-12);
}
