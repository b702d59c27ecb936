//! Property checks shared by the unit suites and the acceptance run.

use std::collections::BTreeSet;

use fedmeta_core::datasets::{dirichlet_partition, synth_blobs, PartitionConfig};
use fedmeta_core::fmke::{self, FmkeConfig, WeightedBatch};
use fedmeta_core::models::{ArchConfig, ClassifierModel};
use fedmeta_core::Error;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use super::{bilevel_loss, central_diff, max_rel_err, uniform, TwoLayer};

/// Two classes, 1x2x3 inputs, a single linear layer into `d_z = 8`.
pub fn hypergrad_arch() -> ArchConfig {
    ArchConfig {
        input: (1, 2, 3),
        hidden: vec![],
        latent_dim: 8,
        classes: 2,
        noise_dim: 2,
        generator_hidden: 4,
    }
}

/// Freshly initialized weights plus uniform noise, so biases are nonzero
/// and no unit starts at a kink.
pub fn jittered(seed: u64) -> ClassifierModel {
    let mut m = ClassifierModel::init(&hypergrad_arch(), seed).unwrap();
    for (i, p) in m.params_mut().into_iter().enumerate() {
        let e = uniform(p.shape(), -0.2, 0.2, seed * 13 + i as u64);
        for (x, d) in p.data_mut().iter_mut().zip(e.data()) {
            *x += d;
        }
    }
    m
}

/// Hypergradient of a two-per-class meta set against the hand-written
/// network, differentiated by central differences.
pub fn hypergradient_case(seed: u64, eta: f64) -> Result<(), TestCaseError> {
    let model = jittered(seed);
    let meta = fmke::uniform_init(2, 2, (1, 2, 3), seed);
    let real = synth_blobs(2, 4, (1, 2, 3), 0.4, seed).unwrap();
    let phi = fmke::dynamic_weights(&model, &real.images, &real.labels, 5.0).unwrap();
    let cfg = FmkeConfig {
        eta,
        ..FmkeConfig::default()
    };
    let batch = WeightedBatch {
        images: &real.images,
        labels: &real.labels,
        weights: &phi,
    };
    let (loss, hg) = fmke::hypergradient(&meta, &model, &batch, &cfg).unwrap();

    let net = TwoLayer::from_params(&model.params());
    let oracle = |m: &fedmeta_core::Tensor| {
        bilevel_loss(
            &net,
            m.data(),
            &meta.labels,
            eta,
            real.images.data(),
            &real.labels,
            &phi,
        )
    };
    prop_assert!((loss - oracle(&meta.images)).abs() < 1e-10);
    prop_assert!(hg.data().iter().any(|v| v.abs() > 1e-6));
    let numeric = central_diff(&meta.images, 1e-4, oracle);
    let err = max_rel_err(&hg, &numeric, 1e-6);
    prop_assert!(err < 1e-3, "rel err {err:e}");
    Ok(())
}

pub fn hypergradient_inputs() -> impl Strategy<Value = (u64, f64)> {
    (0u64..10_000, 0.05f64..1.0)
}

#[derive(Clone, Debug)]
pub struct PartitionCase {
    pub classes: usize,
    pub per_class: usize,
    pub clients: usize,
    pub alpha: f64,
    pub fraction: f64,
    pub cap: Option<usize>,
    pub seed: u64,
}

pub fn partition_cases() -> impl Strategy<Value = PartitionCase> {
    (
        2usize..6,
        5usize..40,
        1usize..8,
        0.05f64..10.0,
        0.3f64..=1.0,
        proptest::option::of(1usize..4),
        any::<u64>(),
    )
        .prop_map(
            |(classes, per_class, clients, alpha, fraction, cap, seed)| PartitionCase {
                classes,
                per_class,
                clients,
                alpha,
                fraction,
                cap,
                seed,
            },
        )
}

/// Disjoint non-empty shards that together keep `round(fraction * n_k)`
/// samples of every class, with weights proportional to shard size.
pub fn partition_case(c: &PartitionCase) -> Result<(), TestCaseError> {
    let ds = synth_blobs(c.classes, c.per_class, (1, 1, 2), 0.1, c.seed % 97).unwrap();
    let cfg = PartitionConfig {
        clients: c.clients,
        alpha: c.alpha,
        fraction: c.fraction,
        max_classes_per_client: c.cap,
        seed: c.seed,
    };
    let p = match dirichlet_partition(&ds, &cfg) {
        Ok(p) => p,
        // Tiny datasets can legitimately fail to give every client data.
        Err(Error::RetryExhausted(100)) => return Ok(()),
        Err(e) => return Err(TestCaseError::fail(e.to_string())),
    };
    prop_assert_eq!(p.assignments.len(), c.clients);
    let mut seen = BTreeSet::new();
    for a in &p.assignments {
        prop_assert!(!a.is_empty());
        for &i in a {
            prop_assert!(seen.insert(i), "index {} assigned twice", i);
        }
    }
    let kept = (c.fraction * c.per_class as f64).round() as usize;
    for k in 0..c.classes {
        let n = seen.iter().filter(|&&i| ds.labels[i] == k).count();
        prop_assert_eq!(n, kept);
    }
    let total: f64 = p.weights.iter().sum();
    prop_assert!((total - 1.0).abs() < 1e-12);
    for (w, a) in p.weights.iter().zip(&p.assignments) {
        prop_assert!((w - a.len() as f64 / seen.len() as f64).abs() < 1e-15);
    }
    Ok(())
}
