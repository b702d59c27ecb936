use fedmeta_core::datasets::synth_blobs;
use fedmeta_core::fmke::MetaKnowledge;
use fedmeta_core::models::{self, ArchConfig, ClassifierModel, ConditionalGenerator};
use fedmeta_core::rng::{self, Purpose};
use fedmeta_core::server::{self, ServerConfig};

fn arch() -> ArchConfig {
    ArchConfig {
        input: (1, 3, 3),
        hidden: vec![16],
        latent_dim: 8,
        classes: 4,
        noise_dim: 4,
        generator_hidden: 16,
    }
}

fn blob_meta(n_per_class: usize, seed: u64) -> MetaKnowledge {
    let ds = synth_blobs(4, n_per_class, (1, 3, 3), 0.2, seed).unwrap();
    MetaKnowledge {
        images: ds.images,
        labels: ds.labels,
        classes: 4,
    }
}

fn trained_classifier(meta: &MetaKnowledge) -> ClassifierModel {
    let model = ClassifierModel::init(&arch(), 1).unwrap();
    let cfg = ServerConfig {
        epochs: 60,
        lr: 0.1,
        ..ServerConfig::default()
    };
    server::train_global_on_meta(&model, meta, &cfg, &mut rng::stream(0, Purpose::Server, &[])).unwrap()
}

#[test]
fn meta_training_raises_training_accuracy() {
    let meta = blob_meta(25, 3);
    let model = ClassifierModel::init(&arch(), 2).unwrap();
    let before = models::accuracy(&model, &meta.images, &meta.labels).unwrap();
    // 100 steps: 4 epochs of 25 batches.
    let cfg = ServerConfig {
        epochs: 4,
        lr: 0.05,
        batch_size: 4,
        ..ServerConfig::default()
    };
    let trained = server::train_global_on_meta(&model, &meta, &cfg, &mut rng::stream(0, Purpose::Server, &[])).unwrap();
    let after = models::accuracy(&trained, &meta.images, &meta.labels).unwrap();
    assert!(after > before, "{after} <= {before}");
}

#[test]
fn single_sample_is_overfit_monotonically() {
    let meta = {
        let m = blob_meta(1, 5);
        MetaKnowledge {
            images: m.images.slice_rows(0, 1),
            labels: vec![m.labels[0]],
            classes: 4,
        }
    };
    let mut model = ClassifierModel::init(&arch(), 4).unwrap();
    let cfg = ServerConfig {
        epochs: 1,
        lr: 0.01,
        ..ServerConfig::default()
    };
    let mut r = rng::stream(0, Purpose::Server, &[]);
    let mut losses = Vec::new();
    for _ in 0..400 {
        model = server::train_global_on_meta(&model, &meta, &cfg, &mut r).unwrap();
        losses.push(models::per_sample_loss(&model, &meta.images, &meta.labels).unwrap()[0]);
    }
    assert!(losses[20..].windows(2).all(|w| w[1] <= w[0]));
    assert!(losses[399] < 0.05 * losses[0], "{} vs {}", losses[399], losses[0]);
}

#[test]
fn generator_learns_the_frozen_head() {
    let meta = blob_meta(40, 7);
    let model = trained_classifier(&meta);
    assert!(models::accuracy(&model, &meta.images, &meta.labels).unwrap() > 0.9);
    let gen = ConditionalGenerator::init(&arch(), 3).unwrap();
    let cfg = ServerConfig {
        generator_steps: 300,
        generator_lr: 0.05,
        ..ServerConfig::default()
    };
    let mut r = rng::stream(0, Purpose::Server, &[1]);
    let before = server::generator_loss(&gen, &model, &meta, 2000, &mut r).unwrap();
    let snapshot = model.checksum();
    let trained = server::train_generator(&gen, &model, &meta, &cfg, &mut r).unwrap();
    assert_eq!(model.checksum(), snapshot);
    let after = server::generator_loss(&trained, &model, &meta, 2000, &mut r).unwrap();
    assert!(after < (4f64).ln() / 2.0, "{before} -> {after}");
    assert!(after < before);
}

#[test]
fn pseudo_labels_follow_meta_label_frequencies() {
    // Skewed meta: class 0 is 70%, others 10% each.
    let ds = synth_blobs(4, 10, (1, 3, 3), 0.2, 0).unwrap();
    let mut idx: Vec<usize> = (0..10).collect();
    for _ in 0..6 {
        idx.extend(0..10);
    }
    idx.extend(10..40);
    let sub = ds.subset(&idx);
    let meta = MetaKnowledge {
        images: sub.images,
        labels: sub.labels,
        classes: 4,
    };
    let gen = ConditionalGenerator::init(&arch(), 0).unwrap();
    let p = server::sample_pseudo(&gen, &meta, 10_000, &mut rng::stream(2, Purpose::Server, &[])).unwrap();
    assert_eq!(p.latents.shape(), &[10_000, 8]);
    let expected = [0.7, 0.1, 0.1, 0.1];
    for (k, e) in expected.iter().enumerate() {
        let f = p.labels.iter().filter(|&&y| y == k).count() as f64 / 10_000.0;
        assert!((f - e).abs() < 0.02, "class {k}: {f}");
    }
}

#[test]
fn pseudo_term_never_reaches_the_extractor() {
    let meta = blob_meta(4, 1);
    let model = trained_classifier(&meta);
    let gen = ConditionalGenerator::init(&arch(), 9).unwrap();
    let pseudo = server::sample_pseudo(&gen, &meta, 16, &mut rng::stream(0, Purpose::Server, &[3])).unwrap();
    let beta = server::beta(pseudo.len(), meta.len());
    assert_eq!(beta, 1.0);
    let (_, plain) = server::combined_gradients(&model, &meta.images, &meta.labels, None, 0.0).unwrap();
    let (_, mixed) = server::combined_gradients(
        &model,
        &meta.images,
        &meta.labels,
        Some((&pseudo.latents, &pseudo.labels)),
        beta,
    )
    .unwrap();
    let n_extractor = 2 * model.extractor.0.len();
    for i in 0..n_extractor {
        assert_eq!(plain[i], mixed[i], "extractor tensor {i}");
    }
    assert!((n_extractor..plain.len()).any(|i| plain[i] != mixed[i]));
}

#[test]
fn beta_is_exact() {
    assert_eq!(server::beta(50, 200), 0.25);
    assert_eq!(server::beta(0, 200), 0.0);
    assert_eq!(server::beta(3, 7), 3.0 / 7.0);
}

#[test]
fn combined_training_is_deterministic_per_stream() {
    let meta = blob_meta(8, 2);
    let model = ClassifierModel::init(&arch(), 5).unwrap();
    let gen = ConditionalGenerator::init(&arch(), 5).unwrap();
    let cfg = ServerConfig::default();
    let pseudo = server::sample_pseudo(&gen, &meta, 20, &mut rng::stream(0, Purpose::Server, &[4])).unwrap();
    let a =
        server::train_global_combined(&model, &meta, &pseudo, &cfg, &mut rng::stream(1, Purpose::Server, &[])).unwrap();
    let b =
        server::train_global_combined(&model, &meta, &pseudo, &cfg, &mut rng::stream(1, Purpose::Server, &[])).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, model);
}
