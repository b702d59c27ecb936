//! Ablation table on the synthetic blob federation.
//!
//! `cargo run --release -p fedmeta-core --example blob_ablation -- [seeds]`
//!
//! `VERBOSE=1` prints every round's accuracy to stderr.

use fedmeta_core::datasets::BlobSource;
use fedmeta_core::orchestrator::{run_fedavg, run_fedmk, Ablation, FederationConfig, ModelConfig};

fn main() -> fedmeta_core::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let verbose = std::env::var("VERBOSE").is_ok_and(|v| v == "1");
    let variants: [(&str, Ablation); 5] = [
        ("full", Ablation::default()),
        (
            "w/o sharing",
            Ablation {
                sharing: false,
                ..Ablation::default()
            },
        ),
        (
            "w/o pseudo",
            Ablation {
                pseudo: false,
                ..Ablation::default()
            },
        ),
        (
            "w/o dynamic",
            Ablation {
                dynamic_weights: false,
                ..Ablation::default()
            },
        ),
        (
            "w/o iter",
            Ablation {
                iter: false,
                ..Ablation::default()
            },
        ),
    ];
    for seed in 0..seeds {
        let source = BlobSource::new(4, (1, 4, 4), 0.5, seed)?;
        let train = source.sample(100, 0)?;
        let test = source.sample(250, 1)?;
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
        let mut line = format!("seed {seed}:");
        for (name, ablation) in variants {
            let run = FederationConfig {
                ablation,
                ..cfg.clone()
            };
            let out = run_fedmk(&run, &train, &test)?;
            if verbose {
                let accs: Vec<String> = out.ledger.iter().map(|r| format!("{:.2}", r.accuracy)).collect();
                eprintln!("  {name}: {}", accs.join(" "));
            }
            line += &format!("  {name} {:.3}", out.ledger.last().map_or(0.0, |r| r.accuracy));
        }
        let avg = run_fedavg(&cfg, &train, &test)?;
        line += &format!("  fedavg {:.3}", avg.ledger.last().map_or(0.0, |r| r.accuracy));
        println!("{line}");
    }
    Ok(())
}
