//! FedMK vs FedAvg on the bundled MNIST subset.
//!
//! `cargo run --release -p fedmeta-core --example mnist_compare -- [seed]`
//!
//! Hyperparameters can be overridden through environment variables such as
//! `ETA`, `ALPHA_META`, `OUTER_STEPS`, `SERVER_LR`, `SERVER_EPOCHS` and
//! `FEDAVG_LR`. `PSEUDO=0`, `DYN=0` and `SHARING=0` switch off components.

use fedmeta_core::datasets::load_idx;
use fedmeta_core::orchestrator::{run_fedavg, run_fedmk, FederationConfig};

fn env<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> fedmeta_core::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let dir = env("MNIST_DIR", "data/mnist".to_string());
    let train = load_idx(
        format!("{dir}/train-images-idx3-ubyte"),
        format!("{dir}/train-labels-idx1-ubyte"),
    )?;
    let test = load_idx(
        format!("{dir}/t10k-images-idx3-ubyte"),
        format!("{dir}/t10k-labels-idx1-ubyte"),
    )?;

    let mut cfg = FederationConfig {
        fraction: 1.0,
        seed,
        ..FederationConfig::default()
    };
    cfg.fmke.eta = env("ETA", cfg.fmke.eta);
    cfg.fmke.alpha_meta = env("ALPHA_META", cfg.fmke.alpha_meta);
    cfg.fmke.outer_steps = env("OUTER_STEPS", 50);
    cfg.server.lr = env("SERVER_LR", cfg.server.lr);
    cfg.server.epochs = env("SERVER_EPOCHS", 2);
    cfg.server.generator_steps = env("GEN_STEPS", cfg.server.generator_steps);
    cfg.fedavg.lr = env("FEDAVG_LR", cfg.fedavg.lr);
    cfg.rounds = env("ROUNDS", cfg.rounds);
    cfg.fmke.inner_steps = env("INNER", cfg.fmke.inner_steps);
    cfg.fmke.batch_size = env("FMKE_BATCH", cfg.fmke.batch_size);
    cfg.alpha_dirichlet = env("ALPHA_DIR", cfg.alpha_dirichlet);
    cfg.server.batch_size = env("SERVER_BATCH", cfg.server.batch_size);
    cfg.ablation.pseudo = env("PSEUDO", 1) != 0;
    cfg.ablation.dynamic_weights = env("DYN", 1) != 0;
    cfg.ablation.sharing = env("SHARING", 1) != 0;

    if env("SKIP_FEDAVG", 0) == 0 {
        let avg = run_fedavg(&cfg, &train, &test)?;
        for r in &avg.ledger {
            println!("fedavg round {:>2} acc {:.4} ({} ms)", r.round, r.accuracy, r.wall_ms);
        }
    }
    let mk = run_fedmk(&cfg, &train, &test)?;
    for r in &mk.ledger {
        println!("fedmk  round {:>2} acc {:.4} ({} ms)", r.round, r.accuracy, r.wall_ms);
    }
    Ok(())
}
