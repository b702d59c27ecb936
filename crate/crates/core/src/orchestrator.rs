//! Round loops for FedMK and the FedAvg baseline.
//!
//! Rounds are sequential. Inside a round, active clients run as independent
//! tasks (optionally on the rayon pool) with private model copies and RNG
//! streams keyed by `(seed, round, client)`, so parallel and serial
//! execution produce identical results.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{self, MetaDownload};
use crate::datasets::{dirichlet_partition, Dataset, Partition, PartitionConfig};
use crate::error::{Error, Result};
use crate::fmke::{self, FmkeConfig, MetaKnowledge};
use crate::ledger::RoundLedger;
use crate::models::{self, ArchConfig, ClassifierModel, ConditionalGenerator};
use crate::rng::{self, Purpose};
use crate::server::{self, ServerConfig, UploadBundle};
use crate::tensor::Tensor;

/// Architecture knobs that do not depend on the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub noise_dim: usize,
    pub generator_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![128],
            latent_dim: 64,
            noise_dim: 32,
            generator_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn arch_for(&self, ds: &Dataset) -> ArchConfig {
        ArchConfig {
            input: ds.dims(),
            hidden: self.hidden.clone(),
            latent_dim: self.latent_dim,
            classes: ds.classes,
            noise_dim: self.noise_dim,
            generator_hidden: self.generator_hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedAvgConfig {
    pub local_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for FedAvgConfig {
    fn default() -> Self {
        FedAvgConfig {
            local_steps: 20,
            batch_size: 32,
            lr: 0.01,
        }
    }
}

/// Mechanism switches; turning one off gives the matching ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Multiple rounds; when off the run is one-shot.
    pub iter: bool,
    /// Conditional initialization from a peer's previous meta knowledge.
    pub sharing: bool,
    /// Generator-sampled pseudo knowledge on the server.
    pub pseudo: bool,
    pub dynamic_weights: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            iter: true,
            sharing: true,
            pseudo: true,
            dynamic_weights: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub clients: usize,
    pub active: usize,
    pub rounds: usize,
    pub alpha_dirichlet: f64,
    pub fraction: f64,
    pub max_classes_per_client: Option<usize>,
    pub model: ModelConfig,
    pub fmke: FmkeConfig,
    pub server: ServerConfig,
    pub fedavg: FedAvgConfig,
    pub ablation: Ablation,
    pub meta_download: MetaDownload,
    pub parallel: bool,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            clients: 20,
            active: 10,
            rounds: 10,
            alpha_dirichlet: 0.5,
            fraction: 0.5,
            max_classes_per_client: None,
            model: ModelConfig::default(),
            fmke: FmkeConfig::default(),
            server: ServerConfig::default(),
            fedavg: FedAvgConfig::default(),
            ablation: Ablation::default(),
            meta_download: MetaDownload::default(),
            parallel: true,
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.active == 0 || self.active > self.clients {
            return Err(Error::contract("need 1 <= active <= clients"));
        }
        if self.rounds == 0 {
            return Err(Error::contract("rounds must be >= 1"));
        }
        self.fmke.validate()
    }

    /// Rounds actually run: one-shot when iteration is ablated.
    pub fn effective_rounds(&self) -> usize {
        if self.ablation.iter {
            self.rounds
        } else {
            1
        }
    }

    pub fn partition(&self, train: &Dataset) -> Result<Partition> {
        dirichlet_partition(
            train,
            &PartitionConfig {
                clients: self.clients,
                alpha: self.alpha_dirichlet,
                fraction: self.fraction,
                max_classes_per_client: self.max_classes_per_client,
                seed: self.seed,
            },
        )
    }
}

/// `active` distinct client ids drawn uniformly without replacement,
/// sorted ascending.
pub fn select_active(clients: usize, active: usize, round: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng::stream(seed, Purpose::Selection, &[round as u64]);
    let mut ids = index::sample(&mut rng, clients, active).into_vec();
    ids.sort_unstable();
    ids
}

/// `sum_c w_c * params_c` for parameter lists of identical layout.
pub fn weighted_average(params: &[Vec<Tensor>], weights: &[f64]) -> Result<Vec<Tensor>> {
    let first = params.first().ok_or_else(|| Error::contract("nothing to aggregate"))?;
    if params.len() != weights.len() {
        return Err(Error::contract("one weight per model required"));
    }
    let mut out: Vec<Tensor> = first.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (model, &w) in params.iter().zip(weights) {
        if model.len() != out.len() {
            return Err(Error::shape("models disagree on parameter count"));
        }
        for (acc, t) in out.iter_mut().zip(model) {
            if acc.shape() != t.shape() {
                return Err(Error::shape("models disagree on parameter shapes"));
            }
            for (a, &x) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += w * x;
            }
        }
    }
    Ok(out)
}

/// Final model plus one ledger row per round.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub ledger: Vec<RoundLedger>,
    pub model: ClassifierModel,
}

fn map_clients<T: Send>(
    parallel: bool,
    clients: &[usize],
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    if parallel {
        clients.par_iter().map(|&c| f(c)).collect()
    } else {
        clients.iter().map(|&c| f(c)).collect()
    }
}

fn client_data(train: &Dataset, partition: &Partition) -> Vec<Dataset> {
    partition.assignments.iter().map(|a| train.subset(a)).collect()
}

/// Runs FedMK end to end and evaluates on `test` after every round.
pub fn run_fedmk(cfg: &FederationConfig, train: &Dataset, test: &Dataset) -> Result<RunOutcome> {
    cfg.validate()?;
    let arch = cfg.model.arch_for(train);
    let partition = cfg.partition(train)?;
    let locals = client_data(train, &partition);
    let mut fmke_cfg = cfg.fmke.clone();
    fmke_cfg.dynamic_weights = cfg.ablation.dynamic_weights;

    let mut global = ClassifierModel::init(&arch, cfg.seed)?;
    let mut generator = ConditionalGenerator::init(&arch, cfg.seed)?;
    let model_bytes = cost::model_bytes(global.param_count() as u64);

    let mut pool: BTreeMap<usize, MetaKnowledge> = BTreeMap::new();
    let mut ledger = Vec::new();
    let mut cum_bytes = 0u64;

    for round in 1..=cfg.effective_rounds() {
        let started = Instant::now();
        let active = select_active(cfg.clients, cfg.active, round, cfg.seed);

        // What each client downloads with the model.
        let meta_down = if cfg.ablation.sharing && !pool.is_empty() {
            match cfg.meta_download {
                MetaDownload::PeerShare => pool.values().next().map_or(0, |m| m.payload_bytes()),
                MetaDownload::FullPool => pool.values().map(|m| m.payload_bytes()).sum(),
            }
        } else {
            0
        };

        let broadcast = &global;
        let prev_pool = &pool;
        let metas = map_clients(cfg.parallel, &active, |c| {
            let mut rng = rng::stream(cfg.seed, Purpose::Client, &[round as u64, c as u64]);
            let per_class = fmke_cfg.meta_per_class;
            let init = if cfg.ablation.sharing {
                fmke::conditional_init(prev_pool, c, arch.classes, per_class, arch.input, &mut rng)
            } else {
                fmke::uniform_init(arch.classes, per_class, arch.input, rand::Rng::random(&mut rng))
            };
            fmke::extract_meta_knowledge(c, &locals[c], broadcast, init, &fmke_cfg, &mut rng)
        })
        .map_err(|e| e.in_round(round))?;

        let bundle = UploadBundle {
            round,
            senders: active.clone(),
            metas,
        };
        let up_bytes: u64 = bundle.metas.iter().map(MetaKnowledge::payload_bytes).sum();
        let meta_all = bundle.concat().map_err(|e| e.in_round(round))?;

        let mut rng = rng::stream(cfg.seed, Purpose::Server, &[round as u64]);
        global = if cfg.ablation.pseudo {
            generator = server::train_generator(&generator, &global, &meta_all, &cfg.server, &mut rng)
                .map_err(|e| e.in_round(round))?;
            let n_pseudo = cfg.server.n_pseudo.unwrap_or(meta_all.len());
            let pseudo =
                server::sample_pseudo(&generator, &meta_all, n_pseudo, &mut rng).map_err(|e| e.in_round(round))?;
            server::train_global_combined(&global, &meta_all, &pseudo, &cfg.server, &mut rng)
        } else {
            server::train_global_on_meta(&global, &meta_all, &cfg.server, &mut rng)
        }
        .map_err(|e| e.in_round(round))?;

        pool = bundle.senders.into_iter().zip(bundle.metas).collect();

        let accuracy = models::accuracy(&global, &test.images, &test.labels)?;
        let down_bytes = (model_bytes + meta_down) * active.len() as u64;
        cum_bytes += up_bytes + down_bytes;
        ledger.push(RoundLedger {
            round,
            accuracy,
            up_bytes,
            down_bytes,
            cum_bytes,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }

    Ok(RunOutcome { ledger, model: global })
}

/// Local mini-batch SGD on one client's data.
pub fn local_sgd(
    model: &ClassifierModel,
    local: &Dataset,
    cfg: &FedAvgConfig,
    rng: &mut rng::Rng,
) -> Result<ClassifierModel> {
    if local.is_empty() {
        return Err(Error::contract("client holds no data"));
    }
    let mut model = model.clone();
    for _ in 0..cfg.local_steps {
        let idx = fmke::sample_batch(local.len(), cfg.batch_size, rng);
        let images = local.images.select_rows(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| local.labels[i]).collect();
        let (loss, grads) = server::combined_gradients(&model, &images, &labels, None, 0.0)?;
        if !loss.is_finite() {
            return Err(Error::numeric("local training loss diverged"));
        }
        model.sgd_step(&grads, cfg.lr);
    }
    Ok(model)
}

/// FedAvg baseline: local SGD on active clients, sample-count weighted
/// parameter averaging on the server.
pub fn run_fedavg(cfg: &FederationConfig, train: &Dataset, test: &Dataset) -> Result<RunOutcome> {
    cfg.validate()?;
    let arch = cfg.model.arch_for(train);
    let partition = cfg.partition(train)?;
    let locals = client_data(train, &partition);

    let mut global = ClassifierModel::init(&arch, cfg.seed)?;
    let model_bytes = cost::model_bytes(global.param_count() as u64);
    let mut ledger = Vec::new();
    let mut cum_bytes = 0u64;

    for round in 1..=cfg.rounds {
        let started = Instant::now();
        let active = select_active(cfg.clients, cfg.active, round, cfg.seed);
        let broadcast = &global;
        let updates = map_clients(cfg.parallel, &active, |c| {
            let mut rng = rng::stream(cfg.seed, Purpose::Client, &[round as u64, c as u64]);
            local_sgd(broadcast, &locals[c], &cfg.fedavg, &mut rng).map_err(|e| e.in_client(c))
        })
        .map_err(|e| e.in_round(round))?;

        let total: usize = active.iter().map(|&c| locals[c].len()).sum();
        let weights: Vec<f64> = active.iter().map(|&c| locals[c].len() as f64 / total as f64).collect();
        let params: Vec<Vec<Tensor>> = updates
            .iter()
            .map(|m| m.params().into_iter().cloned().collect())
            .collect();
        global.set_params(weighted_average(&params, &weights)?)?;

        let accuracy = models::accuracy(&global, &test.images, &test.labels)?;
        let transfer = model_bytes * active.len() as u64;
        cum_bytes += 2 * transfer;
        ledger.push(RoundLedger {
            round,
            accuracy,
            up_bytes: transfer,
            down_bytes: transfer,
            cum_bytes,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }

    Ok(RunOutcome { ledger, model: global })
}
