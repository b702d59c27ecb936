//! Experiment files.
//!
//! A config is a JSON object. Only `dataset`, `methods` and `output_dir` are
//! required; every other section falls back to the library defaults.
//!
//! ```json
//! {
//!   "dataset": { "kind": "blobs", "classes": 4, "dims": [1, 4, 4] },
//!   "methods": ["fedmk", "fedavg"],
//!   "output_dir": "runs/blobs",
//!   "seed": 0,
//!   "federation": { "clients": 8, "active": 4 },
//!   "fmke": { "outer_steps": 50 }
//! }
//! ```
//!
//! Unknown keys anywhere are rejected. Relative paths are resolved against
//! the directory holding the config file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use fedmeta_core::cost::MetaDownload;
use fedmeta_core::datasets::Dims;
use fedmeta_core::orchestrator::FederationConfig;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config is not valid JSON: {0}")]
    Syntax(#[from] serde_json::Error),

    #[error("missing key `{0}`")]
    MissingKey(String),

    #[error("key `{key}`: expected {expected}")]
    TypeMismatch { key: String, expected: String },

    #[error("unknown key `{0}`")]
    UnknownKey(String),

    #[error("invalid configuration: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    FedMk,
    FedAvg,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::FedMk => "fedmk",
            Method::FedAvg => "fedavg",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// Gaussian blobs; train and test are disjoint draws from one source.
    Blobs {
        classes: usize,
        dims: Dims,
        spread: f64,
        train_per_class: usize,
        test_per_class: usize,
        /// `None` follows the run seed.
        seed: Option<u64>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    pub federation: FederationConfig,
    pub methods: Vec<Method>,
    pub output_dir: PathBuf,
}

impl ExperimentSpec {
    /// Replaces the run seed (and the blob seed when it follows the run).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.federation.seed = seed;
        self
    }

    pub fn blob_seed(&self) -> Option<u64> {
        match self.dataset {
            DatasetSpec::Blobs { seed, .. } => Some(seed.unwrap_or(self.federation.seed)),
            DatasetSpec::Idx { .. } => None,
        }
    }

    /// Everything that determines the results, as sorted-key JSON. The
    /// output location is deliberately left out.
    pub fn canonical_json(&self) -> String {
        let dataset = match &self.dataset {
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => json!({
                "kind": "idx",
                "train_images": train_images,
                "train_labels": train_labels,
                "test_images": test_images,
                "test_labels": test_labels,
            }),
            DatasetSpec::Blobs {
                classes,
                dims,
                spread,
                train_per_class,
                test_per_class,
                ..
            } => json!({
                "kind": "blobs",
                "classes": classes,
                "dims": [dims.0, dims.1, dims.2],
                "spread": spread,
                "train_per_class": train_per_class,
                "test_per_class": test_per_class,
                "seed": self.blob_seed(),
            }),
        };
        let methods: Vec<&str> = self.methods.iter().map(|m| m.name()).collect();
        let mut fed = serde_json::to_value(&self.federation).expect("serializable");
        // Threading does not change results.
        if let Value::Object(m) = &mut fed {
            m.remove("parallel");
        }
        json!({ "dataset": dataset, "methods": methods, "federation": fed }).to_string()
    }

    /// Hex SHA-256 of [`canonical_json`](Self::canonical_json).
    pub fn config_hash(&self) -> String {
        Sha256::digest(self.canonical_json().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_str(&text, base)
}

/// Parses config text, resolving relative paths against `base`.
pub fn parse_str(text: &str, base: &Path) -> Result<ExperimentSpec> {
    let value: Value = serde_json::from_str(text)?;
    let mut root = Section::new(&value, "")?;
    let dataset = dataset(root.required("dataset")?, base)?;
    let methods = methods(root.required("methods")?)?;
    let output_dir = base.join(root.string("output_dir")?);

    let mut fed = FederationConfig::default();
    if let Some(v) = root.optional("seed") {
        fed.seed = as_u64(v, "seed")?;
    }
    if let Some(v) = root.optional("federation") {
        let mut s = Section::new(v, "federation")?;
        s.usize("clients", &mut fed.clients)?;
        s.usize("active", &mut fed.active)?;
        s.usize("rounds", &mut fed.rounds)?;
        s.positive("alpha_dirichlet", &mut fed.alpha_dirichlet)?;
        s.unit_interval("fraction", &mut fed.fraction)?;
        if let Some(v) = s.optional("max_classes_per_client") {
            let key = s.key("max_classes_per_client");
            fed.max_classes_per_client = if v.is_null() { None } else { Some(as_usize(v, &key)?) };
        }
        if let Some(v) = s.optional("meta_download") {
            fed.meta_download = match v.as_str() {
                Some("peer_share") => MetaDownload::PeerShare,
                Some("full_pool") => MetaDownload::FullPool,
                _ => return Err(mismatch(&s.key("meta_download"), "\"peer_share\" or \"full_pool\"")),
            };
        }
        s.bool("parallel", &mut fed.parallel)?;
        s.finish()?;
    }
    if let Some(v) = root.optional("model") {
        let m = &mut fed.model;
        let mut s = Section::new(v, "model")?;
        if let Some(v) = s.optional("hidden") {
            let key = s.key("hidden");
            let items = v
                .as_array()
                .ok_or_else(|| mismatch(&key, "an array of positive integers"))?;
            m.hidden = items
                .iter()
                .map(|h| as_usize(h, &key).and_then(|n| nonzero(n, &key)))
                .collect::<Result<_>>()?;
        }
        s.count("latent_dim", &mut m.latent_dim)?;
        s.count("noise_dim", &mut m.noise_dim)?;
        s.count("generator_hidden", &mut m.generator_hidden)?;
        s.finish()?;
    }
    if let Some(v) = root.optional("fmke") {
        let f = &mut fed.fmke;
        let mut s = Section::new(v, "fmke")?;
        s.positive("eta", &mut f.eta)?;
        s.positive("alpha_meta", &mut f.alpha_meta)?;
        s.positive("tau", &mut f.tau)?;
        s.count("outer_steps", &mut f.outer_steps)?;
        s.count("inner_steps", &mut f.inner_steps)?;
        s.count("batch_size", &mut f.batch_size)?;
        s.count("meta_per_class", &mut f.meta_per_class)?;
        s.finish()?;
    }
    if let Some(v) = root.optional("server") {
        let c = &mut fed.server;
        let mut s = Section::new(v, "server")?;
        s.usize("epochs", &mut c.epochs)?;
        s.positive("lr", &mut c.lr)?;
        s.count("batch_size", &mut c.batch_size)?;
        s.usize("generator_steps", &mut c.generator_steps)?;
        s.positive("generator_lr", &mut c.generator_lr)?;
        s.count("generator_batch", &mut c.generator_batch)?;
        if let Some(v) = s.optional("n_pseudo") {
            let key = s.key("n_pseudo");
            c.n_pseudo = if v.is_null() { None } else { Some(as_usize(v, &key)?) };
        }
        s.finish()?;
    }
    if let Some(v) = root.optional("fedavg") {
        let c = &mut fed.fedavg;
        let mut s = Section::new(v, "fedavg")?;
        s.count("local_steps", &mut c.local_steps)?;
        s.count("batch_size", &mut c.batch_size)?;
        s.positive("lr", &mut c.lr)?;
        s.finish()?;
    }
    if let Some(v) = root.optional("ablation") {
        let a = &mut fed.ablation;
        let mut s = Section::new(v, "ablation")?;
        s.bool("iter", &mut a.iter)?;
        s.bool("sharing", &mut a.sharing)?;
        s.bool("pseudo", &mut a.pseudo)?;
        s.bool("dynamic_weights", &mut a.dynamic_weights)?;
        s.finish()?;
    }
    root.finish()?;
    fed.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

    Ok(ExperimentSpec {
        dataset,
        federation: fed,
        methods,
        output_dir,
    })
}

fn dataset(v: &Value, base: &Path) -> Result<DatasetSpec> {
    let mut s = Section::new(v, "dataset")?;
    let spec = match s.string("kind")?.as_str() {
        "idx" => DatasetSpec::Idx {
            train_images: base.join(s.string("train_images")?),
            train_labels: base.join(s.string("train_labels")?),
            test_images: base.join(s.string("test_images")?),
            test_labels: base.join(s.string("test_labels")?),
        },
        "blobs" => {
            let key = s.key("dims");
            let dims = match s.required("dims")?.as_array().map(Vec::as_slice) {
                Some([c, w, h]) => (
                    nonzero(as_usize(c, &key)?, &key)?,
                    nonzero(as_usize(w, &key)?, &key)?,
                    nonzero(as_usize(h, &key)?, &key)?,
                ),
                _ => return Err(mismatch(&key, "[channels, width, height]")),
            };
            let key = s.key("classes");
            let classes = as_usize(s.required("classes")?, &key)?;
            if classes < 2 {
                return Err(mismatch(&key, "an integer >= 2"));
            }
            let mut spread = 0.5;
            let mut train_per_class = 100;
            let mut test_per_class = 250;
            s.positive("spread", &mut spread)?;
            s.count("train_per_class", &mut train_per_class)?;
            s.count("test_per_class", &mut test_per_class)?;
            let seed = match s.optional("seed") {
                Some(v) => Some(as_u64(v, &s.key("seed"))?),
                None => None,
            };
            DatasetSpec::Blobs {
                classes,
                dims,
                spread,
                train_per_class,
                test_per_class,
                seed,
            }
        }
        _ => return Err(mismatch("dataset.kind", "\"idx\" or \"blobs\"")),
    };
    s.finish()?;
    Ok(spec)
}

fn methods(v: &Value) -> Result<Vec<Method>> {
    let expected = "a nonempty array of \"fedmk\" / \"fedavg\"";
    let items = v.as_array().ok_or_else(|| mismatch("methods", expected))?;
    let mut out = BTreeSet::new();
    for item in items {
        out.insert(match item.as_str() {
            Some("fedmk") => Method::FedMk,
            Some("fedavg") => Method::FedAvg,
            _ => return Err(mismatch("methods", expected)),
        });
    }
    if out.is_empty() {
        return Err(mismatch("methods", expected));
    }
    Ok(out.into_iter().collect())
}

fn mismatch(key: &str, expected: &str) -> ConfigError {
    ConfigError::TypeMismatch {
        key: key.to_owned(),
        expected: expected.to_owned(),
    }
}

fn as_u64(v: &Value, key: &str) -> Result<u64> {
    v.as_u64().ok_or_else(|| mismatch(key, "a non-negative integer"))
}

fn as_usize(v: &Value, key: &str) -> Result<usize> {
    as_u64(v, key).map(|n| n as usize)
}

fn nonzero(n: usize, key: &str) -> Result<usize> {
    if n == 0 {
        return Err(mismatch(key, "a positive integer"));
    }
    Ok(n)
}

/// One JSON object; tracks which keys were read so leftovers can be
/// reported.
struct Section<'a> {
    map: &'a Map<String, Value>,
    path: &'a str,
    seen: BTreeSet<&'a str>,
}

impl<'a> Section<'a> {
    fn new(v: &'a Value, path: &'a str) -> Result<Self> {
        let map = v
            .as_object()
            .ok_or_else(|| mismatch(if path.is_empty() { "<root>" } else { path }, "an object"))?;
        Ok(Section {
            map,
            path,
            seen: BTreeSet::new(),
        })
    }

    fn key(&self, name: &str) -> String {
        if self.path.is_empty() {
            name.to_owned()
        } else {
            format!("{}.{name}", self.path)
        }
    }

    fn optional(&mut self, name: &'a str) -> Option<&'a Value> {
        self.seen.insert(name);
        self.map.get(name)
    }

    fn required(&mut self, name: &'a str) -> Result<&'a Value> {
        self.optional(name)
            .ok_or_else(|| ConfigError::MissingKey(self.key(name)))
    }

    fn string(&mut self, name: &'a str) -> Result<String> {
        let v = self.required(name)?;
        v.as_str()
            .map(str::to_owned)
            .ok_or_else(|| mismatch(&self.key(name), "a string"))
    }

    fn usize(&mut self, name: &'a str, slot: &mut usize) -> Result<()> {
        if let Some(v) = self.optional(name) {
            *slot = as_usize(v, &self.key(name))?;
        }
        Ok(())
    }

    fn count(&mut self, name: &'a str, slot: &mut usize) -> Result<()> {
        self.usize(name, slot)?;
        nonzero(*slot, &self.key(name)).map(drop)
    }

    fn float(&mut self, name: &'a str, slot: &mut f64, ok: fn(f64) -> bool, expected: &str) -> Result<()> {
        if let Some(v) = self.optional(name) {
            match v.as_f64() {
                Some(x) if ok(x) => *slot = x,
                _ => return Err(mismatch(&self.key(name), expected)),
            }
        }
        Ok(())
    }

    fn positive(&mut self, name: &'a str, slot: &mut f64) -> Result<()> {
        self.float(name, slot, |x| x > 0.0 && x.is_finite(), "a positive number")
    }

    fn unit_interval(&mut self, name: &'a str, slot: &mut f64) -> Result<()> {
        self.float(name, slot, |x| x > 0.0 && x <= 1.0, "a number in (0, 1]")
    }

    fn bool(&mut self, name: &'a str, slot: &mut bool) -> Result<()> {
        if let Some(v) = self.optional(name) {
            *slot = v.as_bool().ok_or_else(|| mismatch(&self.key(name), "true or false"))?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().find(|k| !self.seen.contains(k.as_str())) {
            Some(k) => Err(ConfigError::UnknownKey(self.key(k))),
            None => Ok(()),
        }
    }
}
