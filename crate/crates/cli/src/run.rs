use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use fedmeta_core::cost::{self, CostInputs};
use fedmeta_core::datasets::{load_idx, BlobSource, Dataset};
use fedmeta_core::ledger::{write_csv, RoundLedger};
use fedmeta_core::models::ClassifierModel;
use fedmeta_core::orchestrator::{run_fedavg, run_fedmk};

use crate::config::{DatasetSpec, ExperimentSpec, Method};

pub fn load_data(spec: &ExperimentSpec) -> fedmeta_core::Result<(Dataset, Dataset)> {
    match &spec.dataset {
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => Ok((
            load_idx(train_images, train_labels)?,
            load_idx(test_images, test_labels)?,
        )),
        DatasetSpec::Blobs {
            classes,
            dims,
            spread,
            train_per_class,
            test_per_class,
            ..
        } => {
            let seed = spec.blob_seed().unwrap_or_default();
            let source = BlobSource::new(*classes, *dims, *spread, seed)?;
            Ok((source.sample(*train_per_class, 0)?, source.sample(*test_per_class, 1)?))
        }
    }
}

#[derive(Debug)]
pub struct MethodResult {
    pub method: Method,
    pub ledger: Vec<RoundLedger>,
}

impl MethodResult {
    pub fn final_accuracy(&self) -> f64 {
        self.ledger.last().map_or(0.0, |r| r.accuracy)
    }

    pub fn total_bytes(&self) -> u64 {
        self.ledger.last().map_or(0, |r| r.cum_bytes)
    }
}

/// Writes through a temporary sibling so a reader never sees half a file.
fn write_atomic(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<fs::File>) -> fedmeta_core::Result<()>,
) -> fedmeta_core::Result<()> {
    let tmp = path.with_extension("tmp");
    let result = fs::File::create(&tmp)
        .map_err(Into::into)
        .and_then(|file| f(&mut BufWriter::new(file)))
        .and_then(|()| fs::rename(&tmp, path).map_err(Into::into));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn summary(hash: &str, results: &[MethodResult]) -> String {
    let mut s = format!(
        "config_hash {hash}\n\n{:<8} {:>6} {:>10} {:>16}\n",
        "method", "rounds", "accuracy", "total_bytes"
    );
    for r in results {
        s += &format!(
            "{:<8} {:>6} {:>10.4} {:>16}\n",
            r.method.name(),
            r.ledger.len(),
            r.final_accuracy(),
            r.total_bytes()
        );
    }
    s
}

/// Runs every method of `spec` and writes `<method>.csv` plus
/// `summary.txt` into `out`.
///
/// Data is loaded before anything is created. On failure the files written
/// by this call are removed, along with `out` itself if this call created
/// it and it is left empty.
pub fn run(spec: &ExperimentSpec, out: &Path) -> fedmeta_core::Result<Vec<MethodResult>> {
    let (train, test) = load_data(spec)?;
    let created_dir = !out.exists();
    fs::create_dir_all(out)?;
    let mut written: Vec<PathBuf> = Vec::new();
    let result = run_methods(spec, &train, &test, out, &mut written);
    if result.is_err() {
        for p in &written {
            let _ = fs::remove_file(p);
        }
        if created_dir {
            let _ = fs::remove_dir(out);
        }
    }
    result
}

fn run_methods(
    spec: &ExperimentSpec,
    train: &Dataset,
    test: &Dataset,
    out: &Path,
    written: &mut Vec<PathBuf>,
) -> fedmeta_core::Result<Vec<MethodResult>> {
    let hash = spec.config_hash();
    let mut results = Vec::new();
    for &method in &spec.methods {
        eprintln!("running {}", method.name());
        let outcome = match method {
            Method::FedMk => run_fedmk(&spec.federation, train, test)?,
            Method::FedAvg => run_fedavg(&spec.federation, train, test)?,
        };
        for r in &outcome.ledger {
            eprintln!("  round {:>3}  acc {:.4}  {:>6} ms", r.round, r.accuracy, r.wall_ms);
        }
        let path = out.join(format!("{}.csv", method.name()));
        write_atomic(&path, |w| write_csv(w, &hash, &outcome.ledger))?;
        written.push(path);
        results.push(MethodResult {
            method,
            ledger: outcome.ledger,
        });
    }
    let text = summary(&hash, &results);
    let path = out.join("summary.txt");
    write_atomic(&path, |w| {
        use std::io::Write as _;
        w.write_all(text.as_bytes())?;
        w.flush()?;
        Ok(())
    })?;
    written.push(path);
    Ok(results)
}

/// The analytic communication cost of both methods for `spec`.
pub fn cost_table(spec: &ExperimentSpec) -> fedmeta_core::Result<String> {
    let (train, _) = load_data(spec)?;
    let fed = &spec.federation;
    let arch = fed.model.arch_for(&train);
    let params = ClassifierModel::param_count_for(&arch) as u64;
    let rounds = fed.effective_rounds() as u64;
    let active = fed.active as u64;
    let mk = cost::fedmk_cost(&CostInputs {
        active,
        rounds,
        model_params: params,
        dims: train.dims(),
        meta_per_class: fed.fmke.meta_per_class as u64,
        classes: train.classes as u64,
        meta_download: fed.meta_download,
    });
    let avg = cost::fedavg_cost(params, active, rounds);
    let avg_round = cost::fedavg_cost(params, active, 1) / 2;
    let mut s = format!("model parameters       {params}\n");
    s += &format!("model bytes            {}\n", mk.model_bytes);
    s += &format!("meta payload / client  {}\n\n", mk.meta_payload);
    s += &format!(
        "{:<8} {:>14} {:>14} {:>16}\n",
        "method",
        "up / round",
        "down / round",
        &format!("total ({rounds} rounds)")
    );
    s += &format!(
        "{:<8} {:>14} {:>14} {:>16}\n",
        "fedmk", mk.per_round_upload, mk.per_round_download, mk.total
    );
    s += &format!("{:<8} {:>14} {:>14} {:>16}\n", "fedavg", avg_round, avg_round, avg);
    Ok(s)
}
