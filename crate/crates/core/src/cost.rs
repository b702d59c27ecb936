//! Communication-cost accounting.
//!
//! Every transmitted value costs 4 bytes (float32 on the wire).

use serde::{Deserialize, Serialize};

use crate::datasets::Dims;
use crate::fmke::WIRE_BYTES_PER_VALUE;

/// What an active client downloads besides the global model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaDownload {
    /// One client's worth of meta knowledge (enough for conditional init).
    #[default]
    PeerShare,
    /// The whole previous-round pool of every active client.
    FullPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostInputs {
    pub active: u64,
    pub rounds: u64,
    pub model_params: u64,
    pub dims: Dims,
    pub meta_per_class: u64,
    pub classes: u64,
    pub meta_download: MetaDownload,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    /// Bytes of one client's meta knowledge.
    pub meta_payload: u64,
    pub model_bytes: u64,
    pub per_round_upload: u64,
    pub per_round_download: u64,
    pub total: u64,
}

pub fn model_bytes(model_params: u64) -> u64 {
    WIRE_BYTES_PER_VALUE * model_params
}

/// `4 * c * w * h * m * K`.
pub fn meta_payload(dims: Dims, meta_per_class: u64, classes: u64) -> u64 {
    WIRE_BYTES_PER_VALUE * (dims.0 * dims.1 * dims.2) as u64 * meta_per_class * classes
}

/// Analytic FedMK cost: every active client uploads its meta knowledge and
/// downloads meta knowledge plus the global model, every round.
pub fn fedmk_cost(inputs: &CostInputs) -> CostReport {
    let payload = meta_payload(inputs.dims, inputs.meta_per_class, inputs.classes);
    let model = model_bytes(inputs.model_params);
    let meta_down = match inputs.meta_download {
        MetaDownload::PeerShare => payload,
        MetaDownload::FullPool => payload * inputs.active,
    };
    let up = payload * inputs.active;
    let down = (meta_down + model) * inputs.active;
    CostReport {
        meta_payload: payload,
        model_bytes: model,
        per_round_upload: up,
        per_round_download: down,
        total: (up + down) * inputs.rounds,
    }
}

/// FedAvg: the model travels both ways for every active client:
/// `4 * P * A * 2 * T`.
pub fn fedavg_cost(model_params: u64, active: u64, rounds: u64) -> u64 {
    model_bytes(model_params) * active * 2 * rounds
}
