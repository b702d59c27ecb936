//! A deterministic simulator for meta-knowledge driven federated learning.
//!
//! Clients condense their private data into small synthetic datasets
//! ("meta knowledge") by bi-level optimization and upload those instead of
//! model updates. The server trains the global model on the union of the
//! uploads, regularized by latents sampled from a conditional generator.
//! A FedAvg baseline and a communication-cost accountant are included for
//! comparison.

pub mod autodiff;
pub mod checkpoint;
pub mod cost;
pub mod datasets;
pub mod error;
pub mod fmke;
pub mod ledger;
pub mod models;
pub mod orchestrator;
pub mod rng;
pub mod server;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
