//! Reconciliation of multi-rate, intermittent sensor series on a feeder graph
//! with batch and recursive multi-task Gaussian processes, and per-phase state
//! estimation from the reconciled series by low-rank matrix completion.

pub mod data;
pub mod dsse;
pub mod error;
pub mod experiment;
pub mod gp_batch;
pub mod gp_recursive;
pub mod graph;
pub mod hyper;
pub mod impute;
pub mod kernel;
pub mod linalg;
pub mod simlab;

pub use data::{BatchDataset, ImputationResult, MeasurementBatch};
pub use error::{Error, Result};
