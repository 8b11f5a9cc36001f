//! Deterministic federated-learning simulator with collaborative iterative
//! magnitude pruning (FedMap), a dense FedAvg reference and a
//! federated-pruning baseline.
//!
//! Numerics are generic over [`Scalar`] (`f32` or `f64`). The aliases below
//! fix the precision for the common case.

pub mod aggregation;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod feddr;
pub mod federation;
pub mod io_util;
pub mod pruning;
pub mod rng;
pub mod runner;
pub mod scalar;
pub mod schedule;
pub mod tensor_nn;

pub use config::{load_config, parse_config, ExperimentConfig, Method};
pub use error::{FedMapError, Result};
pub use federation::{
    run_experiment, run_fedavg_dense, run_federated_pruning, run_fedmap, RoundMetrics, RunOutput,
};
pub use pruning::PruneMask;
pub use scalar::Scalar;

pub type Model64 = tensor_nn::Model<f64>;
pub type Model32 = tensor_nn::Model<f32>;
pub type Dataset64 = tensor_nn::Dataset<f64>;
pub type Dataset32 = tensor_nn::Dataset<f32>;
pub type LayerValues64 = tensor_nn::LayerValues<f64>;
pub type RunOutput64 = federation::RunOutput<f64>;
