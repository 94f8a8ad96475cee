//! Federated learning simulator with low-rank model factorization for
//! heterogeneous clients.
//!
//! The server holds a full-rank global model. Each round it spectrally
//! factorizes the model into low-rank hybrids matched to client capability
//! levels, clients train their hybrid locally with Frobenius decay, and the
//! server recovers every result to full rank and aggregates them with
//! temperature-weighted averaging. FedAvg and width-slimming / channel
//! aggregation baselines run on the same machinery, with exact parameter,
//! communication, and compute accounting throughout.
//!
//! Start from the `examples/` directory: each example is a runnable tour of
//! one capability (accounting, factorization algebra, partitioning,
//! end-to-end training, baselines). The `fedhm` binary runs config-driven
//! experiments (`fedhm run <config>`, `fedhm describe <config>`).

pub mod config;
pub mod data;
pub mod error;
pub mod factorize;
pub mod metrics;
pub mod modelspec;
pub mod nn;
pub mod protocol;
pub mod runner;
pub mod svd;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;
