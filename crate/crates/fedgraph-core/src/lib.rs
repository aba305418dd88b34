//! Federated-learning simulation with graph-based adaptive aggregation.
//!
//! The crate trains a small neural network across simulated clients holding
//! non-i.i.d. shards of a synthetic dataset, then combines the client models
//! with one of three strategies:
//!
//! - `fedavg`: weights proportional to client sample counts;
//! - `fedcostwavg`: sample counts blended with per-round loss improvement;
//! - `fedgraph`: sample counts blended with a topology factor (client model
//!   deltas mapped to graphs, pruned, and compared with a pyramid match graph
//!   kernel) and an inverse weight-distance factor.
//!
//! Modules follow the pipeline: [`nn`] (network + local training), [`data`]
//! (synthetic tasks + non-i.i.d. partitions), [`graph`] (model-to-graph
//! mapping and pruning), [`kernel`] (pyramid match kernel and gravity
//! matrix), [`aggregation`] (weight factors and strategies), [`federation`]
//! (round loop), with [`config`] and [`metrics`] as the I/O surface.

// Validation guards are written `!(x >= 0.0)` so NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod graph;
pub mod kernel;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
