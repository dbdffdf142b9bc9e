//! Federated semi-supervised graph learning over clinical tables.
//!
//! Each silo builds a private k-NN patient graph, trains a hybrid GCN/SAGE
//! encoder with prototype-gated pseudo-labels, and exchanges only model
//! parameters and class centroids with the server.

pub mod audit;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod graph;
pub mod head;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod ssl;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::DenseMatrix;
