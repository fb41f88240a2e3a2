//! Desk-scale federated continual-learning simulator.
//!
//! Implements a MoE-LoRA model over a frozen backbone trained across clients
//! under FedAvg, with per-expert gradient-subspace protection: clients project
//! both LoRA factor gradients off each expert's protection basis, upload
//! routing-weighted covariance factors, and the server merges them into the
//! carry-over basis with a single thin SVD per expert. An interference-driven
//! water-filling scheduler assigns per-layer protection budgets, and a
//! brute-force oracle suite independently verifies each structural claim.

pub mod client;
pub mod config;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod scheduler;
pub mod server;
pub mod subspace;
pub mod tasks;
pub mod verify;

pub use error::{CoreError, Result};
