//! Hybrid privacy protection for federated learning.
//!
//! Clients score their parameters with diagonal Fisher information and
//! negotiate three zones every round: a consensus zone that is summed under
//! additively homomorphic encryption, a personalized zone that never leaves
//! the client, and a noise zone protected by clipped Gaussian noise and
//! accounted with Rényi differential privacy. Aggregation is split between an
//! aggregation server that only ever holds the public key and a key server
//! that decrypts the sum and steps the global model.
//!
//! The crate is a deterministic in-process simulator: every random draw comes
//! from a seeded stream (see [`rng`]), so identical configurations produce
//! identical models, masks, and reports.

pub mod attack;
pub mod config;
pub mod data;
pub mod dp;
pub mod error;
pub mod experiment;
pub mod he;
pub mod mask;
pub mod model;
pub mod negotiation;
pub mod protocol;
pub mod report;
pub mod rng;
pub mod sensitivity;

pub use error::{Error, Result};
