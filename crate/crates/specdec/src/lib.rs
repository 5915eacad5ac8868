//! Speculative decoding engine for autoregressive token models.
//!
//! Draft heads propose a budgeted candidate tree that is evaluated in a
//! single tree-attention forward pass and verified with a tolerance
//! mechanism: the original head samples `tau` times per position and a
//! candidate is accepted when it matches any of them. Among accepted paths
//! the longest wins, ties going to the leftmost branch. The crate also
//! ships a Markov-chain ground-truth oracle, a tiny trainable windowed AR
//! model with weighted multi-head training, a greedy sparse-tree builder
//! driven by calibrated acceptance statistics, and a benchmark harness for
//! speedup and mean-accepted-token measurements.

pub mod bench;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod model;
pub mod rng;
pub mod sampling;
pub mod tree;

pub use error::{Error, Result};
pub use rng::RandomStream;
pub use sampling::{Distribution, SamplingConfig, TokenId};
