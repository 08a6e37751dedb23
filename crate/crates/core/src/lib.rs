//! Fully decentralized multi-agent policy gradient with k-level
//! communicative policies.
//!
//! Module map:
//! - [`diffkit`]: reverse-mode autodiff, recurrent cells, optimizers
//! - [`policy`]: encoder / communicative policy bundle and the k-level pipeline
//! - [`mi`]: exact mutual information, MAP-probability bounds, Bayes-chain oracle
//! - [`envs`]: PistonLine, RelayPong, MatrixClimb and the fraudulent-agent wrapper
//! - [`trainers`]: InfoPG / Adv. InfoPG updates and the NC-A2C, CU, MOA baselines
//! - [`harness`]: config, seeding, training loop, evaluation, metrics, CLI backends

pub mod diffkit;
pub mod envs;
pub mod error;
pub mod harness;
pub mod mi;
pub mod policy;
pub mod trainers;

pub use error::{Error, Result};
