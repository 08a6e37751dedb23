//! Experiment harness: configs, seeded streams, training runs and audits.

mod audit;
mod checkpoint;
mod config;
mod metrics;
mod rng;
mod rollout;
mod run;

pub use audit::*;
pub use checkpoint::*;
pub use config::*;
pub use metrics::*;
pub use rng::*;
pub use rollout::*;
pub use run::*;
