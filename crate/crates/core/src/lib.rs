//! Sparse mixture-of-experts layers with token-choice and expert-choice
//! routing, SGD fine-tuning with closed-form gradients, and expert pruning
//! ranked by the change of each router's l2 norm.

mod binio;
pub mod config;
pub mod error;
pub mod harness;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod pruning;
pub mod rng;
pub mod synthdata;
pub mod tokens;
pub mod training;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use pruning::{Criterion, Grouping, PruneDecision};
pub use model::{GatingOutput, Head, MoELayer, PruneMask, RoutingConfig, RoutingMode};
pub use synthdata::{Dataset, Label, PatternMode, PatternSet, Sample};
pub use tokens::Tokens;
