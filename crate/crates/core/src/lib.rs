//! Desk-scale simulator for anchor-based federated semi-supervised learning.
//!
//! A small double-head network (classification head plus a latent anchor
//! head) is trained across simulated clients holding unlabeled, non-IID
//! shards. The server holds a small labeled anchor set; clients pseudo-label
//! their data by cosine similarity between their anchor-head embeddings and
//! the broadcast anchor embedding table, then train with mixup on the
//! qualifying samples. Baselines (softmax-confidence pseudo-labeling and a
//! fully supervised upper bound) share the same loop for direct comparison.

pub mod anchor;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod selfcheck;

pub use config::{DatasetSource, ExperimentConfig, NetworkConfig};
pub use error::{Error, Result};
