//! Multi-reward decision transformer for sequential recommendation.
//!
//! The model conditions next-session recommendation lists on a
//! two-channel return-to-go — immediate click-through and long-term
//! retention — so that prompting with a reward target steers what gets
//! recommended. The crate ships the full desk-scale stack:
//!
//! - [`trajectory`]: session logs, reward derivation, RTG suffix sums,
//!   and fixed-shape trajectory windows;
//! - [`world`]: a seeded synthetic environment with planted
//!   click/retention structure for falsifiable conditioning experiments;
//! - [`balancer`]: user-feature-driven convex weights over the two reward
//!   channels and the balanced reward loss;
//! - [`reward_embed`]: binned multi-reward token embedding;
//! - [`codec`]: GRU state/action encoders and the tied-logit action
//!   decoder;
//! - [`decision`]: the causally masked transformer trunk;
//! - [`objectives`]: cross-entropy, contrastive separation, and loss
//!   composition;
//! - [`metrics`]: BLEU / ROUGE / HR@K / NDCG@K / SB-URS;
//! - [`train`] / [`eval`]: the optimization loop, checkpointing, prompted
//!   evaluation, and the RTG prompting sweep.
//!
//! Start with the runnable examples (`cargo run --example ...`) or the
//! `dt4ier` binary for the end-to-end pipeline.

pub mod balancer;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod decision;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod reward_embed;
pub mod tape;
pub mod train;
pub mod trajectory;
pub mod world;

pub use config::{ModelConfig, WorldConfig, SEED_ENV_VAR};
pub use error::{DtError, Result};
pub use model::{DtModel, FeatureMap, PromptMode, RolloutFeedback};
pub use trajectory::{RewardPair, RtgPair, Trajectory};
