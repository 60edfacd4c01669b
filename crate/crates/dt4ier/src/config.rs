//! Run configuration: model/training hyperparameters and the synthetic
//! world description. Both deserialize from JSON with per-field defaults so
//! partial config files work.

use serde::{Deserialize, Serialize};

use crate::error::{DtError, Result};

/// Environment variable that overrides the seed of any loaded config.
pub const SEED_ENV_VAR: &str = "DT4IER_SEED";

/// Architecture and training hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// Trajectory length T (sessions per model input window).
    pub trajectory_len: usize,
    /// State length H (click-history window, zero-padded).
    pub state_len: usize,
    /// Action length N (items per recommendation list).
    pub action_len: usize,
    /// Model width d.
    pub embed_dim: usize,
    /// Transformer layers.
    pub layers: usize,
    /// Attention heads.
    pub heads: usize,
    /// Bins per reward channel in the multi-reward embedding.
    pub reward_bins: usize,
    /// Balance-term coefficient in the balanced reward loss.
    pub balance_gamma: f64,
    /// Contrastive loss weight.
    pub contrastive_alpha: f64,
    /// Negative-sample reward threshold.
    pub negative_threshold: f64,
    /// Trajectories per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub seed: u64,
    /// Highest real item id; ids run 1..=vocab_size, 0 is padding.
    pub vocab_size: usize,
    /// Ablation: freeze balance weights at (0.5, 0.5) and drop the
    /// balancing network and its loss.
    pub disable_balancer: bool,
    /// Ablation: replace the binned multi-reward embedding with one linear
    /// map of the 2-D RTG.
    pub plain_reward_embedding: bool,
    /// Ablation: drop the contrastive term (alpha treated as 0).
    pub disable_contrastive: bool,
    /// Embedding width per categorical user feature.
    pub categorical_embed_dim: usize,
    /// Hidden width of the two balancing MLPs.
    pub balancer_hidden: usize,
    /// Hidden width of the reward-weight MLP.
    pub reward_weight_hidden: usize,
    pub leaky_slope: f64,
    /// Weight of the balanced reward loss inside the total loss.
    pub balance_loss_weight: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// K for HR@K / NDCG@K.
    pub eval_k: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Numeric user-feature count consumed by the balancing network.
    pub numeric_features: usize,
    /// Cardinality of each categorical user feature.
    pub categorical_cardinalities: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            trajectory_len: 20,
            state_len: 30,
            action_len: 30,
            embed_dim: 128,
            layers: 2,
            heads: 8,
            reward_bins: 8,
            balance_gamma: 0.5,
            contrastive_alpha: 0.1,
            negative_threshold: 0.6,
            batch_size: 128,
            learning_rate: 0.005,
            max_steps: 1000,
            seed: 17,
            vocab_size: 2000,
            disable_balancer: false,
            plain_reward_embedding: false,
            disable_contrastive: false,
            categorical_embed_dim: 8,
            balancer_hidden: 32,
            reward_weight_hidden: 16,
            leaky_slope: 0.01,
            balance_loss_weight: 1.0,
            grad_clip: 1.0,
            eval_k: 10,
            checkpoint_every: 500,
            log_every: 10,
            numeric_features: 4,
            categorical_cardinalities: vec![8, 4],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(DtError::InvalidConfig(
                "embed_dim must be positive and even".into(),
            ));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(DtError::InvalidConfig(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.trajectory_len == 0 || self.state_len == 0 || self.action_len == 0 {
            return Err(DtError::InvalidConfig(
                "trajectory_len, state_len, action_len must be >= 1".into(),
            ));
        }
        if self.reward_bins == 0 {
            return Err(DtError::InvalidConfig("reward_bins must be >= 1".into()));
        }
        if self.vocab_size == 0 {
            return Err(DtError::InvalidConfig("vocab_size must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(DtError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DtError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(self.negative_threshold > 0.0 && self.negative_threshold <= 1.0) {
            return Err(DtError::InvalidConfig(
                "negative_threshold must lie in (0, 1]".into(),
            ));
        }
        if self.contrastive_alpha < 0.0 || self.balance_gamma < 0.0 {
            return Err(DtError::InvalidConfig(
                "contrastive_alpha and balance_gamma must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Apply the `DT4IER_SEED` override if the variable is set.
    pub fn apply_seed_env(&mut self) {
        if let Ok(v) = std::env::var(SEED_ENV_VAR) {
            if let Ok(seed) = v.trim().parse::<u64>() {
                self.seed = seed;
            }
        }
    }

    /// Stable FNV-1a hash of the canonical JSON encoding, reported in
    /// metrics output so runs are attributable to a config.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Synthetic-world geometry and planted-structure knobs.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct WorldConfig {
    pub num_users: usize,
    /// Item ids run 1..=num_items.
    pub num_items: usize,
    /// Size of the retention-linked item subset; ids 1..=retention_items.
    pub retention_items: usize,
    /// Sessions generated per user (equals the trajectory window by
    /// default so each user yields one full trajectory).
    pub sessions_per_user: usize,
    /// Items per session list (N).
    pub items_per_session: usize,
    pub seed: u64,
    /// 0 = fully planted structure, 1 = pure noise.
    pub noise: f64,
    pub numeric_features: usize,
    pub categorical_cardinalities: Vec<usize>,
    /// Per-user click probability ramp: floor + span * affinity.
    pub click_floor: f64,
    pub click_span: f64,
    /// Mix-in weight of the per-item quality term in click probability.
    pub item_quality_weight: f64,
    /// Per-day return probability ramp: floor + span * promptness.
    pub return_floor: f64,
    pub return_span: f64,
    /// Hard cap on the sampled day gap between sessions.
    pub max_gap: u32,
    /// First session day is drawn from 0..start_day_range.
    pub start_day_range: u32,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_users: 500,
            num_items: 2000,
            retention_items: 400,
            sessions_per_user: 20,
            items_per_session: 30,
            seed: 7,
            noise: 0.25,
            numeric_features: 4,
            categorical_cardinalities: vec![8, 4],
            click_floor: 0.15,
            click_span: 0.7,
            item_quality_weight: 0.3,
            return_floor: 0.15,
            return_span: 0.8,
            max_gap: 30,
            start_day_range: 5,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_items < self.items_per_session {
            return Err(DtError::InvalidConfig(format!(
                "num_items {} < items_per_session {}",
                self.num_items, self.items_per_session
            )));
        }
        if self.retention_items == 0 || self.retention_items >= self.num_items {
            return Err(DtError::InvalidConfig(
                "retention_items must lie in 1..num_items".into(),
            ));
        }
        if self.items_per_session == 0 || self.sessions_per_user == 0 {
            return Err(DtError::InvalidConfig(
                "items_per_session and sessions_per_user must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(DtError::InvalidConfig("noise must lie in [0, 1]".into()));
        }
        if self.numeric_features < 3 {
            // the planted structure reads affinity, click, and share slots
            return Err(DtError::InvalidConfig(
                "numeric_features must be >= 3".into(),
            ));
        }
        if self.categorical_cardinalities.is_empty()
            || self.categorical_cardinalities.iter().any(|c| *c == 0)
        {
            return Err(DtError::InvalidConfig(
                "categorical_cardinalities must be non-empty and positive".into(),
            ));
        }
        if self.max_gap == 0 {
            return Err(DtError::InvalidConfig("max_gap must be >= 1".into()));
        }
        Ok(())
    }

    pub fn apply_seed_env(&mut self) {
        if let Ok(v) = std::env::var(SEED_ENV_VAR) {
            if let Ok(seed) = v.trim().parse::<u64>() {
                self.seed = seed;
            }
        }
    }

    /// Closed-form mean click probability of the generator, for
    /// law-of-large-numbers checks against realized logs.
    pub fn expected_mean_click_prob(&self) -> f64 {
        let user_mean = self.click_floor + self.click_span * 0.5;
        (1.0 - self.item_quality_weight) * user_mean + self.item_quality_weight * 0.5
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        WorldConfig::default().validate().unwrap();
    }

    #[test]
    fn default_model_config_matches_published_choices() {
        let c = ModelConfig::default();
        assert_eq!(c.trajectory_len, 20);
        assert_eq!(c.heads, 8);
        assert_eq!(c.embed_dim, 128);
        assert_eq!(c.layers, 2);
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.learning_rate, 0.005);
        assert_eq!(c.balance_gamma, 0.5);
        assert_eq!(c.contrastive_alpha, 0.1);
        assert_eq!(c.negative_threshold, 0.6);
        assert_eq!(c.state_len, 30);
        assert_eq!(c.action_len, 30);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: ModelConfig = serde_json::from_str(r#"{"embed_dim": 64, "heads": 4}"#).unwrap();
        assert_eq!(c.embed_dim, 64);
        assert_eq!(c.heads, 4);
        assert_eq!(c.trajectory_len, 20);
        c.validate().unwrap();
    }

    #[test]
    fn invalid_head_split_rejected() {
        let c = ModelConfig {
            embed_dim: 130,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn content_hash_tracks_content() {
        let a = ModelConfig::default();
        let mut b = ModelConfig::default();
        assert_eq!(a.content_hash(), b.content_hash());
        b.seed = 99;
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
