//! Seeded synthetic world: users, items, and session logs with planted
//! click/retention structure.
//!
//! The item vocabulary is split into a retention-linked subset (low ids)
//! and its complement. Each user carries latent click and retention
//! affinities that are *observable* through their numeric features, and
//! sessions whose lists contain more retention-linked items produce
//! shorter return gaps in expectation. That planted monotonicity is what
//! makes return-to-go conditioning claims falsifiable: a model prompted
//! for high retention should recommend more of the retention subset.
//!
//! Everything is deterministic given `(config, seed)`; per-user generator
//! streams are derived independently so generation order never matters.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::WorldConfig;
use crate::error::Result;
use crate::nn::seeded_rng;
use crate::trajectory::{Interaction, SessionRecord};

/// Observable per-user features consumed by the balancing network.
///
/// Numeric slots: `[retention_affinity, click_affinity, base_share, ...]`,
/// all in `[0, 1]`. The first categorical feature is the user's retention
/// segment (a coarse bucketing of slot 0); the rest are uniform ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserFeatures {
    pub user_id: u64,
    pub numeric: Vec<f64>,
    pub categorical: Vec<u32>,
}

/// Record of everything needed to verify a generated log after the fact.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldManifest {
    pub config: WorldConfig,
    /// Ids `1..=retention_boundary` form the retention-linked subset.
    pub retention_boundary: u32,
    pub users: Vec<UserFeatures>,
    /// Per-item click-quality scalar, index 0 unused (padding id).
    pub item_quality: Vec<f64>,
}

impl WorldManifest {
    pub fn is_retention_item(&self, item_id: u32) -> bool {
        item_id >= 1 && item_id <= self.retention_boundary
    }

    /// Fraction of a list that falls in the retention subset.
    pub fn retention_fraction(&self, items: &[u32]) -> f64 {
        if items.is_empty() {
            return 0.0;
        }
        let hits = items.iter().filter(|i| self.is_retention_item(**i)).count();
        hits as f64 / items.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }

    /// Conventional manifest path next to a session log:
    /// `log.jsonl -> log.manifest.json`.
    pub fn sibling_path(log_path: &Path) -> std::path::PathBuf {
        log_path.with_extension("manifest.json")
    }
}

fn user_rng(config: &WorldConfig, user_id: u64, stream: &str) -> rand_chacha::ChaCha8Rng {
    seeded_rng(config.seed, &format!("world/{stream}/{user_id}"))
}

/// Deterministically generate the user population.
pub fn generate_users(config: &WorldConfig) -> Vec<UserFeatures> {
    (0..config.num_users as u64)
        .map(|user_id| {
            let mut rng = user_rng(config, user_id, "features");
            let mut numeric: Vec<f64> = (0..config.numeric_features)
                .map(|_| rng.random_range(0.0..1.0))
                .collect();
            // keep affinities strictly inside [0, 1]
            for v in numeric.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
            let mut categorical = Vec::with_capacity(config.categorical_cardinalities.len());
            for (k, card) in config.categorical_cardinalities.iter().enumerate() {
                let id = if k == 0 {
                    // retention segment: bucketed retention affinity
                    ((numeric[0] * *card as f64) as u32).min(*card as u32 - 1)
                } else {
                    rng.random_range(0..*card as u32)
                };
                categorical.push(id);
            }
            UserFeatures {
                user_id,
                numeric,
                categorical,
            }
        })
        .collect()
}

fn generate_item_quality(config: &WorldConfig) -> Vec<f64> {
    let mut rng = seeded_rng(config.seed, "world/item-quality");
    let mut q = Vec::with_capacity(config.num_items + 1);
    q.push(0.0); // padding id
    for _ in 0..config.num_items {
        q.push(rng.random_range(0.0..1.0));
    }
    q
}

/// Generate the session log for a population. Returns the sessions (sorted
/// by user id, then day) and the manifest describing the planted structure.
pub fn generate_log(
    users: &[UserFeatures],
    config: &WorldConfig,
) -> (Vec<SessionRecord>, WorldManifest) {
    let item_quality = generate_item_quality(config);
    let manifest = WorldManifest {
        config: config.clone(),
        retention_boundary: config.retention_items as u32,
        users: users.to_vec(),
        item_quality: item_quality.clone(),
    };

    let mut sessions = Vec::with_capacity(users.len() * config.sessions_per_user);
    for user in users {
        let mut rng = user_rng(config, user.user_id, "sessions");
        let retention_affinity = user.numeric[0];
        let click_affinity = user.numeric[1];
        let base_share = user.numeric[2];

        let mut day = rng.random_range(0..config.start_day_range.max(1));
        for _ in 0..config.sessions_per_user {
            let items = sample_session_items(config, &mut rng, base_share);
            let interactions = items
                .iter()
                .enumerate()
                .map(|(pos, item)| {
                    let p_user = config.click_floor + config.click_span * click_affinity;
                    let p = (1.0 - config.item_quality_weight) * p_user
                        + config.item_quality_weight * item_quality[*item as usize];
                    Interaction {
                        item_id: *item,
                        clicked: rng.random_range(0.0..1.0) < p.clamp(0.02, 0.98),
                        position: pos as u32,
                    }
                })
                .collect();
            sessions.push(SessionRecord {
                user_id: user.user_id,
                day,
                interactions,
            });

            day += sample_return_gap(config, &mut rng, retention_affinity, &items);
        }
    }
    sessions.sort_by_key(|s| (s.user_id, s.day));
    (sessions, manifest)
}

/// Draw a session list with a planted retention-subset share.
fn sample_session_items(
    config: &WorldConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
    base_share: f64,
) -> Vec<u32> {
    let n = config.items_per_session;
    let share = (0.5 * base_share + 0.5 * rng.random_range(0.0..1.0)).clamp(0.0, 1.0);
    let n_ret = ((share * n as f64).round() as usize)
        .min(config.retention_items)
        .min(n);
    let n_other = (n - n_ret).min(config.num_items - config.retention_items);
    let n_ret = n - n_other; // backfill if the complement is small

    let boundary = config.retention_items as u32;
    let mut items = Vec::with_capacity(n);
    items.extend(sample_distinct(rng, 1, boundary, n_ret));
    items.extend(sample_distinct(
        rng,
        boundary + 1,
        config.num_items as u32,
        n_other,
    ));
    items.shuffle(rng);
    items
}

/// `count` distinct ids uniform over `lo..=hi` (Floyd's algorithm keeps
/// the draw order deterministic).
fn sample_distinct(
    rng: &mut rand_chacha::ChaCha8Rng,
    lo: u32,
    hi: u32,
    count: usize,
) -> Vec<u32> {
    debug_assert!(hi >= lo && (hi - lo + 1) as usize >= count);
    let mut chosen: Vec<u32> = Vec::with_capacity(count);
    for j in (hi - count as u32 + 1)..=hi {
        let t = rng.random_range(lo..=j);
        if chosen.contains(&t) {
            chosen.push(j);
        } else {
            chosen.push(t);
        }
    }
    chosen
}

/// Day gap to the next session: geometric in the per-day return
/// probability, which rises with the user's retention affinity and the
/// session's retention-subset fraction.
fn sample_return_gap(
    config: &WorldConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
    retention_affinity: f64,
    items: &[u32],
) -> u32 {
    let boundary = config.retention_items as u32;
    let ret_fraction = if items.is_empty() {
        0.0
    } else {
        items.iter().filter(|i| **i <= boundary && **i >= 1).count() as f64 / items.len() as f64
    };
    // every user responds to retention-linked content; affinity sets how
    // strongly
    let responsiveness = 0.35 + 0.65 * retention_affinity;
    let promptness =
        (1.0 - config.noise) * responsiveness * ret_fraction + config.noise * 0.5;
    let p_return = (config.return_floor + config.return_span * promptness).clamp(0.02, 0.98);
    let mut gap = 1u32;
    while gap < config.max_gap && rng.random_range(0.0..1.0) >= p_return {
        gap += 1;
    }
    gap
}

/// The world as an interactive environment: given a recommended list it
/// realizes clicks and the return gap with the same planted dynamics the
/// log generator uses.
pub struct WorldEnv<'a> {
    manifest: &'a WorldManifest,
}

impl<'a> WorldEnv<'a> {
    pub fn new(manifest: &'a WorldManifest) -> Self {
        Self { manifest }
    }

    /// Realize feedback for one recommended session. Returns per-item
    /// clicks and the day gap until the user's next visit.
    pub fn step(
        &self,
        user: &UserFeatures,
        items: &[u32],
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> (Vec<bool>, u32) {
        let config = &self.manifest.config;
        let clicks = items
            .iter()
            .map(|item| {
                let p_user = config.click_floor + config.click_span * user.numeric[1];
                let q = self
                    .manifest
                    .item_quality
                    .get(*item as usize)
                    .copied()
                    .unwrap_or(0.5);
                let p = (1.0 - config.item_quality_weight) * p_user
                    + config.item_quality_weight * q;
                rng.random_range(0.0..1.0) < p.clamp(0.02, 0.98)
            })
            .collect();
        let gap = sample_return_gap(config, rng, user.numeric[0], items);
        (clicks, gap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{sessions_to_trajectories, IngestOptions};

    fn small_config() -> WorldConfig {
        WorldConfig {
            num_users: 40,
            num_items: 120,
            retention_items: 30,
            sessions_per_user: 12,
            items_per_session: 10,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let config = small_config();
        let users1 = generate_users(&config);
        let users2 = generate_users(&config);
        assert_eq!(users1, users2);
        let (log1, m1) = generate_log(&users1, &config);
        let (log2, _) = generate_log(&users2, &config);
        assert_eq!(log1, log2);
        assert_eq!(m1.retention_boundary, 30);
    }

    #[test]
    fn zero_users_is_empty() {
        let config = WorldConfig {
            num_users: 0,
            ..small_config()
        };
        assert!(generate_users(&config).is_empty());
    }

    #[test]
    fn numeric_features_in_unit_interval() {
        let config = WorldConfig {
            num_users: 100,
            ..small_config()
        };
        let users = generate_users(&config);
        let mut scanned = 0;
        for u in &users {
            assert_eq!(u.numeric.len(), config.numeric_features);
            for v in &u.numeric {
                assert!((0.0..=1.0).contains(v));
                scanned += 1;
            }
            for (id, card) in u.categorical.iter().zip(&config.categorical_cardinalities) {
                assert!((*id as usize) < *card);
            }
        }
        assert_eq!(scanned, 100 * config.numeric_features);
    }

    #[test]
    fn different_seeds_differ() {
        let a = small_config();
        let b = WorldConfig { seed: 8, ..small_config() };
        let (log_a, _) = generate_log(&generate_users(&a), &a);
        let (log_b, _) = generate_log(&generate_users(&b), &b);
        assert_ne!(log_a, log_b);
    }

    #[test]
    fn high_affinity_full_retention_sessions_return_next_day() {
        // Monte-Carlo oracle on the generator's own gap sampler: affinity
        // 1.0 and an all-retention list at default noise give a per-day
        // return probability of 0.15 + 0.8 * (0.75 + 0.125) = 0.85, so the
        // median gap must be 1.
        let config = small_config();
        let items: Vec<u32> = (1..=10).collect();
        let mut rng = seeded_rng(99, "gap-oracle");
        let mut gaps: Vec<u32> = (0..4001)
            .map(|_| sample_return_gap(&config, &mut rng, 1.0, &items))
            .collect();
        gaps.sort_unstable();
        assert_eq!(gaps[gaps.len() / 2], 1);
    }

    #[test]
    fn empirical_ctr_matches_configured_mean() {
        let config = WorldConfig {
            num_users: 100,
            sessions_per_user: 10,
            items_per_session: 15,
            ..small_config()
        };
        let users = generate_users(&config);
        let (log, _) = generate_log(&users, &config);
        let total: usize = log.iter().map(|s| s.interactions.len()).sum();
        assert!(total >= 10_000);
        let clicked: usize = log
            .iter()
            .map(|s| s.interactions.iter().filter(|i| i.clicked).count())
            .sum();
        let empirical = clicked as f64 / total as f64;
        let expected = config.expected_mean_click_prob();
        assert!(
            (empirical - expected).abs() < 0.05,
            "ctr {empirical} vs expected {expected}"
        );
    }

    #[test]
    fn planted_monotonicity_spearman() {
        let config = WorldConfig {
            num_users: 150,
            ..small_config()
        };
        let users = generate_users(&config);
        let (log, manifest) = generate_log(&users, &config);
        let opts = IngestOptions::new(
            config.sessions_per_user,
            10,
            config.items_per_session,
        );
        let trajs = sessions_to_trajectories(&log, &opts).unwrap();

        let mut pairs: Vec<(f64, f64)> = Vec::new();
        for t in &trajs {
            for (action, reward) in t.actions.iter().zip(&t.rewards) {
                let real: Vec<u32> = action.iter().copied().filter(|v| *v != 0).collect();
                pairs.push((manifest.retention_fraction(&real), reward.retention));
            }
        }
        let rho = spearman(&pairs);
        assert!(rho > 0.3, "spearman {rho} too weak");
    }

    fn spearman(pairs: &[(f64, f64)]) -> f64 {
        fn ranks(values: Vec<f64>) -> Vec<f64> {
            let mut idx: Vec<usize> = (0..values.len()).collect();
            idx.sort_by(|a, b| values[*a].partial_cmp(&values[*b]).unwrap());
            let mut out = vec![0.0; values.len()];
            let mut i = 0;
            while i < idx.len() {
                let mut j = i;
                while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
                    j += 1;
                }
                let avg = (i + j) as f64 / 2.0;
                for k in i..=j {
                    out[idx[k]] = avg;
                }
                i = j + 1;
            }
            out
        }
        let xr = ranks(pairs.iter().map(|p| p.0).collect());
        let yr = ranks(pairs.iter().map(|p| p.1).collect());
        let n = pairs.len() as f64;
        let mx = xr.iter().sum::<f64>() / n;
        let my = yr.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for (x, y) in xr.iter().zip(&yr) {
            cov += (x - mx) * (y - my);
            vx += (x - mx) * (x - mx);
            vy += (y - my) * (y - my);
        }
        cov / (vx.sqrt() * vy.sqrt())
    }

    #[test]
    fn generated_log_ingests_cleanly() {
        let config = small_config();
        let users = generate_users(&config);
        let (log, _) = generate_log(&users, &config);
        for s in &log {
            assert!(!s.interactions.is_empty());
            assert!(s.interactions.len() <= config.items_per_session);
            for i in &s.interactions {
                assert!(i.item_id >= 1 && i.item_id <= config.num_items as u32);
            }
        }
        let opts = IngestOptions::new(config.sessions_per_user, 10, config.items_per_session);
        let trajs = sessions_to_trajectories(&log, &opts).unwrap();
        assert_eq!(trajs.len(), config.num_users);
        assert!(trajs.iter().all(|t| t.len() == config.sessions_per_user));
    }

    #[test]
    fn session_items_are_distinct() {
        let config = small_config();
        let users = generate_users(&config);
        let (log, _) = generate_log(&users, &config);
        for s in &log {
            let mut seen = std::collections::HashSet::new();
            for i in &s.interactions {
                assert!(seen.insert(i.item_id), "duplicate item in session");
            }
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let config = small_config();
        let users = generate_users(&config);
        let (_, manifest) = generate_log(&users, &config);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("world.manifest.json");
        manifest.save(&path).unwrap();
        let back = WorldManifest::load(&path).unwrap();
        assert_eq!(back.retention_boundary, manifest.retention_boundary);
        assert_eq!(back.users, manifest.users);
    }
}
