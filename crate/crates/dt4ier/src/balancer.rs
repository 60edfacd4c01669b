//! Adaptive RTG balancing: maps user features to convex channel weights
//! and defines the balanced reward loss that trains them.
//!
//! Categorical features go through per-feature embedding tables, numeric
//! features through a sigmoid MLP; the fused vector feeds a second MLP
//! whose softmax output is the weight pair `(b_click, b_retention)`. The
//! weights rescale a user's RTG sequence, and the balanced reward loss
//! rewards a high weighted terminal RTG while penalizing lopsided channel
//! emphasis.

use ndarray::Array2;

use crate::error::{DtError, Result};
use crate::nn::{seeded_rng, Bindings, LinearParams, LinearVars, ParamStore};
use crate::tape::{Tape, Var};
use crate::trajectory::RtgPair;
use crate::world::UserFeatures;

/// Convex per-user weights over the two reward channels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BalanceWeights {
    pub click: f64,
    pub retention: f64,
}

impl BalanceWeights {
    /// The fixed split used when the balancer is disabled.
    pub const NEUTRAL: BalanceWeights = BalanceWeights {
        click: 0.5,
        retention: 0.5,
    };
}

/// Parameter ids and shape info for the balancing network.
#[derive(Clone, serde::Serialize, serde::Deserialize)]
pub struct BalancerParams {
    /// One embedding table per categorical feature, each `card x d_c`.
    pub tables: Vec<crate::nn::ParamId>,
    pub table_sizes: Vec<usize>,
    pub embed_dim: usize,
    pub numeric_features: usize,
    pub mlp1_hidden: LinearParams,
    pub mlp1_out: LinearParams,
    pub mlp2_hidden: LinearParams,
    pub mlp2_out: LinearParams,
    pub leaky_slope: f64,
}

/// Output width of the numeric path (input to the fusion MLP).
const NUMERIC_OUT: usize = 8;

impl BalancerParams {
    pub fn init(
        store: &mut ParamStore,
        seed: u64,
        numeric_features: usize,
        cardinalities: &[usize],
        embed_dim: usize,
        hidden: usize,
        leaky_slope: f64,
    ) -> Self {
        let mut rng = seeded_rng(seed, "balancer");
        let tables = cardinalities
            .iter()
            .enumerate()
            .map(|(i, card)| {
                store.add(
                    &format!("balancer.table{i}"),
                    crate::nn::uniform(&mut rng, *card, embed_dim, 0.1),
                )
            })
            .collect();
        let fused = cardinalities.len() * embed_dim + NUMERIC_OUT;
        Self {
            tables,
            table_sizes: cardinalities.to_vec(),
            embed_dim,
            numeric_features,
            mlp1_hidden: LinearParams::init(store, &mut rng, "balancer.mlp1h", numeric_features, hidden),
            mlp1_out: LinearParams::init(store, &mut rng, "balancer.mlp1o", hidden, NUMERIC_OUT),
            mlp2_hidden: LinearParams::init(store, &mut rng, "balancer.mlp2h", fused, hidden),
            mlp2_out: LinearParams::init(store, &mut rng, "balancer.mlp2o", hidden, 2),
            leaky_slope,
        }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore, b: &mut Bindings) -> BalancerVars {
        BalancerVars {
            tables: self
                .tables
                .iter()
                .map(|t| b.bind(tape, store, *t))
                .collect(),
            table_sizes: self.table_sizes.clone(),
            numeric_features: self.numeric_features,
            mlp1_hidden: self.mlp1_hidden.bind(tape, store, b),
            mlp1_out: self.mlp1_out.bind(tape, store, b),
            mlp2_hidden: self.mlp2_hidden.bind(tape, store, b),
            mlp2_out: self.mlp2_out.bind(tape, store, b),
            leaky_slope: self.leaky_slope,
        }
    }
}

/// Tape-bound balancer for one forward pass.
pub struct BalancerVars {
    tables: Vec<Var>,
    table_sizes: Vec<usize>,
    numeric_features: usize,
    mlp1_hidden: LinearVars,
    mlp1_out: LinearVars,
    mlp2_hidden: LinearVars,
    mlp2_out: LinearVars,
    leaky_slope: f64,
}

impl BalancerVars {
    fn validate(&self, users: &[&UserFeatures]) -> Result<()> {
        for u in users {
            if u.numeric.len() != self.numeric_features {
                return Err(DtError::InvalidConfig(format!(
                    "user {} has {} numeric features, balancer expects {}",
                    u.user_id,
                    u.numeric.len(),
                    self.numeric_features
                )));
            }
            if u.numeric.iter().any(|v| !v.is_finite()) {
                return Err(DtError::NonFiniteFeature);
            }
            if u.categorical.len() != self.table_sizes.len() {
                return Err(DtError::InvalidConfig(format!(
                    "user {} has {} categorical features, balancer expects {}",
                    u.user_id,
                    u.categorical.len(),
                    self.table_sizes.len()
                )));
            }
            for (id, size) in u.categorical.iter().zip(&self.table_sizes) {
                if *id as usize >= *size {
                    return Err(DtError::CategoryOutOfRange {
                        id: *id,
                        size: *size,
                    });
                }
            }
        }
        Ok(())
    }

    /// Concatenated categorical embeddings, one row per user.
    pub fn embed_categorical(&self, tape: &mut Tape, users: &[&UserFeatures]) -> Result<Var> {
        self.validate(users)?;
        let parts: Vec<Var> = self
            .tables
            .iter()
            .enumerate()
            .map(|(f, table)| {
                let ids: Vec<usize> = users.iter().map(|u| u.categorical[f] as usize).collect();
                tape.gather_rows(*table, &ids)
            })
            .collect();
        Ok(tape.concat_cols(&parts))
    }

    /// Numeric path: sigmoid MLP, every output in (0, 1).
    pub fn encode_numeric(&self, tape: &mut Tape, users: &[&UserFeatures]) -> Result<Var> {
        self.validate(users)?;
        let x = Array2::from_shape_fn((users.len(), self.numeric_features), |(r, c)| {
            users[r].numeric[c]
        });
        let x = tape.leaf(x);
        let h = self.mlp1_hidden.forward(tape, x);
        let h = tape.sigmoid(h);
        let out = self.mlp1_out.forward(tape, h);
        Ok(tape.sigmoid(out))
    }

    /// Softmax weights, one `(b_click, b_retention)` row per user.
    pub fn compute_weights(&self, tape: &mut Tape, users: &[&UserFeatures]) -> Result<Var> {
        let cat = self.embed_categorical(tape, users)?;
        let num = self.encode_numeric(tape, users)?;
        let fused = tape.concat_cols(&[cat, num]);
        let h = self.mlp2_hidden.forward(tape, fused);
        let h = tape.leaky_relu(h, self.leaky_slope);
        let logits = self.mlp2_out.forward(tape, h);
        Ok(tape.softmax_rows(logits))
    }

    /// Balanced reward loss over one user batch:
    /// `-(sum_k weighted_k - gamma * (b_c R_c - b_r R_r)_k^2)`.
    ///
    /// `weights` is the `(B, 2)` softmax output; `terminal_rtgs` is one
    /// trajectory-level RTG per user.
    pub fn balanced_reward_loss(
        &self,
        tape: &mut Tape,
        weights: Var,
        terminal_rtgs: &[RtgPair],
        gamma: f64,
    ) -> Result<Var> {
        balanced_reward_loss_on_tape(tape, weights, terminal_rtgs, gamma)
    }
}

/// Tape form of the balanced reward loss over an already-computed weight
/// var of shape `(B, 2)`.
pub fn balanced_reward_loss_on_tape(
    tape: &mut Tape,
    weights: Var,
    terminal_rtgs: &[RtgPair],
    gamma: f64,
) -> Result<Var> {
    let b = tape.value(weights).nrows();
    if b != terminal_rtgs.len() {
        return Err(DtError::BatchMismatch {
            left: b,
            right: terminal_rtgs.len(),
        });
    }
    let rtg = Array2::from_shape_fn((b, 2), |(r, c)| {
        if c == 0 {
            terminal_rtgs[r].click
        } else {
            terminal_rtgs[r].retention
        }
    });
    let rtg = tape.leaf(rtg);
    let weighted = tape.mul(weights, rtg);
    let gain = tape.row_sum(weighted);
    let sign = tape.leaf(Array2::from_shape_vec((1, 2), vec![1.0, -1.0]).unwrap());
    let signed = tape.mul_row(weighted, sign);
    let diff = tape.row_sum(signed);
    let penalty = tape.mul(diff, diff);
    let penalty = tape.scale(penalty, gamma);
    let per_user = tape.sub(gain, penalty);
    let total = tape.sum_all(per_user);
    Ok(tape.scale(total, -1.0))
}

/// Plain-value weight computation for a single user.
pub fn compute_weights(
    params: &BalancerParams,
    store: &ParamStore,
    user: &UserFeatures,
) -> Result<BalanceWeights> {
    let mut tape = Tape::new();
    let mut binds = Bindings::new();
    let vars = params.bind(&mut tape, store, &mut binds);
    let w = vars.compute_weights(&mut tape, &[user])?;
    let v = tape.value(w);
    Ok(BalanceWeights {
        click: v[[0, 0]],
        retention: v[[0, 1]],
    })
}

/// Plain-value balanced reward loss over per-user weights and terminal
/// RTGs.
pub fn balanced_reward_loss(
    weights: &[BalanceWeights],
    terminal_rtgs: &[RtgPair],
    gamma: f64,
) -> Result<f64> {
    if weights.len() != terminal_rtgs.len() {
        return Err(DtError::BatchMismatch {
            left: weights.len(),
            right: terminal_rtgs.len(),
        });
    }
    let mut total = 0.0;
    for (w, r) in weights.iter().zip(terminal_rtgs) {
        let gain = w.click * r.click + w.retention * r.retention;
        let diff = w.click * r.click - w.retention * r.retention;
        total += gain - gamma * diff * diff;
    }
    Ok(-total)
}

/// Componentwise rescaling of an RTG sequence by the balance weights.
pub fn rebalance_rtg(rtgs: &[RtgPair], weights: BalanceWeights) -> Vec<RtgPair> {
    rtgs.iter()
        .map(|r| RtgPair::new(weights.click * r.click, weights.retention * r.retention))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{compute_rtg, RewardPair};

    fn setup(seed: u64) -> (ParamStore, BalancerParams) {
        let mut store = ParamStore::new();
        let params = BalancerParams::init(&mut store, seed, 4, &[8, 4], 8, 32, 0.01);
        (store, params)
    }

    fn user(numeric: Vec<f64>, categorical: Vec<u32>) -> UserFeatures {
        UserFeatures {
            user_id: 0,
            numeric,
            categorical,
        }
    }

    #[test]
    fn categorical_embedding_shape_and_determinism() {
        let (store, params) = setup(1);
        let u = user(vec![0.1, 0.2, 0.3, 0.4], vec![3, 1]);
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let vars = params.bind(&mut tape, &store, &mut binds);
        let e1 = vars.embed_categorical(&mut tape, &[&u]).unwrap();
        let e2 = vars.embed_categorical(&mut tape, &[&u]).unwrap();
        assert_eq!(tape.value(e1).dim(), (1, 16)); // 2 features x d_c 8
        assert_eq!(tape.value(e1), tape.value(e2));
    }

    #[test]
    fn zero_tables_embed_to_zero() {
        let (mut store, params) = setup(2);
        for t in &params.tables {
            store.get_mut(*t).fill(0.0);
        }
        let u = user(vec![0.0; 4], vec![7, 3]);
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let vars = params.bind(&mut tape, &store, &mut binds);
        let e = vars.embed_categorical(&mut tape, &[&u]).unwrap();
        assert!(tape.value(e).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn out_of_range_category_rejected() {
        let (store, params) = setup(3);
        let u = user(vec![0.0; 4], vec![8, 0]);
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let vars = params.bind(&mut tape, &store, &mut binds);
        assert!(matches!(
            vars.embed_categorical(&mut tape, &[&u]),
            Err(DtError::CategoryOutOfRange { id: 8, size: 8 })
        ));
    }

    #[test]
    fn zeroed_numeric_mlp_outputs_half() {
        let (mut store, params) = setup(4);
        for id in [
            params.mlp1_hidden.w,
            params.mlp1_hidden.b,
            params.mlp1_out.w,
            params.mlp1_out.b,
        ] {
            store.get_mut(id).fill(0.0);
        }
        let u = user(vec![0.3, 0.9, 0.1, 0.5], vec![0, 0]);
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let vars = params.bind(&mut tape, &store, &mut binds);
        let out = vars.encode_numeric(&mut tape, &[&u]).unwrap();
        assert!(tape.value(out).iter().all(|v| (*v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn numeric_outputs_stay_in_unit_interval() {
        let (store, params) = setup(5);
        let mut rng = seeded_rng(6, "numeric-scan");
        use rand::Rng;
        for _ in 0..1000 {
            let u = user(
                (0..4).map(|_| rng.random_range(0.0..1.0)).collect(),
                vec![rng.random_range(0..8), rng.random_range(0..4)],
            );
            let mut tape = Tape::new();
            let mut binds = Bindings::new();
            let vars = params.bind(&mut tape, &store, &mut binds);
            let out = vars.encode_numeric(&mut tape, &[&u]).unwrap();
            assert!(tape.value(out).iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn nan_feature_rejected() {
        let (store, params) = setup(7);
        let u = user(vec![f64::NAN, 0.0, 0.0, 0.0], vec![0, 0]);
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let vars = params.bind(&mut tape, &store, &mut binds);
        assert!(matches!(
            vars.encode_numeric(&mut tape, &[&u]),
            Err(DtError::NonFiniteFeature)
        ));
    }

    #[test]
    fn weights_sum_to_one_and_softmax_matches_closed_form() {
        let (mut store, params) = setup(8);
        let u = user(vec![0.2, 0.4, 0.6, 0.8], vec![1, 2]);
        let w = compute_weights(&params, &store, &u).unwrap();
        assert!((w.click + w.retention - 1.0).abs() < 1e-6);
        assert!(w.click > 0.0 && w.retention > 0.0);

        // force logits [ln 4, 0] via zero weights and a fixed bias
        for id in [
            params.mlp2_hidden.w,
            params.mlp2_hidden.b,
            params.mlp2_out.w,
        ] {
            store.get_mut(id).fill(0.0);
        }
        let bias = store.get_mut(params.mlp2_out.b);
        bias[[0, 0]] = 4.0f64.ln();
        bias[[0, 1]] = 0.0;
        let w = compute_weights(&params, &store, &u).unwrap();
        assert!((w.click - 0.8).abs() < 1e-12);
        assert!((w.retention - 0.2).abs() < 1e-12);

        // softmax shift invariance
        let bias = store.get_mut(params.mlp2_out.b);
        bias[[0, 0]] += 3.7;
        bias[[0, 1]] += 3.7;
        let shifted = compute_weights(&params, &store, &u).unwrap();
        assert!((shifted.click - w.click).abs() < 1e-12);

        // zero logits give the symmetric split
        let bias = store.get_mut(params.mlp2_out.b);
        bias.fill(0.0);
        let sym = compute_weights(&params, &store, &u).unwrap();
        assert_eq!(sym, BalanceWeights::NEUTRAL);
    }

    #[test]
    fn balanced_loss_hand_values() {
        // symmetric case: penalty vanishes
        let w = vec![BalanceWeights { click: 0.5, retention: 0.5 }];
        let r = vec![RtgPair::new(1.0, 1.0)];
        assert!((balanced_reward_loss(&w, &r, 0.5).unwrap() - (-1.0)).abs() < 1e-12);

        // direct evaluation: b=(0.8,0.2), R=(1,0.5), gamma=0.5
        // gain = 0.9, diff = 0.7, loss = -(0.9 - 0.5*0.49) = -0.655
        let w = vec![BalanceWeights { click: 0.8, retention: 0.2 }];
        let r = vec![RtgPair::new(1.0, 0.5)];
        assert!((balanced_reward_loss(&w, &r, 0.5).unwrap() - (-0.655)).abs() < 1e-12);

        // gamma = 0 drops the penalty entirely
        let loss = balanced_reward_loss(&w, &r, 0.0).unwrap();
        assert!((loss - (-0.9)).abs() < 1e-12);

        assert!(balanced_reward_loss(&w, &[], 0.5).is_err());
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let (store, params) = setup(9);
        let users: Vec<UserFeatures> = (0..5)
            .map(|i| {
                user(
                    vec![0.1 * i as f64, 0.2, 0.3, 0.4],
                    vec![i as u32 % 8, i as u32 % 4],
                )
            })
            .collect();
        let refs: Vec<&UserFeatures> = users.iter().collect();
        let rtgs: Vec<RtgPair> = (0..5)
            .map(|i| RtgPair::new(1.0 + i as f64 * 0.3, 2.0 - i as f64 * 0.2))
            .collect();

        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let vars = params.bind(&mut tape, &store, &mut binds);
        let w = vars.compute_weights(&mut tape, &refs).unwrap();
        let loss = vars
            .balanced_reward_loss(&mut tape, w, &rtgs, 0.5)
            .unwrap();

        let plain_weights: Vec<BalanceWeights> = users
            .iter()
            .map(|u| compute_weights(&params, &store, u).unwrap())
            .collect();
        let plain = balanced_reward_loss(&plain_weights, &rtgs, 0.5).unwrap();
        assert!((tape.scalar(loss) - plain).abs() < 1e-9);
    }

    #[test]
    fn balanced_loss_gradient_matches_finite_differences() {
        let (mut store, params) = setup(10);
        let users: Vec<UserFeatures> = (0..3)
            .map(|i| user(vec![0.2, 0.5, 0.8, 0.3], vec![i as u32, i as u32 % 4]))
            .collect();
        let rtgs = vec![
            RtgPair::new(1.2, 0.4),
            RtgPair::new(0.3, 0.9),
            RtgPair::new(2.0, 2.0),
        ];

        let loss_of = |store: &ParamStore| {
            let refs: Vec<&UserFeatures> = users.iter().collect();
            let mut tape = Tape::new();
            let mut binds = Bindings::new();
            let vars = params.bind(&mut tape, store, &mut binds);
            let w = vars.compute_weights(&mut tape, &refs).unwrap();
            let l = vars.balanced_reward_loss(&mut tape, w, &rtgs, 0.5).unwrap();
            tape.scalar(l)
        };

        // analytic grads for the fusion MLP parameters
        let refs: Vec<&UserFeatures> = users.iter().collect();
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let vars = params.bind(&mut tape, &store, &mut binds);
        let w = vars.compute_weights(&mut tape, &refs).unwrap();
        let l = vars.balanced_reward_loss(&mut tape, w, &rtgs, 0.5).unwrap();
        let grads = tape.backward(l);
        let collected = binds.collect(&grads, &store);

        let eps = 1e-4;
        for id in [params.mlp2_hidden.w, params.mlp2_out.w, params.mlp2_out.b] {
            let analytic = collected[id.0].clone();
            let dim = store.get(id).dim();
            for r in 0..dim.0 {
                for c in 0..dim.1 {
                    let orig = store.get(id)[[r, c]];
                    store.get_mut(id)[[r, c]] = orig + eps;
                    let plus = loss_of(&store);
                    store.get_mut(id)[[r, c]] = orig - eps;
                    let minus = loss_of(&store);
                    store.get_mut(id)[[r, c]] = orig;
                    let numeric = (plus - minus) / (2.0 * eps);
                    let got = analytic.as_ref().unwrap()[[r, c]];
                    let denom = numeric.abs().max(got.abs()).max(1e-8);
                    assert!(
                        (numeric - got).abs() / denom < 1e-3,
                        "param {r},{c}: fd {numeric} vs analytic {got}"
                    );
                }
            }
        }
    }

    #[test]
    fn symmetric_rtg_minimized_at_equal_weights() {
        // grid search over the 1-D simplex for a single user with equal
        // terminal channels: the loss must be minimal at b = (0.5, 0.5)
        let r = vec![RtgPair::new(1.5, 1.5)];
        for gamma in [0.1, 0.5, 2.0] {
            let mut best = (f64::INFINITY, -1.0);
            for i in 1..100 {
                let b = i as f64 / 100.0;
                let w = vec![BalanceWeights { click: b, retention: 1.0 - b }];
                let loss = balanced_reward_loss(&w, &r, gamma).unwrap();
                if loss < best.0 {
                    best = (loss, b);
                }
            }
            assert!((best.1 - 0.5).abs() < 1e-9, "gamma {gamma}: argmin {}", best.1);
        }
    }

    #[test]
    fn rebalance_scales_componentwise() {
        let rtgs = vec![RtgPair::new(2.0, 2.0), RtgPair::new(1.0, 0.5)];
        let out = rebalance_rtg(&rtgs, BalanceWeights { click: 0.5, retention: 0.5 });
        assert_eq!(out[0], RtgPair::new(1.0, 1.0));
        assert_eq!(out.len(), 2);

        let lopsided = rebalance_rtg(&rtgs, BalanceWeights { click: 0.999, retention: 0.001 });
        assert!(lopsided[0].retention < 0.01);
    }

    #[test]
    fn rebalance_commutes_with_suffix_sums() {
        let mut rng = seeded_rng(11, "commute");
        use rand::Rng;
        let rewards: Vec<RewardPair> = (0..15)
            .map(|_| RewardPair::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)))
            .collect();
        let w = BalanceWeights { click: 0.37, retention: 0.63 };

        let rtg_then_scale = rebalance_rtg(&compute_rtg(&rewards).unwrap(), w);
        let scaled_rewards: Vec<RewardPair> = rewards
            .iter()
            .map(|r| RewardPair::new(w.click * r.click, w.retention * r.retention))
            .collect();
        let scale_then_rtg = compute_rtg(&scaled_rewards).unwrap();
        for (a, b) in rtg_then_scale.iter().zip(&scale_then_rtg) {
            assert!((a.click - b.click).abs() < 1e-12);
            assert!((a.retention - b.retention).abs() < 1e-12);
        }
    }
}
