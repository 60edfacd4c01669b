//! Multi-reward embedding: horizon-normalized RTG channels are binned,
//! looked up in per-channel meta-embedding tables, weighted by an MLP over
//! the raw normalized values, and concatenated into one model-width token.
//!
//! The plain variant (one linear map of the 2-D RTG) backs the
//! `plain_reward_embedding` ablation.

use ndarray::Array2;

use crate::error::{DtError, Result};
use crate::nn::{seeded_rng, Bindings, LinearParams, LinearVars, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::trajectory::RtgPair;

/// Divide both channels by the remaining horizon and clip into [0, 1].
pub fn normalize_rtg(rtg: RtgPair, remaining_horizon: usize) -> Result<(f64, f64)> {
    if remaining_horizon < 1 {
        return Err(DtError::BadHorizon {
            horizon: remaining_horizon as i64,
        });
    }
    let h = remaining_horizon as f64;
    Ok(((rtg.click / h).clamp(0.0, 1.0), (rtg.retention / h).clamp(0.0, 1.0)))
}

/// Uniform half-open bins over [0, 1]; the closed top edge maps to the
/// last bin.
pub fn discretize(value: f64, bins: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&value) {
        return Err(DtError::ValueOutOfRange { value });
    }
    Ok(((value * bins as f64) as usize).min(bins - 1))
}

/// Parameters of the binned multi-reward embedding.
#[derive(Clone, serde::Serialize, serde::Deserialize)]
pub struct RewardEmbedderParams {
    pub bins: usize,
    pub half_dim: usize,
    pub table_click: ParamId,
    pub table_retention: ParamId,
    pub mlp_hidden: LinearParams,
    pub mlp_out: LinearParams,
    pub leaky_slope: f64,
}

impl RewardEmbedderParams {
    pub fn init(
        store: &mut ParamStore,
        seed: u64,
        bins: usize,
        embed_dim: usize,
        hidden: usize,
        leaky_slope: f64,
    ) -> Self {
        let mut rng = seeded_rng(seed, "reward-embed");
        let half_dim = embed_dim / 2;
        Self {
            bins,
            half_dim,
            table_click: store.add(
                "reward.table_click",
                crate::nn::uniform(&mut rng, bins, half_dim, 0.1),
            ),
            table_retention: store.add(
                "reward.table_retention",
                crate::nn::uniform(&mut rng, bins, half_dim, 0.1),
            ),
            mlp_hidden: LinearParams::init(store, &mut rng, "reward.mlph", 2, hidden),
            mlp_out: LinearParams::init(store, &mut rng, "reward.mlpo", hidden, 2),
            leaky_slope,
        }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore, b: &mut Bindings) -> RewardEmbedderVars {
        RewardEmbedderVars {
            bins: self.bins,
            table_click: b.bind(tape, store, self.table_click),
            table_retention: b.bind(tape, store, self.table_retention),
            mlp_hidden: self.mlp_hidden.bind(tape, store, b),
            mlp_out: self.mlp_out.bind(tape, store, b),
            leaky_slope: self.leaky_slope,
        }
    }
}

pub struct RewardEmbedderVars {
    bins: usize,
    table_click: Var,
    table_retention: Var,
    mlp_hidden: LinearVars,
    mlp_out: LinearVars,
    leaky_slope: f64,
}

impl RewardEmbedderVars {
    /// Softmax weight pair per row of normalized RTG values.
    pub fn reward_weights(&self, tape: &mut Tape, normalized: &[(f64, f64)]) -> Var {
        let x = Array2::from_shape_fn((normalized.len(), 2), |(r, c)| {
            if c == 0 {
                normalized[r].0
            } else {
                normalized[r].1
            }
        });
        let x = tape.leaf(x);
        let h = self.mlp_hidden.forward(tape, x);
        let h = tape.leaky_relu(h, self.leaky_slope);
        let logits = self.mlp_out.forward(tape, h);
        tape.softmax_rows(logits)
    }

    /// Batched reward tokens: one `(rtg, remaining_horizon)` pair per row.
    pub fn embed(&self, tape: &mut Tape, inputs: &[(RtgPair, usize)]) -> Result<Var> {
        let mut normalized = Vec::with_capacity(inputs.len());
        let mut bins_click = Vec::with_capacity(inputs.len());
        let mut bins_ret = Vec::with_capacity(inputs.len());
        for (rtg, horizon) in inputs {
            let n = normalize_rtg(*rtg, *horizon)?;
            bins_click.push(discretize(n.0, self.bins)?);
            bins_ret.push(discretize(n.1, self.bins)?);
            normalized.push(n);
        }
        let meta_click = tape.gather_rows(self.table_click, &bins_click);
        let meta_ret = tape.gather_rows(self.table_retention, &bins_ret);
        let w = self.reward_weights(tape, &normalized);
        let w1 = tape.slice_cols(w, 0, 1);
        let w2 = tape.slice_cols(w, 1, 2);
        let half1 = tape.mul_col(meta_click, w1);
        let half2 = tape.mul_col(meta_ret, w2);
        Ok(tape.concat_cols(&[half1, half2]))
    }
}

/// Ablation variant: one linear map of the normalized 2-D RTG.
#[derive(Clone, serde::Serialize, serde::Deserialize)]
pub struct PlainRewardParams {
    pub linear: LinearParams,
}

impl PlainRewardParams {
    pub fn init(store: &mut ParamStore, seed: u64, embed_dim: usize) -> Self {
        let mut rng = seeded_rng(seed, "reward-plain");
        Self {
            linear: LinearParams::init(store, &mut rng, "reward.plain", 2, embed_dim),
        }
    }
}

/// Either reward-embedding path, chosen by config.
#[derive(Clone, serde::Serialize, serde::Deserialize)]
pub enum RewardEmbedding {
    Binned(RewardEmbedderParams),
    Plain(PlainRewardParams),
}

pub enum RewardEmbeddingVars {
    Binned(RewardEmbedderVars),
    Plain(LinearVars),
}

impl RewardEmbedding {
    pub fn bind(&self, tape: &mut Tape, store: &ParamStore, b: &mut Bindings) -> RewardEmbeddingVars {
        match self {
            RewardEmbedding::Binned(p) => RewardEmbeddingVars::Binned(p.bind(tape, store, b)),
            RewardEmbedding::Plain(p) => RewardEmbeddingVars::Plain(p.linear.bind(tape, store, b)),
        }
    }
}

impl RewardEmbeddingVars {
    pub fn embed(&self, tape: &mut Tape, inputs: &[(RtgPair, usize)]) -> Result<Var> {
        match self {
            RewardEmbeddingVars::Binned(v) => v.embed(tape, inputs),
            RewardEmbeddingVars::Plain(linear) => {
                let mut x = Array2::zeros((inputs.len(), 2));
                for (r, (rtg, horizon)) in inputs.iter().enumerate() {
                    let n = normalize_rtg(*rtg, *horizon)?;
                    x[[r, 0]] = n.0;
                    x[[r, 1]] = n.1;
                }
                let x = tape.leaf(x);
                Ok(linear.forward(tape, x))
            }
        }
    }
}

/// Plain-value reward token for a single RTG.
pub fn embed_reward(
    params: &RewardEmbedderParams,
    store: &ParamStore,
    rtg: RtgPair,
    remaining_horizon: usize,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut binds = Bindings::new();
    let vars = params.bind(&mut tape, store, &mut binds);
    let out = vars.embed(&mut tape, &[(rtg, remaining_horizon)])?;
    Ok(tape.value(out).row(0).to_vec())
}

/// Plain-value weight pair for one normalized RTG.
pub fn reward_weights(
    params: &RewardEmbedderParams,
    store: &ParamStore,
    normalized: (f64, f64),
) -> (f64, f64) {
    let mut tape = Tape::new();
    let mut binds = Bindings::new();
    let vars = params.bind(&mut tape, store, &mut binds);
    let w = vars.reward_weights(&mut tape, &[normalized]);
    let v = tape.value(w);
    (v[[0, 0]], v[[0, 1]])
}
