//! Causally masked transformer over interleaved (reward, state, action)
//! token triples, with a learned per-session positional table.
//!
//! Slot `3t` of a trajectory holds the reward token of session `t`, slot
//! `3t + 1` its state token, and slot `3t + 2` its action token. The
//! predicted action embedding for session `t` is read at the state slot:
//! at that point the model has seen the session's RTG and state but not
//! its action. Short trajectories occupy a valid prefix of the slot grid;
//! with causal masking the trailing padding slots can never influence
//! them.

use ndarray::Array2;

use crate::nn::{seeded_rng, ones, zeros, Bindings, LinearParams, LinearVars, ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Slots per session triple.
pub const SLOTS_PER_SESSION: usize = 3;

/// Row index of session `t`'s reward token within one trajectory block.
pub fn reward_slot(t: usize) -> usize {
    SLOTS_PER_SESSION * t
}

/// Row index of session `t`'s state token (the action-prediction readout
/// slot).
pub fn state_slot(t: usize) -> usize {
    SLOTS_PER_SESSION * t + 1
}

/// Row index of session `t`'s action token.
pub fn action_slot(t: usize) -> usize {
    SLOTS_PER_SESSION * t + 2
}

/// Row indices that interleave three stacked `(batch * t_max)` blocks
/// (rewards, states, actions) into per-trajectory triples.
///
/// The blocks are laid out row-major by `(trajectory, session)`; the
/// output ordering is `(trajectory, session, kind)`.
pub fn interleave_indices(batch: usize, t_max: usize) -> Vec<usize> {
    let block = batch * t_max;
    let mut idx = Vec::with_capacity(3 * block);
    for b in 0..batch {
        for t in 0..t_max {
            let flat = b * t_max + t;
            idx.push(flat); // reward block
            idx.push(block + flat); // state block
            idx.push(2 * block + flat); // action block
        }
    }
    idx
}

/// Rows (into the interleaved layout) of every state slot, ordered by
/// `(trajectory, session)`.
pub fn state_slot_rows(batch: usize, t_max: usize) -> Vec<usize> {
    let slots = SLOTS_PER_SESSION * t_max;
    let mut rows = Vec::with_capacity(batch * t_max);
    for b in 0..batch {
        for t in 0..t_max {
            rows.push(b * slots + state_slot(t));
        }
    }
    rows
}

/// One pre-norm transformer block.
#[derive(Clone, serde::Serialize, serde::Deserialize)]
pub struct LayerParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub ffn_in: LinearParams,
    pub ffn_out: LinearParams,
}

/// The decision transformer trunk.
#[derive(Clone, serde::Serialize, serde::Deserialize)]
pub struct TransformerParams {
    pub layers: Vec<LayerParams>,
    /// Learned session-position table, `t_max x d`; the same row is added
    /// to all three tokens of a session.
    pub pos_table: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl TransformerParams {
    pub fn init(
        store: &mut ParamStore,
        seed: u64,
        layers: usize,
        heads: usize,
        dim: usize,
        t_max: usize,
    ) -> Self {
        let mut rng = seeded_rng(seed, "transformer");
        let layers = (0..layers)
            .map(|l| LayerParams {
                ln1_gamma: store.add(&format!("tf.l{l}.ln1g"), ones(1, dim)),
                ln1_beta: store.add(&format!("tf.l{l}.ln1b"), zeros(1, dim)),
                wq: LinearParams::init(store, &mut rng, &format!("tf.l{l}.wq"), dim, dim),
                wk: LinearParams::init(store, &mut rng, &format!("tf.l{l}.wk"), dim, dim),
                wv: LinearParams::init(store, &mut rng, &format!("tf.l{l}.wv"), dim, dim),
                wo: LinearParams::init(store, &mut rng, &format!("tf.l{l}.wo"), dim, dim),
                ln2_gamma: store.add(&format!("tf.l{l}.ln2g"), ones(1, dim)),
                ln2_beta: store.add(&format!("tf.l{l}.ln2b"), zeros(1, dim)),
                ffn_in: LinearParams::init(store, &mut rng, &format!("tf.l{l}.ffn_in"), dim, 4 * dim),
                ffn_out: LinearParams::init(store, &mut rng, &format!("tf.l{l}.ffn_out"), 4 * dim, dim),
            })
            .collect();
        Self {
            layers,
            pos_table: store.add("tf.pos", crate::nn::uniform(&mut rng, t_max, dim, 0.02)),
            heads,
            dim,
        }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore, b: &mut Bindings) -> TransformerVars {
        TransformerVars {
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    ln1_gamma: b.bind(tape, store, l.ln1_gamma),
                    ln1_beta: b.bind(tape, store, l.ln1_beta),
                    wq: l.wq.bind(tape, store, b),
                    wk: l.wk.bind(tape, store, b),
                    wv: l.wv.bind(tape, store, b),
                    wo: l.wo.bind(tape, store, b),
                    ln2_gamma: b.bind(tape, store, l.ln2_gamma),
                    ln2_beta: b.bind(tape, store, l.ln2_beta),
                    ffn_in: l.ffn_in.bind(tape, store, b),
                    ffn_out: l.ffn_out.bind(tape, store, b),
                })
                .collect(),
            pos_table: b.bind(tape, store, self.pos_table),
            heads: self.heads,
            dim: self.dim,
        }
    }
}

struct LayerVars {
    ln1_gamma: Var,
    ln1_beta: Var,
    wq: LinearVars,
    wk: LinearVars,
    wv: LinearVars,
    wo: LinearVars,
    ln2_gamma: Var,
    ln2_beta: Var,
    ffn_in: LinearVars,
    ffn_out: LinearVars,
}

pub struct TransformerVars {
    layers: Vec<LayerVars>,
    pub pos_table: Var,
    heads: usize,
    dim: usize,
}

fn layer_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Var {
    let mean = tape.row_mean(x);
    let centered = tape.sub_col(x, mean);
    let sq = tape.mul(centered, centered);
    let var = tape.row_mean(sq);
    let var = tape.add_scalar(var, 1e-5);
    let inv = tape.pow_const(var, -0.5);
    let normed = tape.mul_col(centered, inv);
    let scaled = tape.mul_row(normed, gamma);
    tape.add_row(scaled, beta)
}

impl TransformerVars {
    /// Add the session-position row `t` to all three tokens of session `t`
    /// for every trajectory in a `(batch * 3 t_max, d)` token matrix.
    pub fn add_session_positions(
        &self,
        tape: &mut Tape,
        tokens: Var,
        batch: usize,
        t_max: usize,
    ) -> Var {
        let mut idx = Vec::with_capacity(batch * SLOTS_PER_SESSION * t_max);
        for _ in 0..batch {
            for t in 0..t_max {
                idx.extend([t, t, t]);
            }
        }
        let pos = tape.gather_rows(self.pos_table, &idx);
        tape.add(tokens, pos)
    }

    /// Masked multi-head self-attention plus feed-forward, pre-norm, over
    /// `batch` trajectories of `slots` tokens each.
    ///
    /// Every slot attends only to slots at or before it within its own
    /// trajectory; attention rows are proper distributions over the
    /// visible slots.
    pub fn causal_forward(&self, tape: &mut Tape, tokens: Var, batch: usize, slots: usize) -> Var {
        debug_assert_eq!(tape.value(tokens).nrows(), batch * slots);
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        // shared additive causal mask
        let mask = Array2::from_shape_fn((slots, slots), |(i, j)| {
            if j <= i {
                0.0
            } else {
                -1e30
            }
        });
        let mask = tape.leaf(mask);

        let mut x = tokens;
        for layer in &self.layers {
            let normed = layer_norm(tape, x, layer.ln1_gamma, layer.ln1_beta);
            let q = layer.wq.forward(tape, normed);
            let k = layer.wk.forward(tape, normed);
            let v = layer.wv.forward(tape, normed);

            let mut traj_outputs = Vec::with_capacity(batch);
            for b in 0..batch {
                let q_b = tape.slice_rows(q, b * slots, slots);
                let k_b = tape.slice_rows(k, b * slots, slots);
                let v_b = tape.slice_rows(v, b * slots, slots);
                let mut head_outputs = Vec::with_capacity(self.heads);
                for h in 0..self.heads {
                    let lo = h * head_dim;
                    let hi = lo + head_dim;
                    let q_h = tape.slice_cols(q_b, lo, hi);
                    let k_h = tape.slice_cols(k_b, lo, hi);
                    let v_h = tape.slice_cols(v_b, lo, hi);
                    let scores = tape.matmul_t(q_h, k_h);
                    let scores = tape.scale(scores, scale);
                    let scores = tape.add(scores, mask);
                    let attn = tape.softmax_rows(scores);
                    head_outputs.push(tape.matmul(attn, v_h));
                }
                traj_outputs.push(tape.concat_cols(&head_outputs));
            }
            let merged = tape.concat_rows(&traj_outputs);
            let projected = layer.wo.forward(tape, merged);
            x = tape.add(x, projected);

            let normed = layer_norm(tape, x, layer.ln2_gamma, layer.ln2_beta);
            let hidden = layer.ffn_in.forward(tape, normed);
            let hidden = tape.gelu(hidden);
            let out = layer.ffn_out.forward(tape, hidden);
            x = tape.add(x, out);
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn setup(seed: u64, layers: usize, heads: usize, dim: usize, t_max: usize) -> (ParamStore, TransformerParams) {
        let mut store = ParamStore::new();
        let params = TransformerParams::init(&mut store, seed, layers, heads, dim, t_max);
        (store, params)
    }

    fn random_tokens(seed: u64, rows: usize, dim: usize) -> Array2<f64> {
        let mut rng = seeded_rng(seed, "tokens");
        Array2::from_shape_fn((rows, dim), |_| rng.random_range(-1.0..1.0))
    }

    fn forward_values(
        params: &TransformerParams,
        store: &ParamStore,
        tokens: &Array2<f64>,
        batch: usize,
        slots: usize,
    ) -> Array2<f64> {
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let vars = params.bind(&mut tape, store, &mut binds);
        let x = tape.leaf(tokens.clone());
        let out = vars.causal_forward(&mut tape, x, batch, slots);
        tape.value(out).clone()
    }

    #[test]
    fn output_shape_matches_input() {
        let (store, params) = setup(1, 2, 8, 128, 20);
        let tokens = random_tokens(2, 2 * 60, 128);
        let out = forward_values(&params, &store, &tokens, 2, 60);
        assert_eq!(out.dim(), (120, 128));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (store, params) = setup(3, 1, 2, 8, 4);
        let tokens = random_tokens(4, 12, 8);
        // re-run attention internals by hand: softmax rows must sum to 1
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let vars = params.bind(&mut tape, &store, &mut binds);
        let x = tape.leaf(tokens);
        let normed = layer_norm(&mut tape, x, vars.layers[0].ln1_gamma, vars.layers[0].ln1_beta);
        let q = vars.layers[0].wq.forward(&mut tape, normed);
        let k = vars.layers[0].wk.forward(&mut tape, normed);
        let mask = Array2::from_shape_fn((12, 12), |(i, j)| if j <= i { 0.0 } else { -1e30 });
        let mask = tape.leaf(mask);
        let q_h = tape.slice_cols(q, 0, 4);
        let k_h = tape.slice_cols(k, 0, 4);
        let scores = tape.matmul_t(q_h, k_h);
        let scores = tape.scale(scores, 0.5);
        let scores = tape.add(scores, mask);
        let attn = tape.softmax_rows(scores);
        let a = tape.value(attn);
        for (i, row) in a.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-5);
            for (j, v) in row.iter().enumerate() {
                if j > i {
                    assert!(*v < 1e-12, "future weight at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn causality_perturbation() {
        let (store, params) = setup(5, 2, 4, 16, 4);
        let slots = 12;
        let tokens = random_tokens(6, slots, 16);
        let base = forward_values(&params, &store, &tokens, 1, slots);
        let mut rng = seeded_rng(7, "pairs");
        for _ in 0..20 {
            let i = rng.random_range(0..slots - 1);
            let j = rng.random_range(i + 1..slots);
            let mut perturbed = tokens.clone();
            for c in 0..16 {
                perturbed[[j, c]] += rng.random_range(0.5..1.5);
            }
            let out = forward_values(&params, &store, &perturbed, 1, slots);
            for c in 0..16 {
                assert!(
                    (out[[i, c]] - base[[i, c]]).abs() < 1e-5,
                    "slot {i} changed after perturbing slot {j}"
                );
            }
        }
    }

    #[test]
    fn single_session_forward_is_valid() {
        let (store, params) = setup(8, 2, 2, 8, 4);
        let tokens = random_tokens(9, 3, 8);
        let out = forward_values(&params, &store, &tokens, 1, 3);
        assert_eq!(out.dim(), (3, 8));
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn swapping_reward_and_state_tokens_changes_prediction() {
        let (store, params) = setup(10, 2, 2, 8, 4);
        let tokens = random_tokens(11, 6, 8);
        let mut swapped = tokens.clone();
        for c in 0..8 {
            swapped[[0, c]] = tokens[[1, c]];
            swapped[[1, c]] = tokens[[0, c]];
        }
        let a = forward_values(&params, &store, &tokens, 1, 6);
        let b = forward_values(&params, &store, &swapped, 1, 6);
        let state_row = state_slot(0);
        let diff: f64 = (0..8)
            .map(|c| (a[[state_row, c]] - b[[state_row, c]]).abs())
            .sum();
        assert!(diff > 1e-6, "readout insensitive to token order");
    }

    #[test]
    fn positions_distinguish_identical_sessions() {
        let (store, params) = setup(12, 1, 2, 8, 4);
        // identical token content at sessions 0 and 1
        let row: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
        let tokens = Array2::from_shape_fn((6, 8), |(_, c)| row[c]);
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let vars = params.bind(&mut tape, &store, &mut binds);
        let x = tape.leaf(tokens);
        let with_pos = vars.add_session_positions(&mut tape, x, 1, 2);
        let v = tape.value(with_pos);
        let pos = store.get(params.pos_table);
        for c in 0..8 {
            let diff = v[[0, c]] - v[[3, c]];
            let expected = pos[[0, c]] - pos[[1, c]];
            assert!((diff - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn interleave_layout_roundtrips() {
        let idx = interleave_indices(2, 3);
        // trajectory 0, session 0: reward row 0, state row 6, action row 12
        assert_eq!(&idx[0..3], &[0, 6, 12]);
        // trajectory 1, session 2: flat = 5
        assert_eq!(&idx[15..18], &[5, 11, 17]);

        let rows = state_slot_rows(2, 3);
        assert_eq!(rows, vec![1, 4, 7, 10, 13, 16]);
    }
}
