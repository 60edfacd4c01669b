//! GRU sequence codec: encoders that squeeze item-id sequences into
//! model-width vectors and the decoder that expands a predicted action
//! embedding back into a ranked item list.
//!
//! Padding id 0 owns row 0 of the item table, which is pinned to zero
//! after every optimizer step; padded positions therefore flow through the
//! recurrence as zero embeddings rather than being skipped.

use ndarray::Array2;

use crate::error::{DtError, Result};
use crate::nn::{seeded_rng, xavier, zeros, Bindings, LinearParams, LinearVars, ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Gate and candidate parameters of one GRU.
#[derive(Clone, serde::Serialize, serde::Deserialize)]
pub struct GruParams {
    pub w_update: ParamId,
    pub u_update: ParamId,
    pub b_update: ParamId,
    pub w_reset: ParamId,
    pub u_reset: ParamId,
    pub b_reset: ParamId,
    pub w_cand: ParamId,
    pub u_cand: ParamId,
    pub b_cand: ParamId,
}

impl GruParams {
    pub fn init(store: &mut ParamStore, seed: u64, name: &str, dim: usize) -> Self {
        let mut rng = seeded_rng(seed, name);
        let mut mat = |suffix: &str| {
            let id = store.add(&format!("{name}.{suffix}"), xavier(&mut rng, dim, dim));
            id
        };
        let w_update = mat("w_update");
        let u_update = mat("u_update");
        let w_reset = mat("w_reset");
        let u_reset = mat("u_reset");
        let w_cand = mat("w_cand");
        let u_cand = mat("u_cand");
        Self {
            w_update,
            u_update,
            b_update: store.add(&format!("{name}.b_update"), zeros(1, dim)),
            w_reset,
            u_reset,
            b_reset: store.add(&format!("{name}.b_reset"), zeros(1, dim)),
            w_cand,
            u_cand,
            b_cand: store.add(&format!("{name}.b_cand"), zeros(1, dim)),
        }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore, b: &mut Bindings) -> GruVars {
        GruVars {
            w_update: b.bind(tape, store, self.w_update),
            u_update: b.bind(tape, store, self.u_update),
            b_update: b.bind(tape, store, self.b_update),
            w_reset: b.bind(tape, store, self.w_reset),
            u_reset: b.bind(tape, store, self.u_reset),
            b_reset: b.bind(tape, store, self.b_reset),
            w_cand: b.bind(tape, store, self.w_cand),
            u_cand: b.bind(tape, store, self.u_cand),
            b_cand: b.bind(tape, store, self.b_cand),
        }
    }
}

#[derive(Clone, Copy)]
pub struct GruVars {
    w_update: Var,
    u_update: Var,
    b_update: Var,
    w_reset: Var,
    u_reset: Var,
    b_reset: Var,
    w_cand: Var,
    u_cand: Var,
    b_cand: Var,
}

impl GruVars {
    /// One gated step: update/reset gates, tanh candidate with the
    /// reset-gated recurrent term, convex blend of old state and candidate.
    pub fn cell(&self, tape: &mut Tape, x: Var, h: Var) -> Var {
        let zx = tape.matmul(x, self.w_update);
        let zh = tape.matmul(h, self.u_update);
        let z = tape.add(zx, zh);
        let z = tape.add_row(z, self.b_update);
        let z = tape.sigmoid(z);

        let rx = tape.matmul(x, self.w_reset);
        let rh = tape.matmul(h, self.u_reset);
        let r = tape.add(rx, rh);
        let r = tape.add_row(r, self.b_reset);
        let r = tape.sigmoid(r);

        let gated = tape.mul(r, h);
        let cx = tape.matmul(x, self.w_cand);
        let ch = tape.matmul(gated, self.u_cand);
        let c = tape.add(cx, ch);
        let c = tape.add_row(c, self.b_cand);
        let c = tape.tanh(c);

        let keep = tape.scale(z, -1.0);
        let keep = tape.add_scalar(keep, 1.0);
        let old = tape.mul(keep, h);
        let new = tape.mul(z, c);
        tape.add(old, new)
    }
}

/// Item table plus the three recurrent nets.
#[derive(Clone, serde::Serialize, serde::Deserialize)]
pub struct CodecParams {
    pub item_table: ParamId,
    pub state_encoder: GruParams,
    pub action_encoder: GruParams,
    pub decoder: GruParams,
    /// Projects the concatenated (previous item ⊕ action embedding) input
    /// down to model width before the decoder recurrence.
    pub decoder_proj: LinearParams,
    /// Learned embedding consumed at decode position 0.
    pub start: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl CodecParams {
    pub fn init(store: &mut ParamStore, seed: u64, vocab: usize, dim: usize) -> Self {
        let mut rng = seeded_rng(seed, "codec");
        let mut item_table = crate::nn::uniform(&mut rng, vocab + 1, dim, 0.08);
        item_table.row_mut(0).fill(0.0);
        Self {
            item_table: store.add("codec.item_table", item_table),
            state_encoder: GruParams::init(store, seed, "codec.state_gru", dim),
            action_encoder: GruParams::init(store, seed, "codec.action_gru", dim),
            decoder: GruParams::init(store, seed, "codec.decoder_gru", dim),
            decoder_proj: LinearParams::init(store, &mut rng, "codec.decoder_proj", 2 * dim, dim),
            start: store.add("codec.start", crate::nn::uniform(&mut rng, 1, dim, 0.08)),
            vocab,
            dim,
        }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore, b: &mut Bindings) -> CodecVars {
        CodecVars {
            item_table: b.bind(tape, store, self.item_table),
            state_encoder: self.state_encoder.bind(tape, store, b),
            action_encoder: self.action_encoder.bind(tape, store, b),
            decoder: self.decoder.bind(tape, store, b),
            decoder_proj: self.decoder_proj.bind(tape, store, b),
            start: b.bind(tape, store, self.start),
            vocab: self.vocab,
            dim: self.dim,
        }
    }
}

/// Which previous-item stream feeds the decoder.
pub enum DecodeMode<'a> {
    /// Ground-truth items, one row of width N per decoded sequence.
    Teacher(&'a [Vec<u32>]),
    /// Argmax of the previous position, padding id masked out.
    Greedy,
}

/// Decoder output: per-position vocabulary logits and, in greedy mode,
/// the chosen item ids per row.
pub struct Decoded {
    /// One `(rows, vocab + 1)` logits var per position.
    pub logits: Vec<Var>,
    pub chosen: Vec<Vec<u32>>,
}

pub struct CodecVars {
    pub item_table: Var,
    state_encoder: GruVars,
    action_encoder: GruVars,
    decoder: GruVars,
    decoder_proj: LinearVars,
    start: Var,
    vocab: usize,
    dim: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    State,
    Action,
}

impl CodecVars {
    fn check_ids(&self, sequences: &[&[u32]]) -> Result<()> {
        for seq in sequences {
            for id in *seq {
                if *id as usize > self.vocab {
                    return Err(DtError::ItemOutOfVocab {
                        id: *id,
                        vocab: self.vocab,
                    });
                }
            }
        }
        Ok(())
    }

    /// Run one encoder over a batch of equal-length id sequences and
    /// return the final hidden state, one row per sequence.
    pub fn encode_sequences(
        &self,
        tape: &mut Tape,
        kind: EncoderKind,
        sequences: &[&[u32]],
    ) -> Result<Var> {
        self.check_ids(sequences)?;
        let rows = sequences.len();
        let len = sequences.first().map_or(0, |s| s.len());
        debug_assert!(sequences.iter().all(|s| s.len() == len));
        let gru = match kind {
            EncoderKind::State => self.state_encoder,
            EncoderKind::Action => self.action_encoder,
        };
        let mut h = tape.leaf(Array2::zeros((rows, self.dim)));
        for t in 0..len {
            let ids: Vec<usize> = sequences.iter().map(|s| s[t] as usize).collect();
            let x = tape.gather_rows(self.item_table, &ids);
            h = gru.cell(tape, x, h);
        }
        Ok(h)
    }

    /// Unroll the decoder for `n_positions` steps from a batch of action
    /// embeddings (one row each). Logits tie to the item table.
    pub fn decode_actions(
        &self,
        tape: &mut Tape,
        action_embeddings: Var,
        n_positions: usize,
        mode: DecodeMode,
    ) -> Result<Decoded> {
        let rows = tape.value(action_embeddings).nrows();
        if let DecodeMode::Teacher(targets) = &mode {
            if targets.len() != rows {
                return Err(DtError::BatchMismatch {
                    left: targets.len(),
                    right: rows,
                });
            }
            let seqs: Vec<&[u32]> = targets.iter().map(|t| t.as_slice()).collect();
            self.check_ids(&seqs)?;
        }

        let start_ids = vec![0usize; rows];
        let mut prev = tape.gather_rows(self.start, &start_ids);
        let mut h = tape.leaf(Array2::zeros((rows, self.dim)));
        let mut logits = Vec::with_capacity(n_positions);
        let mut chosen: Vec<Vec<u32>> = vec![Vec::new(); rows];

        for n in 0..n_positions {
            let inp = tape.concat_cols(&[prev, action_embeddings]);
            let x = self.decoder_proj.forward(tape, inp);
            h = self.decoder.cell(tape, x, h);
            let step_logits = tape.matmul_t(h, self.item_table);
            logits.push(step_logits);

            if n + 1 < n_positions || matches!(mode, DecodeMode::Greedy) {
                let ids: Vec<usize> = match &mode {
                    DecodeMode::Teacher(targets) => {
                        targets.iter().map(|t| t[n] as usize).collect()
                    }
                    DecodeMode::Greedy => {
                        let lv = tape.value(step_logits);
                        (0..rows)
                            .map(|r| {
                                let row = lv.row(r);
                                // padding id 0 never wins
                                let mut best = 1usize;
                                for j in 2..row.len() {
                                    if row[j] > row[best] {
                                        best = j;
                                    }
                                }
                                best
                            })
                            .collect()
                    }
                };
                if matches!(mode, DecodeMode::Greedy) {
                    for (r, id) in ids.iter().enumerate() {
                        chosen[r].push(*id as u32);
                    }
                }
                if n + 1 < n_positions {
                    prev = tape.gather_rows(self.item_table, &ids);
                }
            }
        }
        Ok(Decoded { logits, chosen })
    }
}

/// Plain-value encoding of one sequence through the chosen encoder.
pub fn encode_sequence(
    params: &CodecParams,
    store: &ParamStore,
    kind: EncoderKind,
    items: &[u32],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut binds = Bindings::new();
    let vars = params.bind(&mut tape, store, &mut binds);
    let h = vars.encode_sequences(&mut tape, kind, &[items])?;
    Ok(tape.value(h).row(0).to_vec())
}

/// Plain-value decode of one action embedding into `n_positions` logits
/// rows (and greedy choices when requested).
pub fn decode_action(
    params: &CodecParams,
    store: &ParamStore,
    action_embedding: &[f64],
    n_positions: usize,
    teacher_items: Option<&[u32]>,
) -> Result<(Vec<Vec<f64>>, Vec<u32>)> {
    let mut tape = Tape::new();
    let mut binds = Bindings::new();
    let vars = params.bind(&mut tape, store, &mut binds);
    let a = tape.leaf(Array2::from_shape_vec((1, action_embedding.len()), action_embedding.to_vec()).unwrap());
    let teacher_vec;
    let mode = match teacher_items {
        Some(items) => {
            teacher_vec = vec![items.to_vec()];
            DecodeMode::Teacher(&teacher_vec)
        }
        None => DecodeMode::Greedy,
    };
    let decoded = vars.decode_actions(&mut tape, a, n_positions, mode)?;
    let logits = decoded
        .logits
        .iter()
        .map(|v| tape.value(*v).row(0).to_vec())
        .collect();
    let chosen = decoded.chosen.into_iter().next().unwrap_or_default();
    Ok((logits, chosen))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(seed: u64, vocab: usize, dim: usize) -> (ParamStore, CodecParams) {
        let mut store = ParamStore::new();
        let params = CodecParams::init(&mut store, seed, vocab, dim);
        (store, params)
    }

    #[test]
    fn all_padding_with_zero_candidate_path_stays_at_origin() {
        let (mut store, params) = setup(1, 10, 4);
        for id in [
            params.state_encoder.w_cand,
            params.state_encoder.u_cand,
            params.state_encoder.b_cand,
        ] {
            store.get_mut(id).fill(0.0);
        }
        let h = encode_sequence(&params, &store, EncoderKind::State, &[0, 0, 0, 0]).unwrap();
        assert!(h.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encoder_output_width_is_model_dim() {
        let (store, params) = setup(2, 50, 16);
        for len in [1usize, 5, 30] {
            let items: Vec<u32> = (0..len as u32).map(|i| i % 50 + 1).collect();
            let h = encode_sequence(&params, &store, EncoderKind::Action, &items).unwrap();
            assert_eq!(h.len(), 16);
        }
    }

    #[test]
    fn encoder_matches_step_by_step_recurrence_oracle() {
        // width-3 input, d=4: replay the gate equations by hand
        let (store, params) = setup(3, 6, 4);
        let items = [2u32, 0, 5];
        let got = encode_sequence(&params, &store, EncoderKind::State, &items).unwrap();

        let table = store.get(params.item_table);
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut h = vec![0.0f64; 4];
        for id in items {
            let x: Vec<f64> = table.row(id as usize).to_vec();
            let lin = |w: crate::nn::ParamId, u: crate::nn::ParamId, b: crate::nn::ParamId, hv: &[f64]| {
                let wm = store.get(w);
                let um = store.get(u);
                let bv = store.get(b);
                (0..4)
                    .map(|j| {
                        let mut s = bv[[0, j]];
                        for k in 0..4 {
                            s += x[k] * wm[[k, j]] + hv[k] * um[[k, j]];
                        }
                        s
                    })
                    .collect::<Vec<f64>>()
            };
            let gru = &params.state_encoder;
            let z: Vec<f64> = lin(gru.w_update, gru.u_update, gru.b_update, &h)
                .iter()
                .map(|v| sigmoid(*v))
                .collect();
            let r: Vec<f64> = lin(gru.w_reset, gru.u_reset, gru.b_reset, &h)
                .iter()
                .map(|v| sigmoid(*v))
                .collect();
            let gated: Vec<f64> = r.iter().zip(&h).map(|(r, h)| r * h).collect();
            let c: Vec<f64> = {
                let wm = store.get(gru.w_cand);
                let um = store.get(gru.u_cand);
                let bv = store.get(gru.b_cand);
                (0..4)
                    .map(|j| {
                        let mut s = bv[[0, j]];
                        for k in 0..4 {
                            s += x[k] * wm[[k, j]] + gated[k] * um[[k, j]];
                        }
                        s.tanh()
                    })
                    .collect()
            };
            h = (0..4).map(|j| (1.0 - z[j]) * h[j] + z[j] * c[j]).collect();
        }
        for (a, b) in got.iter().zip(&h) {
            assert!((a - b).abs() < 1e-6, "encoder {a} vs oracle {b}");
        }
    }

    #[test]
    fn out_of_vocab_id_rejected() {
        let (store, params) = setup(4, 10, 4);
        assert!(matches!(
            encode_sequence(&params, &store, EncoderKind::State, &[11]),
            Err(DtError::ItemOutOfVocab { id: 11, vocab: 10 })
        ));
    }

    #[test]
    fn last_item_changes_encoding_left_padding_does_not_alter_it() {
        let (store, params) = setup(5, 20, 8);
        let a = encode_sequence(&params, &store, EncoderKind::State, &[0, 0, 3, 7]).unwrap();
        let b = encode_sequence(&params, &store, EncoderKind::State, &[0, 0, 3, 8]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn decoder_shapes_and_determinism() {
        let (store, params) = setup(6, 30, 8);
        let a_embed: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
        let (logits, chosen) = decode_action(&params, &store, &a_embed, 5, None).unwrap();
        assert_eq!(logits.len(), 5);
        assert!(logits.iter().all(|row| row.len() == 31));
        assert_eq!(chosen.len(), 5);
        assert!(chosen.iter().all(|id| *id >= 1 && *id <= 30));

        let (_, chosen2) = decode_action(&params, &store, &a_embed, 5, None).unwrap();
        assert_eq!(chosen, chosen2);
    }

    #[test]
    fn first_position_ignores_teacher_items() {
        let (store, params) = setup(7, 30, 8);
        let a_embed: Vec<f64> = (0..8).map(|i| 0.05 * i as f64 - 0.2).collect();
        let t1: Vec<u32> = vec![1, 2, 3, 4];
        let t2: Vec<u32> = vec![9, 10, 11, 12];
        let (l1, _) = decode_action(&params, &store, &a_embed, 4, Some(&t1)).unwrap();
        let (l2, _) = decode_action(&params, &store, &a_embed, 4, Some(&t2)).unwrap();
        assert_eq!(l1[0], l2[0]);
        assert_ne!(l1[1], l2[1]);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (mut store, params) = setup(8, 6, 4);
        let items = vec![vec![1u32, 3, 0], vec![5, 5, 2]];

        let loss_of = |store: &ParamStore| {
            let mut tape = Tape::new();
            let mut binds = Bindings::new();
            let vars = params.bind(&mut tape, store, &mut binds);
            let seqs: Vec<&[u32]> = items.iter().map(|s| s.as_slice()).collect();
            let h = vars.encode_sequences(&mut tape, EncoderKind::State, &seqs).unwrap();
            let sq = tape.mul(h, h);
            let l = tape.sum_all(sq);
            tape.scalar(l)
        };

        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let vars = params.bind(&mut tape, &store, &mut binds);
        let seqs: Vec<&[u32]> = items.iter().map(|s| s.as_slice()).collect();
        let h = vars.encode_sequences(&mut tape, EncoderKind::State, &seqs).unwrap();
        let sq = tape.mul(h, h);
        let l = tape.sum_all(sq);
        let grads = tape.backward(l);
        let collected = binds.collect(&grads, &store);

        let id = params.item_table;
        let analytic = collected[id.0].clone().unwrap();
        let eps = 1e-5;
        for r in 0..store.get(id).nrows() {
            for c in 0..store.get(id).ncols() {
                let orig = store.get(id)[[r, c]];
                store.get_mut(id)[[r, c]] = orig + eps;
                let plus = loss_of(&store);
                store.get_mut(id)[[r, c]] = orig - eps;
                let minus = loss_of(&store);
                store.get_mut(id)[[r, c]] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let got = analytic[[r, c]];
                let denom = numeric.abs().max(got.abs()).max(1e-6);
                assert!(
                    (numeric - got).abs() / denom < 1e-3,
                    "table ({r},{c}): fd {numeric} vs analytic {got}"
                );
            }
        }
    }
}
