//! Training objective: per-position cross-entropy over decoded actions, a
//! contrastive term that keeps predicted action embeddings away from
//! low-reward sessions, and their weighted composition.

use ndarray::Array2;

use crate::trajectory::RewardPair;

/// Batch coordinates `(trajectory, session)` of sessions whose both reward
/// channels fall below the threshold.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NegativeSet {
    pub indices: Vec<(usize, usize)>,
}

impl NegativeSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Sessions with `click < theta` and `retention < theta`.
pub fn select_negatives(batch_rewards: &[Vec<RewardPair>], theta: f64) -> NegativeSet {
    let mut indices = Vec::new();
    for (traj, rewards) in batch_rewards.iter().enumerate() {
        for (session, r) in rewards.iter().enumerate() {
            if r.click < theta && r.retention < theta {
                indices.push((traj, session));
            }
        }
    }
    NegativeSet { indices }
}

/// Summed mean cosine similarity between every predicted action embedding
/// and each negative embedding; minimizing it drives predictions away from
/// the negative set. Negatives are constants (no gradient flows into
/// them), an empty negative set scores 0, and zero-norm vectors are
/// treated as similarity 0.
pub fn contrastive_loss(pred: &Array2<f64>, negatives: &Array2<f64>) -> f64 {
    if negatives.nrows() == 0 || pred.nrows() == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for n in negatives.rows() {
        let n_norm = n.dot(&n).sqrt();
        if n_norm < 1e-12 {
            continue;
        }
        let mut acc = 0.0;
        for p in pred.rows() {
            let p_norm = p.dot(&p).sqrt();
            if p_norm < 1e-12 {
                continue;
            }
            acc += p.dot(&n) / (p_norm * n_norm);
        }
        total += acc / pred.nrows() as f64;
    }
    total
}

/// Mean over unmasked positions of `-log softmax(logits)[truth]`. Truth id
/// 0 marks a padded position and is masked out; an all-masked call warns
/// and returns 0.
pub fn cross_entropy_loss(logits: &Array2<f64>, truth: &[u32]) -> f64 {
    debug_assert_eq!(logits.nrows(), truth.len());
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, t) in logits.rows().into_iter().zip(truth) {
        if *t == 0 {
            continue;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[*t as usize];
        count += 1;
    }
    if count == 0 {
        log::warn!("cross_entropy_loss: every position masked, returning 0");
        return 0.0;
    }
    total / count as f64
}

/// The loss pieces logged per training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub cross: f64,
    pub contrastive: f64,
    pub balance: f64,
}

/// `cross + alpha * contrastive (+ balance_weight * balance)`.
pub fn total_loss(
    components: &LossComponents,
    alpha: f64,
    include_balancer: bool,
    balance_weight: f64,
) -> f64 {
    let mut total = components.cross + alpha * components.contrastive;
    if include_balancer {
        total += balance_weight * components.balance;
    }
    total
}
