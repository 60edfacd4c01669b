//! Sequence-accuracy and retention metrics over recommended lists.
//!
//! Item-id lists are treated as token sequences: BLEU measures n-gram
//! precision of the predicted list, ROUGE-1 its unigram recall, HR@K and
//! NDCG@K its ranking quality, and SB-URS weighs per-class BLEU by a
//! centered retention reward over eight uniform reward classes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{DtError, Result};

/// Number of retention-reward classes used by SB-URS.
pub const SB_URS_CLASSES: usize = 8;

/// One prediction/ground-truth pair ready for scoring. Padding ids must
/// already be stripped; `truth` must be non-empty.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub predicted: Vec<u32>,
    pub truth: Vec<u32>,
    /// Ground-truth retention reward of the session, used to class the
    /// sample for SB-URS.
    pub retention_reward: f64,
}

/// Drop duplicate predictions, keeping the first occurrence.
pub fn dedup_keep_first(items: &[u32]) -> Vec<u32> {
    let mut seen = std::collections::HashSet::new();
    items.iter().copied().filter(|i| seen.insert(*i)).collect()
}

fn ngram_counts(seq: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut counts: HashMap<&[u32], usize> = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU over item lists: geometric mean of clipped n-gram precisions for
/// n = 1..min(4, |pred|) with uniform weights, add-one smoothing of zero
/// counts for n >= 2, and the usual brevity penalty. Empty predictions
/// score 0.
pub fn bleu(pred: &[u32], truth: &[u32]) -> f64 {
    if pred.is_empty() || truth.is_empty() {
        return 0.0;
    }
    let max_n = 4.min(pred.len());
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let pred_counts = ngram_counts(pred, n);
        let truth_counts = ngram_counts(truth, n);
        let matched: usize = pred_counts
            .iter()
            .map(|(gram, c)| (*c).min(truth_counts.get(gram).copied().unwrap_or(0)))
            .sum();
        let total = pred.len() - n + 1;
        let p = if matched == 0 && n >= 2 {
            1.0 / (total + 1) as f64
        } else {
            matched as f64 / total as f64
        };
        if p == 0.0 {
            return 0.0; // unsmoothed unigram miss
        }
        log_sum += p.ln();
    }
    let brevity = (1.0 - truth.len() as f64 / pred.len() as f64).exp().min(1.0);
    brevity * (log_sum / max_n as f64).exp()
}

/// ROUGE-1 recall: clipped unigram overlap / |truth|.
pub fn rouge(pred: &[u32], truth: &[u32]) -> Result<f64> {
    if truth.is_empty() {
        return Err(DtError::EmptyTruth);
    }
    let pred_counts = ngram_counts(pred, 1);
    let truth_counts = ngram_counts(truth, 1);
    let overlap: usize = truth_counts
        .iter()
        .map(|(gram, c)| (*c).min(pred_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    Ok(overlap as f64 / truth.len() as f64)
}

/// Hit rate: |top-K(pred) ∩ truth| / min(K, |truth|).
pub fn hr_at_k(pred: &[u32], truth: &[u32], k: usize) -> f64 {
    if truth.is_empty() || k == 0 {
        return 0.0;
    }
    let truth_set: std::collections::HashSet<u32> = truth.iter().copied().collect();
    let hits = pred
        .iter()
        .take(k)
        .filter(|i| truth_set.contains(i))
        .count();
    hits as f64 / k.min(truth_set.len()) as f64
}

/// Binary-relevance NDCG at K with log2(rank+1) discounting.
pub fn ndcg_at_k(pred: &[u32], truth: &[u32], k: usize) -> f64 {
    if truth.is_empty() || k == 0 {
        return 0.0;
    }
    let truth_set: std::collections::HashSet<u32> = truth.iter().copied().collect();
    let dcg: f64 = pred
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, item)| truth_set.contains(item))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..k.min(truth_set.len()))
        .map(|i| 1.0 / ((i + 2) as f64).log2())
        .sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

/// Per-class aggregate for SB-URS.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RewardClass {
    /// Mean prediction similarity (BLEU) within the class.
    pub similarity: f64,
    /// Representative retention reward of the class.
    pub reward: f64,
    /// Sample count.
    pub count: usize,
}

/// Similarity-based user return score over exactly eight reward classes:
/// `sum_c sim_c * (r_c - 1/2) * N_c`.
pub fn sb_urs(classes: &[RewardClass]) -> Result<f64> {
    if classes.len() != SB_URS_CLASSES {
        return Err(DtError::BadClassCount {
            expected: SB_URS_CLASSES,
            got: classes.len(),
        });
    }
    Ok(classes
        .iter()
        .map(|c| c.similarity * (c.reward - 0.5) * c.count as f64)
        .sum())
}

/// Class samples by retention reward into eight uniform bins over [0, 1]
/// (bin midpoints as representative rewards) and compute per-class mean
/// BLEU. Empty classes keep similarity 0 and count 0.
pub fn group_reward_classes(pairs: &[EvalPair]) -> Vec<RewardClass> {
    let mut sums = [0.0f64; SB_URS_CLASSES];
    let mut counts = [0usize; SB_URS_CLASSES];
    for p in pairs {
        let c = ((p.retention_reward * SB_URS_CLASSES as f64) as usize).min(SB_URS_CLASSES - 1);
        sums[c] += bleu(&p.predicted, &p.truth);
        counts[c] += 1;
    }
    (0..SB_URS_CLASSES)
        .map(|c| RewardClass {
            similarity: if counts[c] == 0 { 0.0 } else { sums[c] / counts[c] as f64 },
            reward: (c as f64 + 0.5) / SB_URS_CLASSES as f64,
            count: counts[c],
        })
        .collect()
}

/// Bundle of all metrics over an evaluation set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu: f64,
    pub rouge: f64,
    pub hr: f64,
    pub ndcg: f64,
    pub sb_urs: f64,
    pub k: usize,
    pub pairs: usize,
    pub classes: Vec<RewardClass>,
    pub config_hash: String,
    pub seed: u64,
    /// Prompt proportion used for the evaluation, when applicable.
    pub rho: Option<f64>,
}

/// Score a set of evaluation pairs. Predictions are deduplicated (first
/// occurrence kept) before scoring.
pub fn score_pairs(
    pairs: &[EvalPair],
    k: usize,
    config_hash: &str,
    seed: u64,
    rho: Option<f64>,
) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(DtError::EmptyEvalSet);
    }
    let cleaned: Vec<EvalPair> = pairs
        .iter()
        .map(|p| EvalPair {
            predicted: dedup_keep_first(&p.predicted),
            truth: p.truth.clone(),
            retention_reward: p.retention_reward,
        })
        .collect();
    let n = cleaned.len() as f64;
    let mut bleu_sum = 0.0;
    let mut rouge_sum = 0.0;
    let mut hr_sum = 0.0;
    let mut ndcg_sum = 0.0;
    for p in &cleaned {
        bleu_sum += bleu(&p.predicted, &p.truth);
        rouge_sum += rouge(&p.predicted, &p.truth)?;
        hr_sum += hr_at_k(&p.predicted, &p.truth, k);
        ndcg_sum += ndcg_at_k(&p.predicted, &p.truth, k);
    }
    let classes = group_reward_classes(&cleaned);
    Ok(MetricsReport {
        bleu: bleu_sum / n,
        rouge: rouge_sum / n,
        hr: hr_sum / n,
        ndcg: ndcg_sum / n,
        sb_urs: sb_urs(&classes)?,
        k,
        pairs: cleaned.len(),
        classes,
        config_hash: config_hash.to_string(),
        seed,
        rho,
    })
}
