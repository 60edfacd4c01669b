//! Evaluation pipelines: prompted teacher-forced scoring, the RTG
//! prompting sweep, user splits, and report output.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{DtError, Result};
use crate::metrics::{score_pairs, EvalPair, MetricsReport};
use crate::model::{DtModel, FeatureMap, PromptMode};
use crate::trajectory::Trajectory;

/// Trajectories per forward chunk during evaluation; bounds tape memory.
const EVAL_CHUNK: usize = 16;

/// Hold out the last `fraction` of users (by sorted user id) for
/// evaluation. Returns `(train, held_out)`.
pub fn split_by_user(
    trajectories: &[Trajectory],
    fraction: f64,
) -> (Vec<Trajectory>, Vec<Trajectory>) {
    let mut user_ids: Vec<u64> = trajectories.iter().map(|t| t.user_id).collect();
    user_ids.sort_unstable();
    user_ids.dedup();
    let held = ((user_ids.len() as f64 * fraction).round() as usize).min(user_ids.len());
    let cutoff = user_ids.len() - held;
    let held_set: std::collections::HashSet<u64> = user_ids[cutoff..].iter().copied().collect();
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for t in trajectories {
        if held_set.contains(&t.user_id) {
            eval.push(t.clone());
        } else {
            train.push(t.clone());
        }
    }
    (train, eval)
}

/// Turn teacher-forced predictions into scoring pairs: the decoded list
/// against the padding-stripped ground-truth list of every session.
pub fn collect_eval_pairs(
    model: &DtModel,
    trajectories: &[Trajectory],
    features: &FeatureMap,
    mode: PromptMode,
) -> Result<Vec<EvalPair>> {
    if trajectories.is_empty() {
        return Err(DtError::EmptyEvalSet);
    }
    let chunks: Vec<&[Trajectory]> = trajectories.chunks(EVAL_CHUNK).collect();
    let per_chunk: Vec<Result<Vec<EvalPair>>> = chunks
        .par_iter()
        .map(|chunk| {
            let refs: Vec<&Trajectory> = chunk.iter().collect();
            let out = model.predict_teacher_forced(&refs, features, mode)?;
            let mut pairs = Vec::new();
            for (traj, preds) in chunk.iter().zip(&out.predictions) {
                for (t, predicted) in preds.iter().enumerate() {
                    let truth: Vec<u32> = traj.actions[t]
                        .iter()
                        .copied()
                        .filter(|v| *v != 0)
                        .collect();
                    if truth.is_empty() {
                        continue;
                    }
                    pairs.push(EvalPair {
                        predicted: predicted.clone(),
                        truth,
                        retention_reward: traj.rewards[t].retention,
                    });
                }
            }
            Ok(pairs)
        })
        .collect();
    let mut pairs = Vec::new();
    for chunk in per_chunk {
        pairs.extend(chunk?);
    }
    Ok(pairs)
}

/// Score held-out trajectories under a prompt proportion `rho` applied to
/// both reward channels.
pub fn evaluate(
    model: &DtModel,
    trajectories: &[Trajectory],
    features: &FeatureMap,
    rho: f64,
) -> Result<MetricsReport> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(DtError::PromptOutOfRange {
            value: rho,
            max: 1.0,
        });
    }
    let pairs = collect_eval_pairs(model, trajectories, features, PromptMode::rate(rho))?;
    score_pairs(
        &pairs,
        model.config.eval_k,
        &model.config.content_hash(),
        model.config.seed,
        Some(rho),
    )
}

/// Score with ground-truth RTG conditioning (the training distribution);
/// used for capacity checks on the training set.
pub fn evaluate_oracle(
    model: &DtModel,
    trajectories: &[Trajectory],
    features: &FeatureMap,
) -> Result<MetricsReport> {
    let pairs = collect_eval_pairs(model, trajectories, features, PromptMode::Oracle)?;
    score_pairs(
        &pairs,
        model.config.eval_k,
        &model.config.content_hash(),
        model.config.seed,
        None,
    )
}

/// One [`evaluate`] per prompt proportion.
pub fn rtg_sweep(
    model: &DtModel,
    trajectories: &[Trajectory],
    features: &FeatureMap,
    rhos: &[f64],
) -> Result<Vec<(f64, MetricsReport)>> {
    rhos.iter()
        .map(|rho| Ok((*rho, evaluate(model, trajectories, features, *rho)?)))
        .collect()
}

/// Mean cosine similarity between predicted action embeddings and the
/// action encodings of negative sessions (both reward channels below
/// `theta`). `None` when the set has no negatives.
pub fn mean_negative_similarity(
    model: &DtModel,
    trajectories: &[Trajectory],
    features: &FeatureMap,
    theta: f64,
) -> Result<Option<f64>> {
    let refs: Vec<&Trajectory> = trajectories.iter().collect();
    let out = model.predict_teacher_forced(&refs, features, PromptMode::Oracle)?;
    let negative_rows: Vec<usize> = out
        .row_rewards
        .iter()
        .enumerate()
        .filter(|(_, r)| r.click < theta && r.retention < theta)
        .map(|(i, _)| i)
        .collect();
    if negative_rows.is_empty() {
        return Ok(None);
    }
    let mut negs = ndarray::Array2::zeros((negative_rows.len(), model.config.embed_dim));
    for (row, src) in negative_rows.iter().enumerate() {
        negs.row_mut(row).assign(&out.action_encodings.row(*src));
    }
    let sum = crate::objectives::contrastive_loss(&out.pred_embeddings, &negs);
    Ok(Some(sum / negative_rows.len() as f64))
}

pub fn write_report_json(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, report)?;
    f.flush()?;
    Ok(())
}

pub fn read_report_json(path: &Path) -> Result<MetricsReport> {
    let f = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

/// Sweep table as CSV: one row per prompt proportion.
pub fn write_sweep_csv(path: &Path, rows: &[(f64, MetricsReport)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "rho,bleu,rouge,hr,ndcg,sb_urs")?;
    for (rho, r) in rows {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            rho, r.bleu, r.rouge, r.hr, r.ndcg, r.sb_urs
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Plot-ready JSON companion to the sweep CSV.
pub fn write_sweep_json(path: &Path, rows: &[(f64, MetricsReport)]) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Row<'a> {
        rho: f64,
        report: &'a MetricsReport,
    }
    let rows: Vec<Row> = rows
        .iter()
        .map(|(rho, report)| Row { rho: *rho, report })
        .collect();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, &rows)?;
    f.flush()?;
    Ok(())
}
