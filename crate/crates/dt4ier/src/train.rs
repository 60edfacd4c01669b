//! Training loop: Adam over the total loss with seeded batch order,
//! per-step component logging, divergence detection, and periodic
//! checkpoints.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::error::{DtError, Result};
use crate::model::{DtModel, FeatureMap};
use crate::nn::{seeded_rng, Adam};
use crate::trajectory::Trajectory;

/// One row of the training log.
#[derive(Clone, Copy, Debug)]
pub struct StepLog {
    pub step: usize,
    pub cross: f64,
    pub contrastive: f64,
    pub balance: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub negatives: usize,
}

/// Epoch-stable batch order: a pure function of `(seed, epoch)`, so
/// training state never depends on a live RNG.
pub fn batch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(seed, &format!("shuffle/{epoch}"));
    idx.shuffle(&mut rng);
    idx
}

/// Train a fresh model. When `out_dir` is given, writes `metrics.csv`
/// (step, l_cross, l_contra, l_br, total), periodic `ckpt-<step>.json`
/// files, and a final `checkpoint.json`.
pub fn train(
    config: ModelConfig,
    trajectories: &[Trajectory],
    features: &FeatureMap,
    out_dir: Option<&Path>,
) -> Result<(DtModel, Adam, Vec<StepLog>)> {
    config.validate()?;
    if trajectories.is_empty() {
        return Err(DtError::EmptyTrainSet);
    }
    let mut model = DtModel::new(config.clone())?;
    let mut adam = Adam::new(&model.store, config.learning_rate);
    let mut history = Vec::with_capacity(config.max_steps);

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.csv"))?);
            writeln!(f, "step,l_cross,l_contra,l_br,total")?;
            Some(f)
        }
        None => None,
    };

    let n = trajectories.len();
    let batch_size = config.batch_size.min(n);
    let batches_per_epoch = n.div_ceil(batch_size);

    for step in 0..config.max_steps {
        let epoch = step / batches_per_epoch;
        let slot = step % batches_per_epoch;
        let order = batch_order(config.seed, epoch, n);
        let lo = slot * batch_size;
        let hi = (lo + batch_size).min(n);
        let batch: Vec<&Trajectory> = order[lo..hi].iter().map(|i| &trajectories[*i]).collect();

        let fwd = model.training_forward(&batch, features)?;
        let total = fwd.tape.scalar(fwd.total);
        if !total.is_finite() {
            return Err(DtError::Diverged {
                step,
                what: "total loss".into(),
            });
        }
        let grads = fwd.tape.backward(fwd.total);
        let mut collected = fwd.bindings.collect(&grads, &model.store);
        if collected
            .iter()
            .flatten()
            .any(|g| g.iter().any(|v| !v.is_finite()))
        {
            return Err(DtError::Diverged {
                step,
                what: "gradient".into(),
            });
        }
        let grad_norm = adam.step(&mut model.store, &mut collected, Some(config.grad_clip));
        model.enforce_padding_row();

        let row = StepLog {
            step,
            cross: fwd.components.cross,
            contrastive: fwd.components.contrastive,
            balance: fwd.components.balance,
            total,
            grad_norm,
            negatives: fwd.negatives,
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(
                f,
                "{},{},{},{},{}",
                row.step, row.cross, row.contrastive, row.balance, row.total
            )?;
        }
        if step % config.log_every == 0 {
            log::info!(
                "step {step}: total {total:.5} cross {:.5} contra {:.5} br {:.5} |g| {grad_norm:.3}",
                row.cross,
                row.contrastive,
                row.balance
            );
        }
        history.push(row);

        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0
                && step > 0
                && step % config.checkpoint_every == 0
            {
                Checkpoint::capture(&model, Some(&adam), step)
                    .save(&dir.join(format!("ckpt-{step}.json")))?;
            }
        }
    }

    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    if let Some(dir) = out_dir {
        Checkpoint::capture(&model, Some(&adam), config.max_steps)
            .save(&dir.join("checkpoint.json"))?;
    }
    Ok((model, adam, history))
}
