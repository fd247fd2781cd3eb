use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{HarnessError, Result, TrainHyper};
use crate::compute::{FlopLedger, FlopModel};
use crate::model::{ModelError, Seq2Seq};
use crate::tensor::{Checkpoint, Optimizer, TensorError};
use crate::tuning::{apply_freeze_plan, FreezePlan};

/// Source and target token ids; targets end with the end marker.
pub type EncodedPair = (Vec<usize>, Vec<usize>);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainOutcome {
    pub best_val_loss: f64,
    pub best_step: usize,
    pub steps: usize,
    /// `(step, validation loss)` at every validation point.
    pub history: Vec<(usize, f64)>,
    pub ledger: FlopLedger,
    /// Reason the run was aborted, if it was.
    pub failed: Option<String>,
}

/// Token-mean validation NLL through the cached inference path.
pub fn validation_loss(model: &Seq2Seq, val: &[EncodedPair]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (src, tgt) in val {
        let nll = model.token_nll(src, tgt)?;
        total += nll.iter().sum::<f64>();
        count += nll.len();
    }
    if count == 0 {
        return Err(HarnessError::EmptySplit("validation"));
    }
    Ok(total / count as f64)
}

/// Non-finite values inside the forward pass count as a NaN loss.
fn diverged(r: Result<f64>) -> Result<f64> {
    match r {
        Err(HarnessError::Model(ModelError::Tensor(TensorError::NonFinite(_)))) => Ok(f64::NAN),
        other => other,
    }
}

/// Trains the plan's trainable blocks until validation loss stops improving
/// for more than `patience` rounds or `max_steps` is reached, then restores
/// the best parameters seen. Validation runs before the first step, every
/// `eval_every` steps and after the last step.
pub fn train_to_best(
    model: &mut Seq2Seq,
    plan: &FreezePlan,
    train: &[EncodedPair],
    val: &[EncodedPair],
    hyper: &TrainHyper,
    seed: u64,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(HarnessError::EmptySplit("training"));
    }
    if val.is_empty() {
        return Err(HarnessError::EmptySplit("validation"));
    }
    apply_freeze_plan(plan, &mut model.store)?;
    let flops = FlopModel::for_strategy(model.config(), plan.strategy, model.prefix_length().unwrap_or(0));
    let trainable = |m: &Seq2Seq| {
        let mut c = Checkpoint::from_store(&m.store);
        c.entries.retain(|e| !e.frozen);
        c
    };

    let mut ledger = FlopLedger::new();
    let mut best = validation_loss(model, val)?;
    ledger.record(0.0, 0, Some(best));
    let mut history = vec![(0, best)];
    let mut best_step = 0;
    let mut snapshot = trainable(model);
    let mut failed = None;
    if !best.is_finite() {
        failed = Some(format!("initial validation loss {best}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut opt = Optimizer::new(hyper.optimizer);
    let mut bad_rounds = 0;
    let mut step = 0;
    while failed.is_none() && step < hyper.max_steps {
        let mut batch = Vec::with_capacity(hyper.batch_size);
        while batch.len() < hyper.batch_size.min(train.len()) {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            let i = order.pop().unwrap();
            batch.push((train[i].0.as_slice(), train[i].1.as_slice()));
        }
        let tokens: usize = batch.iter().map(|(_, t)| t.len()).sum();
        let loss = diverged(model.train_step(&batch, &mut opt, hyper.lr).map_err(HarnessError::from))?;
        step += 1;
        if !loss.is_finite() {
            ledger.record(flops.train_step(plan, tokens), tokens as u64, None);
            failed = Some(format!("training loss {loss} at step {step}"));
            break;
        }
        let eval_now = step % hyper.eval_every == 0 || step == hyper.max_steps;
        if !eval_now {
            ledger.record(flops.train_step(plan, tokens), tokens as u64, None);
            continue;
        }
        let v = diverged(validation_loss(model, val))?;
        ledger.record(flops.train_step(plan, tokens), tokens as u64, Some(v));
        history.push((step, v));
        if !v.is_finite() {
            failed = Some(format!("validation loss {v} at step {step}"));
        } else if v < best {
            best = v;
            best_step = step;
            snapshot = trainable(model);
            bad_rounds = 0;
        } else {
            bad_rounds += 1;
            if bad_rounds > hyper.patience {
                break;
            }
        }
    }
    snapshot.restore_into(&mut model.store)?;
    if let Some(reason) = &failed {
        log::warn!("training aborted: {reason}");
    }
    Ok(TrainOutcome {
        best_val_loss: best,
        best_step,
        steps: step,
        history,
        ledger,
        failed,
    })
}
