//! Binary-feedback training for the recommender.
//!
//! The loss is binary cross-entropy between the squashed score and the
//! interaction label, written in logit form (`softplus(s) - z*s`) so no
//! probability is ever materialised on the tape. Validation AUC is
//! computed after every epoch; the best-scoring parameters are kept and
//! restored at the end, with an optional patience-based early stop.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::auc;
use crate::models::trunk::Bound;
use crate::recsys::model::{RecExample, RecModel};
use crate::tensor::{GradTape, NodeId, OptimizerKind, OptimizerState};
use crate::training::{batch_loss_and_grads, check_finite_loss, shuffled_indices};
use crate::util::{derive_seed, derive_seed_indexed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without a validation-AUC improvement before stopping.
    /// Zero disables early stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for RecTrainConfig {
    fn default() -> Self {
        RecTrainConfig {
            epochs: 12,
            batch_size: 16,
            learning_rate: 3e-3,
            patience: 3,
            seed: 0,
        }
    }
}

impl RecTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("rec epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("rec learning_rate must be positive and finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecEpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecReport {
    pub initial_val_auc: f64,
    pub epochs: Vec<RecEpochStats>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
}

/// Cross-entropy node for one example on the caller's tape.
pub fn rec_loss_graph(
    model: &RecModel,
    tape: &mut GradTape,
    bound: &Bound,
    example: &RecExample,
) -> Result<NodeId> {
    example.validate()?;
    let raw = model.score_graph(tape, bound, example)?;
    let softplus = tape.softplus(raw)?;
    let loss = if example.label == 1 {
        tape.sub(softplus, raw)?
    } else {
        softplus
    };
    tape.mean(loss)
}

/// Loss of one example without gradients.
pub fn rec_loss(model: &RecModel, example: &RecExample) -> Result<f64> {
    let mut tape = GradTape::new();
    let bound = Bound::new(&model.params, &mut tape, false);
    let node = rec_loss_graph(model, &mut tape, &bound, example)?;
    tape.value(node).item()
}

/// Mean loss over a slice, no gradients, deterministic reduction order.
pub fn mean_rec_loss(model: &RecModel, set: &[RecExample]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::value("rec_loss", "empty evaluation set"));
    }
    let losses: Vec<f64> = set
        .par_iter()
        .map(|ex| rec_loss(model, ex))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / set.len() as f64)
}

/// Match probabilities for a whole slice, in input order.
pub fn rec_probabilities(model: &RecModel, set: &[RecExample]) -> Result<Vec<f64>> {
    set.par_iter().map(|ex| model.score_example(ex)).collect()
}

/// AUC of the model's probabilities against the slice's labels.
pub fn rec_auc(model: &RecModel, set: &[RecExample]) -> Result<f64> {
    let scores = rec_probabilities(model, set)?;
    let labels: Vec<u8> = set.iter().map(|ex| ex.label).collect();
    auc(&scores, &labels)
}

/// Trains the recommender in place. The returned model carries the
/// parameters of the best validation epoch, not necessarily the last.
pub fn train_rec(
    model: &mut RecModel,
    train: &[RecExample],
    val: &[RecExample],
    cfg: &RecTrainConfig,
) -> Result<RecReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::value("train_rec", "empty training set"));
    }
    if val.is_empty() {
        return Err(Error::value("train_rec", "empty validation set"));
    }
    for ex in train.iter().chain(val.iter()) {
        ex.validate()?;
        if model.config.enhanced && ex.generated.is_empty() {
            return Err(Error::value(
                "train_rec",
                "enhanced model, but an example carries no generated JDs",
            ));
        }
    }
    let shuffle_seed = derive_seed(cfg.seed, "rec-shuffle");
    let mut opt = OptimizerState::new(OptimizerKind::adam(), cfg.learning_rate);
    let mut report = RecReport {
        initial_val_auc: rec_auc(model, val)?,
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_val_auc: f64::NEG_INFINITY,
    };
    let mut best_params = None;
    let mut since_improvement = 0usize;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(train.len(), derive_seed_indexed(shuffle_seed, epoch as u64));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&RecExample> = chunk.iter().map(|&i| &train[i]).collect();
            let outcome = batch_loss_and_grads(&model.params, &batch, |tape, bound, ex| {
                rec_loss_graph(model, tape, bound, ex)
            })?;
            check_finite_loss("rec", step, outcome.mean_loss)?;
            opt.step(&mut model.params, &outcome.grads).map_err(|e| Error::Diverged {
                stage: "rec".into(),
                step,
                detail: e.to_string(),
            })?;
            epoch_loss += outcome.mean_loss;
            batches += 1;
            step += 1;
        }
        let val_auc = rec_auc(model, val)?;
        report.epochs.push(RecEpochStats {
            epoch,
            train_loss: epoch_loss / batches as f64,
            val_auc,
        });
        if val_auc > report.best_val_auc {
            report.best_val_auc = val_auc;
            report.best_epoch = epoch;
            best_params = Some(model.params.deep_clone());
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if cfg.patience > 0 && since_improvement >= cfg.patience {
                break;
            }
        }
    }
    if let Some(params) = best_params {
        model.params = params;
    }
    Ok(report)
}
