//! Batching helpers shared by every training stage.
//!
//! Minibatch elements are evaluated on private tapes, in parallel when
//! cores allow, and their gradients reduced in input order so the sum
//! is bit-deterministic regardless of scheduling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::trunk::Bound;
use crate::tensor::{GradTape, NodeId, ParamSet, Tensor};

/// Mean loss and mean per-parameter gradients over one minibatch.
pub struct BatchOutcome {
    pub mean_loss: f64,
    pub grads: Vec<Tensor>,
}

/// Runs `build` once per element on a private tape with trainable
/// parameters, backpropagates each scalar loss, and averages losses and
/// gradients. The reduction walks elements in input order.
pub fn batch_loss_and_grads<S: Sync>(
    params: &ParamSet,
    batch: &[S],
    build: impl Fn(&mut GradTape, &Bound, &S) -> Result<NodeId> + Sync,
) -> Result<BatchOutcome> {
    if batch.is_empty() {
        return Err(Error::value("train", "empty minibatch"));
    }
    let per_sample: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|sample| -> Result<(f64, Vec<Tensor>)> {
            let mut tape = GradTape::new();
            let bound = Bound::new(params, &mut tape, true);
            let loss = build(&mut tape, &bound, sample)?;
            let loss_value = tape.value(loss).item()?;
            let grads = tape.backward(loss)?;
            let collected = bound
                .ids()
                .iter()
                .map(|&id| grads.get_or_zeros(&tape, id))
                .collect();
            Ok((loss_value, collected))
        })
        .collect::<Result<Vec<_>>>()?;

    let scale = 1.0 / batch.len() as f64;
    let mut mean_loss = 0.0;
    let mut acc: Vec<Tensor> = params.tensors().iter().map(Tensor::zeros_like).collect();
    for (loss, grads) in per_sample {
        mean_loss += loss;
        for (a, g) in acc.iter_mut().zip(&grads) {
            let data = a.data_mut();
            for (x, y) in data.iter_mut().zip(g.data()) {
                *x += y;
            }
        }
    }
    mean_loss *= scale;
    for a in &mut acc {
        for x in a.data_mut() {
            *x *= scale;
        }
    }
    Ok(BatchOutcome {
        mean_loss,
        grads: acc,
    })
}

/// Seeded shuffle of `0..n`, fresh per call.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Maps a non-finite loss into a stage-tagged divergence error.
pub fn check_finite_loss(stage: &str, step: u64, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            stage: stage.to_string(),
            step,
            detail: format!("loss became {loss}"),
        })
    }
}
