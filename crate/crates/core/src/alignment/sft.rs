//! Stage one: supervised fine-tuning of the generator on matched
//! CV/JD pairs.
//!
//! The loss is the per-token negative log-likelihood averaged over the
//! output region only; prompt positions contribute nothing, which a
//! test checks by inspecting the logits gradient row by row.

use serde::{Deserialize, Serialize};

use crate::corpus::prompt::PromptInstance;
use crate::error::{Error, Result};
use crate::models::generator::GeneratorModel;
use crate::models::trunk::Bound;
use crate::tensor::{
    clip_gradients_by_norm, GradTape, NodeId, OptimizerKind, OptimizerState,
};
use crate::training::{batch_loss_and_grads, check_finite_loss, shuffled_indices};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            epochs: 8,
            batch_size: 16,
            learning_rate: 3e-3,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("sft epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config(
                "sft learning_rate and clip_norm must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Masked mean negative log-likelihood of one prompt instance, as a
/// node on the caller's tape.
pub fn sft_loss_graph(
    model: &GeneratorModel,
    tape: &mut GradTape,
    bound: &Bound,
    instance: &PromptInstance,
) -> Result<NodeId> {
    if instance.tokens.len() != instance.output_mask.len() {
        return Err(Error::value("sft_loss", "mask length differs from token length"));
    }
    let targets: Vec<(usize, usize)> = instance
        .output_mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(p, _)| (p, instance.tokens[p]))
        .collect();
    if targets.is_empty() {
        return Err(Error::value("sft_loss", "output mask selects no positions"));
    }
    if targets[0].0 == 0 {
        return Err(Error::value("sft_loss", "output cannot start at position zero"));
    }
    let logits = model.logits_graph(tape, bound, &instance.tokens, None)?;
    let logprobs = tape.log_softmax(logits)?;
    // Row p-1 of the sequence predicts the token at position p.
    let entries: Vec<(usize, usize)> = targets.iter().map(|&(p, t)| (p - 1, t)).collect();
    let selected = tape.select_entries(logprobs, entries)?;
    let mean_lp = tape.mean(selected)?;
    tape.scale(mean_lp, -1.0)
}

/// Convenience scalar evaluation of the loss without training.
pub fn sft_loss(model: &GeneratorModel, instance: &PromptInstance) -> Result<f64> {
    let mut tape = GradTape::new();
    let bound = Bound::new(&model.params, &mut tape, false);
    let node = sft_loss_graph(model, &mut tape, &bound, instance)?;
    tape.value(node).item()
}

/// Mean loss over a slice, no gradients.
pub fn mean_sft_loss(model: &GeneratorModel, set: &[PromptInstance]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::value("sft_loss", "empty evaluation set"));
    }
    let mut total = 0.0;
    for inst in set {
        total += sft_loss(model, inst)?;
    }
    Ok(total / set.len() as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SftEpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SftReport {
    pub initial_heldout_loss: f64,
    pub epochs: Vec<SftEpochStats>,
}

impl SftReport {
    pub fn final_heldout_loss(&self) -> f64 {
        self.epochs
            .last()
            .map(|e| e.heldout_loss)
            .unwrap_or(self.initial_heldout_loss)
    }
}

/// Trains the generator in place with Adam. Deterministic given the
/// config seed; a non-finite loss aborts with the parameters from the
/// last completed step still in the model.
pub fn train_sft(
    model: &mut GeneratorModel,
    train: &[PromptInstance],
    heldout: &[PromptInstance],
    cfg: &SftConfig,
) -> Result<SftReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::value("train_sft", "empty training set"));
    }
    let mut opt = OptimizerState::new(OptimizerKind::adam(), cfg.learning_rate);
    let mut report = SftReport {
        initial_heldout_loss: mean_sft_loss(model, heldout)?,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(train.len(), cfg.seed.wrapping_add(epoch as u64));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PromptInstance> = chunk.iter().map(|&i| &train[i]).collect();
            let mut out = batch_loss_and_grads(&model.params, &batch, |tape, bound, inst| {
                sft_loss_graph(model, tape, bound, inst)
            })?;
            check_finite_loss("sft", step, out.mean_loss)?;
            clip_gradients_by_norm(&mut out.grads, cfg.clip_norm);
            opt.step(&mut model.params, &out.grads).map_err(|e| Error::Diverged {
                stage: "sft".into(),
                step,
                detail: e.to_string(),
            })?;
            epoch_loss += out.mean_loss;
            batches += 1;
            step += 1;
        }
        report.epochs.push(SftEpochStats {
            epoch,
            train_loss: epoch_loss / batches as f64,
            heldout_loss: mean_sft_loss(model, heldout)?,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::docs::{CorpusSampler, SeekerId};
    use crate::corpus::ontology::{SkillOntology, Vocab};
    use crate::corpus::prompt::{assemble_prompt, PromptTemplate};
    use crate::models::trunk::TransformerConfig;

    fn world() -> (SkillOntology, Vocab) {
        let ontology = SkillOntology::default_world();
        let vocab = Vocab::build(&ontology, &PromptTemplate::default().words());
        (ontology, vocab)
    }

    fn instances(n: usize, seed: u64) -> (Vec<PromptInstance>, usize) {
        let (ontology, vocab) = world();
        let sampler = CorpusSampler::new(&ontology, &vocab);
        let template = PromptTemplate::default();
        let out = (0..n)
            .map(|i| {
                let cv = sampler.sample_cv(SeekerId(i as u64), seed.wrapping_add(i as u64));
                let jd = sampler.sample_jd_for_cv(&cv, 1, seed ^ (i as u64) << 16).unwrap();
                assemble_prompt(&cv, Some(&jd), &template, &vocab).unwrap()
            })
            .collect();
        (out, vocab.len())
    }

    fn small_model(vocab: usize) -> GeneratorModel {
        let config = TransformerConfig {
            vocab_size: vocab,
            max_seq_len: 64,
            width: 16,
            n_layers: 1,
            n_heads: 2,
            ff_width: 32,
            dropout: 0.0,
        };
        GeneratorModel::new(config, 7).unwrap()
    }

    #[test]
    fn uniform_model_loses_ln_vocab_per_token() {
        let (set, vocab) = instances(1, 3);
        let mut model = small_model(vocab);
        for name in ["out.w", "out.b"] {
            let i = model.params.index_of(name).unwrap();
            model.params.update(i, |w| w.fill(0.0));
        }
        let loss = sft_loss(&model, &set[0]).unwrap();
        assert!(
            (loss - (vocab as f64).ln()).abs() < 1e-12,
            "loss {loss} vs ln V {}",
            (vocab as f64).ln()
        );
    }

    #[test]
    fn certain_model_loses_zero() {
        let (set, vocab) = instances(1, 4);
        // Shrink the output region to one token so one huge bias entry
        // can make the model certain of it.
        let mut inst = set[0].clone();
        let first_out = inst.output_mask.iter().position(|&m| m).unwrap();
        inst.tokens.truncate(first_out + 1);
        inst.output_mask.truncate(first_out + 1);
        let target = inst.tokens[first_out];

        let mut model = small_model(vocab);
        for name in ["out.w"] {
            let i = model.params.index_of(name).unwrap();
            model.params.update(i, |w| w.fill(0.0));
        }
        let i = model.params.index_of("out.b").unwrap();
        model.params.update(i, |b| {
            b.fill(0.0);
            b[target] = 1000.0;
        });
        let loss = sft_loss(&model, &inst).unwrap();
        assert!(loss.abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn loss_matches_scalar_hand_computation() {
        let (set, vocab) = instances(1, 5);
        let inst = &set[0];
        let model = small_model(vocab);
        let got = sft_loss(&model, inst).unwrap();

        let logits = model.forward_logits(&inst.tokens).unwrap();
        let mut total = 0.0;
        let mut count = 0usize;
        for (p, &m) in inst.output_mask.iter().enumerate() {
            if !m {
                continue;
            }
            let row: Vec<f64> = (0..vocab).map(|v| logits.at(p - 1, v)).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += row[inst.tokens[p]] - lse;
            count += 1;
        }
        let want = -total / count as f64;
        assert!((got - want).abs() < 1e-10, "graph {got} vs hand {want}");
    }

    #[test]
    fn prompt_positions_receive_no_gradient() {
        let (set, vocab) = instances(1, 6);
        let inst = &set[0];
        let model = small_model(vocab);

        let mut tape = GradTape::new();
        let bound = Bound::new(&model.params, &mut tape, true);
        // Rebuild enough of the loss to keep a handle on the logits
        // node, then check its gradient row pattern.
        let logits = model.logits_graph(&mut tape, &bound, &inst.tokens, None).unwrap();
        let logprobs = tape.log_softmax(logits).unwrap();
        let entries: Vec<(usize, usize)> = inst
            .output_mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(p, _)| (p - 1, inst.tokens[p]))
            .collect();
        let selected = tape.select_entries(logprobs, entries.clone()).unwrap();
        let mean_lp = tape.mean(selected).unwrap();
        let loss = tape.scale(mean_lp, -1.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        let dlogits = grads.get(logits).expect("logits gradient retained");

        let predicting_rows: std::collections::BTreeSet<usize> =
            entries.iter().map(|&(r, _)| r).collect();
        for row in 0..inst.tokens.len() {
            let row_grad = &dlogits[row * vocab..(row + 1) * vocab];
            let zero = row_grad.iter().all(|&g| g == 0.0);
            if predicting_rows.contains(&row) {
                assert!(!zero, "predicting row {row} should receive gradient");
            } else {
                assert!(zero, "non-output row {row} should have zero gradient");
            }
        }
    }

    #[test]
    fn all_false_mask_is_rejected() {
        let (set, vocab) = instances(1, 7);
        let mut inst = set[0].clone();
        inst.output_mask.iter_mut().for_each(|m| *m = false);
        let model = small_model(vocab);
        let err = sft_loss(&model, &inst).unwrap_err();
        assert!(err.to_string().contains("no positions"), "{err}");
    }

    #[test]
    fn single_example_is_memorized() {
        let (set, vocab) = instances(1, 8);
        let mut model = small_model(vocab);
        let cfg = SftConfig {
            epochs: 150,
            batch_size: 1,
            learning_rate: 1e-2,
            clip_norm: 5.0,
            seed: 1,
        };
        let report = train_sft(&mut model, &set, &set, &cfg).unwrap();
        assert!(
            report.final_heldout_loss() < 0.01,
            "memorization loss {}",
            report.final_heldout_loss()
        );
    }

    #[test]
    fn heldout_loss_drops_and_training_is_bit_reproducible() {
        let (set, vocab) = instances(24, 9);
        let (train, heldout) = set.split_at(20);
        let cfg = SftConfig {
            epochs: 3,
            batch_size: 8,
            learning_rate: 3e-3,
            clip_norm: 1.0,
            seed: 2,
        };
        let mut a = small_model(vocab);
        let ra = train_sft(&mut a, train, heldout, &cfg).unwrap();
        assert!(ra.final_heldout_loss() < ra.initial_heldout_loss);

        let mut b = small_model(vocab);
        let rb = train_sft(&mut b, train, heldout, &cfg).unwrap();
        assert_eq!(a.params.fingerprint(), b.params.fingerprint());
        assert_eq!(ra, rb);
    }

    #[test]
    fn non_finite_loss_reports_divergence() {
        let (set, vocab) = instances(4, 10);
        let mut model = small_model(vocab);
        let i = model.params.index_of("out.b").unwrap();
        model.params.update(i, |w| w[0] = f64::NAN);
        let cfg = SftConfig {
            epochs: 1,
            batch_size: 4,
            learning_rate: 3e-3,
            clip_norm: 1.0,
            seed: 3,
        };
        match train_sft(&mut model, &set, &set, &cfg) {
            Err(Error::Diverged { stage, step, .. }) => {
                assert_eq!(stage, "sft");
                assert_eq!(step, 0);
            }
            Err(other) => panic!("expected divergence, got {other}"),
            Ok(report) => panic!(
                "training survived a poisoned embedding with final loss {}",
                report.final_heldout_loss()
            ),
        }
    }
}
