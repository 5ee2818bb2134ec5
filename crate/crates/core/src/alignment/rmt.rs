//! Stage two: pairwise reward-model training.
//!
//! For each (CV, matched JD, mismatched JD) triple the model is pushed
//! to score the matched JD higher; the loss is the negative
//! log-sigmoid of the score margin, so only margins matter and adding
//! a constant to every score changes nothing.

use serde::{Deserialize, Serialize};

use crate::corpus::datasets::RmtTriple;
use crate::corpus::docs::{CVDoc, JDDoc};
use crate::error::{Error, Result};
use crate::models::scorer::RewardModel;
use crate::models::trunk::Bound;
use crate::tensor::{GradTape, NodeId, OptimizerKind, OptimizerState};
use crate::training::{batch_loss_and_grads, check_finite_loss, shuffled_indices};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RmtConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Draw a fresh mismatched JD for every triple each epoch instead
    /// of reusing the stored one.
    pub resample_negatives: bool,
}

impl Default for RmtConfig {
    fn default() -> Self {
        RmtConfig {
            epochs: 4,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 0,
            resample_negatives: false,
        }
    }
}

impl RmtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("rmt epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("rmt learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Ranking loss from two score nodes: softplus of the negated margin,
/// identical to the negative log-sigmoid of the margin.
pub fn pairwise_loss_from_scores(
    tape: &mut GradTape,
    score_pos: NodeId,
    score_neg: NodeId,
) -> Result<NodeId> {
    let margin = tape.sub(score_pos, score_neg)?;
    let neg = tape.scale(margin, -1.0)?;
    let loss = tape.softplus(neg)?;
    tape.mean(loss)
}

/// Ranking loss node for one triple.
pub fn rmt_loss_graph(
    model: &RewardModel,
    tape: &mut GradTape,
    bound: &Bound,
    cv: &CVDoc,
    jd_pos: &JDDoc,
    jd_neg: &JDDoc,
) -> Result<NodeId> {
    let s_pos = model.score_graph(tape, bound, &cv.tokens, &jd_pos.tokens, None)?;
    let s_neg = model.score_graph(tape, bound, &cv.tokens, &jd_neg.tokens, None)?;
    pairwise_loss_from_scores(tape, s_pos, s_neg)
}

/// Scalar loss without training.
pub fn rmt_loss(model: &RewardModel, cv: &CVDoc, jd_pos: &JDDoc, jd_neg: &JDDoc) -> Result<f64> {
    let mut tape = GradTape::new();
    let bound = Bound::new(&model.params, &mut tape, false);
    let node = rmt_loss_graph(model, &mut tape, &bound, cv, jd_pos, jd_neg)?;
    tape.value(node).item()
}

/// Fraction of triples whose matched JD outscores the mismatched one.
pub fn pairwise_accuracy(model: &RewardModel, triples: &[RmtTriple]) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::value("pairwise_accuracy", "empty triple set"));
    }
    let mut correct = 0usize;
    for t in triples {
        let sp = model.reward_score(&t.cv.tokens, &t.jd_pos.tokens)?;
        let sn = model.reward_score(&t.cv.tokens, &t.jd_neg.tokens)?;
        if sp > sn {
            correct += 1;
        }
    }
    Ok(correct as f64 / triples.len() as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RmtEpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RmtReport {
    pub initial_heldout_accuracy: f64,
    pub epochs: Vec<RmtEpochStats>,
}

impl RmtReport {
    pub fn final_heldout_accuracy(&self) -> f64 {
        self.epochs
            .last()
            .map(|e| e.heldout_accuracy)
            .unwrap_or(self.initial_heldout_accuracy)
    }
}

/// Trains the reward model in place. When `cfg.resample_negatives` is
/// set, `resampler` must produce a fresh mismatched JD for a CV and a
/// seed; otherwise it is never called.
pub fn train_reward(
    model: &mut RewardModel,
    train: &[RmtTriple],
    heldout: &[RmtTriple],
    cfg: &RmtConfig,
    resampler: Option<&(dyn Fn(&CVDoc, u64) -> Result<JDDoc> + Sync)>,
) -> Result<RmtReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::value("train_reward", "empty training set"));
    }
    if cfg.resample_negatives && resampler.is_none() {
        return Err(Error::Config(
            "rmt resample_negatives set but no resampler supplied".into(),
        ));
    }
    let mut opt = OptimizerState::new(OptimizerKind::adam(), cfg.learning_rate);
    let mut report = RmtReport {
        initial_heldout_accuracy: pairwise_accuracy(model, heldout)?,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let epoch_triples: Vec<RmtTriple> = if cfg.resample_negatives {
            let resample = resampler.expect("checked above");
            train
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let seed = cfg
                        .seed
                        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                        .wrapping_add((epoch * train.len() + i) as u64);
                    Ok(RmtTriple {
                        cv: t.cv.clone(),
                        jd_pos: t.jd_pos.clone(),
                        jd_neg: resample(&t.cv, seed)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            train.to_vec()
        };
        let order = shuffled_indices(epoch_triples.len(), cfg.seed.wrapping_add(epoch as u64));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&RmtTriple> = chunk.iter().map(|&i| &epoch_triples[i]).collect();
            let out = batch_loss_and_grads(&model.params, &batch, |tape, bound, t| {
                rmt_loss_graph(model, tape, bound, &t.cv, &t.jd_pos, &t.jd_neg)
            })?;
            check_finite_loss("rmt", step, out.mean_loss)?;
            opt.step(&mut model.params, &out.grads).map_err(|e| Error::Diverged {
                stage: "rmt".into(),
                step,
                detail: e.to_string(),
            })?;
            epoch_loss += out.mean_loss;
            batches += 1;
            step += 1;
        }
        report.epochs.push(RmtEpochStats {
            epoch,
            train_loss: epoch_loss / batches as f64,
            heldout_accuracy: pairwise_accuracy(model, heldout)?,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::datasets::{make_datasets, CorpusConfig};
    use crate::corpus::ontology::{SkillOntology, Vocab, SEP};
    use crate::models::trunk::TransformerConfig;
    use crate::tensor::Tensor;

    fn triples(n: usize, seed: u64) -> (Vec<RmtTriple>, usize) {
        let ontology = SkillOntology::default_world();
        let vocab = Vocab::build(&ontology, &[]);
        let cfg = CorpusConfig {
            sft_examples: 1,
            rmt_triples: n,
            rl_cvs: 1,
            rec_train: 3,
            rec_val: 1,
            rec_test: 2,
            eval_cvs: 1,
            ..CorpusConfig::default()
        };
        let bundle = make_datasets(&ontology, &vocab, &cfg, seed).unwrap();
        (bundle.rmt, vocab.len())
    }

    fn small_reward(vocab: usize, seed: u64) -> RewardModel {
        let config = TransformerConfig {
            vocab_size: vocab,
            max_seq_len: 64,
            width: 16,
            n_layers: 1,
            n_heads: 2,
            ff_width: 32,
            dropout: 0.0,
        };
        RewardModel::new(config, seed, SEP).unwrap()
    }

    fn trainable_reward(vocab: usize, seed: u64) -> RewardModel {
        let mut config = TransformerConfig::scorer_default(vocab);
        config.max_seq_len = 64;
        RewardModel::new(config, seed, SEP).unwrap()
    }

    #[test]
    fn equal_scores_cost_ln_two() {
        let (ts, vocab) = triples(1, 1);
        let model = small_reward(vocab, 2);
        // Same JD on both sides: margin is exactly zero.
        let loss = rmt_loss(&model, &ts[0].cv, &ts[0].jd_pos, &ts[0].jd_pos).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15, "loss {loss}");
    }

    #[test]
    fn margin_one_costs_neg_log_sigmoid_one() {
        let mut tape = GradTape::new();
        let sp = tape.leaf(Tensor::from_vec(vec![1.0]).unwrap());
        let sn = tape.leaf(Tensor::from_vec(vec![0.0]).unwrap());
        let loss = pairwise_loss_from_scores(&mut tape, sp, sn).unwrap();
        let got = tape.value(loss).item().unwrap();
        assert!((got - 0.31326168751822286).abs() < 1e-15, "loss {got}");
    }

    #[test]
    fn loss_is_monotone_in_the_margin() {
        let eval = |m: f64| {
            let mut tape = GradTape::new();
            let sp = tape.leaf(Tensor::from_vec(vec![m]).unwrap());
            let sn = tape.leaf(Tensor::from_vec(vec![0.0]).unwrap());
            let loss = pairwise_loss_from_scores(&mut tape, sp, sn).unwrap();
            tape.value(loss).item().unwrap()
        };
        assert!(eval(5.0) < eval(1.0));
        assert!(eval(1.0) < eval(0.0));
        assert!(eval(0.0) < eval(-1.0));
        assert!(eval(-1.0) < eval(-5.0));
        assert!(eval(5.0) < 0.01);
        assert!(eval(-5.0) > 5.0);
    }

    #[test]
    fn swapped_arguments_negate_the_margin_and_bound_the_sum() {
        for m in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let eval = |a: f64, b: f64| {
                let mut tape = GradTape::new();
                let sp = tape.leaf(Tensor::from_vec(vec![a]).unwrap());
                let sn = tape.leaf(Tensor::from_vec(vec![b]).unwrap());
                let loss = pairwise_loss_from_scores(&mut tape, sp, sn).unwrap();
                tape.value(loss).item().unwrap()
            };
            let fwd = eval(m, 0.0);
            let rev = eval(0.0, m);
            let sum = fwd + rev;
            assert!(sum >= 2.0 * std::f64::consts::LN_2 - 1e-15, "margin {m}: sum {sum}");
            if m == 0.0 {
                assert!((sum - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
            } else {
                assert!(sum > 2.0 * std::f64::consts::LN_2 + 1e-6);
            }
        }
    }

    #[test]
    fn untrained_accuracy_sits_near_chance() {
        let (ts, vocab) = triples(1000, 3);
        let model = small_reward(vocab, 4);
        let acc = pairwise_accuracy(&model, &ts).unwrap();
        assert!((0.45..=0.55).contains(&acc), "untrained accuracy {acc}");
    }

    #[test]
    fn accuracy_ignores_constant_score_shifts() {
        let (ts, vocab) = triples(60, 5);
        let mut model = small_reward(vocab, 6);
        let before = pairwise_accuracy(&model, &ts).unwrap();
        let i = model.params.index_of("head.b").unwrap();
        model.params.update(i, |b| b[0] += 1.0);
        let after = pairwise_accuracy(&model, &ts).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn training_learns_the_rule_on_a_small_set() {
        let (ts, vocab) = triples(360, 7);
        let (train, heldout) = ts.split_at(300);
        let mut model = trainable_reward(vocab, 8);
        let cfg = RmtConfig {
            epochs: 10,
            batch_size: 10,
            learning_rate: 1e-2,
            seed: 9,
            resample_negatives: false,
        };
        let report = train_reward(&mut model, train, heldout, &cfg, None).unwrap();
        assert!(
            report.final_heldout_accuracy() >= 0.8,
            "accuracy {}",
            report.final_heldout_accuracy()
        );
        assert!(report.final_heldout_accuracy() > report.initial_heldout_accuracy);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (ts, vocab) = triples(30, 11);
        let cfg = RmtConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 3e-3,
            seed: 12,
            resample_negatives: false,
        };
        let mut a = small_reward(vocab, 13);
        let ra = train_reward(&mut a, &ts, &ts, &cfg, None).unwrap();
        let mut b = small_reward(vocab, 13);
        let rb = train_reward(&mut b, &ts, &ts, &cfg, None).unwrap();
        assert_eq!(a.params.fingerprint(), b.params.fingerprint());
        assert_eq!(ra, rb);
    }

    #[test]
    fn resampling_requires_a_resampler_and_uses_it() {
        let (ts, vocab) = triples(8, 15);
        let mut model = small_reward(vocab, 16);
        let cfg = RmtConfig {
            epochs: 1,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 17,
            resample_negatives: true,
        };
        assert!(train_reward(&mut model, &ts, &ts, &cfg, None).is_err());

        let ontology = SkillOntology::default_world();
        let vocab_t = Vocab::build(&ontology, &[]);
        let sampler = crate::corpus::docs::CorpusSampler::new(&ontology, &vocab_t);
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let resampler = |cv: &CVDoc, seed: u64| {
            calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            sampler.sample_jd_for_cv(cv, 0, seed)
        };
        train_reward(&mut model, &ts, &ts, &cfg, Some(&resampler)).unwrap();
        assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 8);
    }
}
