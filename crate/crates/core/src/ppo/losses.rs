//! Surrogate losses for the alignment stage.
//!
//! The actor minimizes the negated clipped-ratio objective: for each
//! sequence the probability ratio between the live actor and a fixed
//! anchor policy is clamped to `[1-eps, 1+eps]`, both the raw and the
//! clamped ratio are scaled by the sequence advantage, and the
//! elementwise minimum is kept. The critic minimizes the mean squared
//! error between its CV value and the shaped reward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::generator::GeneratorModel;
use crate::models::scorer::CriticModel;
use crate::models::trunk::Bound;
use crate::ppo::rollout::RolloutSample;
use crate::tensor::{GradTape, NodeId, Tensor};

/// Which recorded log-probabilities anchor the importance ratio.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum OldPolicy {
    /// The frozen reference generator. The source equations reuse the
    /// KL ratio as the importance ratio, so this is the default.
    FrozenReference,
    /// The actor as it stood when the rollout was collected, refreshed
    /// every iteration; the conventional choice.
    RolloutActor,
}

pub(crate) fn anchor_logprobs(sample: &RolloutSample, old: OldPolicy) -> &[f64] {
    match old {
        OldPolicy::FrozenReference => &sample.reference_logprobs,
        OldPolicy::RolloutActor => &sample.actor_logprobs,
    }
}

/// Clipped surrogate objective for one sequence, averaged over its
/// tokens. `current_logprobs` must be a tracked vector node;
/// `old_logprobs` is treated as constant. Where the clamped branch is
/// selected and the ratio sits outside the clip band, no gradient
/// reaches the actor through that token.
pub fn clipped_objective(
    tape: &mut GradTape,
    current_logprobs: NodeId,
    old_logprobs: NodeId,
    advantage: f64,
    clip: f64,
) -> Result<NodeId> {
    if !(clip > 0.0 && clip < 1.0) {
        return Err(Error::value(
            "actor_loss",
            format!("clip parameter {clip} must lie strictly between 0 and 1"),
        ));
    }
    let log_ratio = tape.sub(current_logprobs, old_logprobs)?;
    let ratio = tape.exp(log_ratio)?;
    let clamped = tape.clamp(ratio, 1.0 - clip, 1.0 + clip)?;
    let raw_term = tape.scale(ratio, advantage)?;
    let clamped_term = tape.scale(clamped, advantage)?;
    let pessimistic = tape.minimum(raw_term, clamped_term)?;
    tape.mean(pessimistic)
}

/// Negated minibatch mean of the clipped surrogate objective. Ratios
/// are re-evaluated under the live actor parameters bound to `tape`;
/// `old` picks the anchor log-probabilities recorded at rollout time.
pub fn actor_loss(
    actor: &GeneratorModel,
    tape: &mut GradTape,
    bound: &Bound,
    samples: &[&RolloutSample],
    clip: f64,
    old: OldPolicy,
) -> Result<NodeId> {
    if samples.is_empty() {
        return Err(Error::value("actor_loss", "empty minibatch"));
    }
    let mut objectives = Vec::with_capacity(samples.len());
    for s in samples {
        let current = actor.logprob_graph(tape, bound, &s.prompt_tokens, &s.jd_tokens, None)?;
        let anchor = tape.constant(Tensor::from_vec(anchor_logprobs(s, old).to_vec())?);
        objectives.push(clipped_objective(tape, current, anchor, s.advantage, clip)?);
    }
    let joined = tape.concat(&objectives)?;
    let mean = tape.mean(joined)?;
    tape.scale(mean, -1.0)
}

/// Mean squared error between shaped rewards and critic values over a
/// minibatch.
pub fn critic_loss(
    critic: &CriticModel,
    tape: &mut GradTape,
    bound: &Bound,
    samples: &[&RolloutSample],
) -> Result<NodeId> {
    if samples.is_empty() {
        return Err(Error::value("critic_loss", "empty minibatch"));
    }
    let mut squares = Vec::with_capacity(samples.len());
    for s in samples {
        let value = critic.value_graph(tape, bound, &s.cv_tokens, None)?;
        let target = tape.constant(Tensor::matrix(1, 1, vec![s.reward])?);
        let diff = tape.sub(target, value)?;
        squares.push(tape.mul(diff, diff)?);
    }
    let joined = tape.concat(&squares)?;
    tape.mean(joined)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::trunk::TransformerConfig;
    use crate::ppo::rollout::{rollout, RolloutInput};
    use crate::models::sampling::SamplingConfig;

    fn toy_config(vocab: usize) -> TransformerConfig {
        TransformerConfig {
            vocab_size: vocab,
            max_seq_len: 32,
            width: 16,
            n_layers: 1,
            n_heads: 2,
            ff_width: 32,
            dropout: 0.0,
        }
    }

    /// Objective value and d objective / d current log-prob for a single
    /// token with the given ratio and advantage.
    fn probe(ratio: f64, advantage: f64, clip: f64) -> (f64, f64) {
        let mut tape = GradTape::new();
        let current = tape.param(Tensor::from_vec(vec![-1.0]).unwrap());
        let old = tape.constant(Tensor::from_vec(vec![-1.0 - ratio.ln()]).unwrap());
        let obj = clipped_objective(&mut tape, current, old, advantage, clip).unwrap();
        let value = tape.value(obj).item().unwrap();
        let grads = tape.backward(obj).unwrap();
        (value, grads.get(current).unwrap()[0])
    }

    #[test]
    fn unit_ratio_recovers_the_advantage_with_live_gradient() {
        for adv in [1.0, -0.75, 0.0] {
            let (value, grad) = probe(1.0, adv, 0.2);
            assert_eq!(value, adv);
            assert_eq!(grad, adv);
        }
    }

    #[test]
    fn above_band_positive_advantage_is_clamped_with_zero_gradient() {
        let (value, grad) = probe(1.5, 1.0, 0.2);
        assert!((value - 1.2).abs() < 1e-12, "value {value}");
        assert_eq!(grad, 0.0);
    }

    #[test]
    fn above_band_negative_advantage_keeps_the_raw_ratio() {
        let (value, grad) = probe(1.5, -1.0, 0.2);
        assert!((value + 1.5).abs() < 1e-12, "value {value}");
        assert!((grad + 1.5).abs() < 1e-12, "grad {grad}");
    }

    #[test]
    fn below_band_positive_advantage_keeps_the_raw_ratio() {
        let (value, grad) = probe(0.5, 1.0, 0.2);
        assert!((value - 0.5).abs() < 1e-12, "value {value}");
        assert!((grad - 0.5).abs() < 1e-12, "grad {grad}");
    }

    #[test]
    fn below_band_negative_advantage_is_clamped_with_zero_gradient() {
        // The elementwise minimum picks the clamped branch here:
        // 0.8 * a < 0.5 * a for negative a.
        let (value, grad) = probe(0.5, -1.0, 0.2);
        assert!((value + 0.8).abs() < 1e-12, "value {value}");
        assert_eq!(grad, 0.0);
    }

    #[test]
    fn clip_parameter_is_validated() {
        for bad in [0.0, 1.0, -0.2, 1.5] {
            let mut tape = GradTape::new();
            let current = tape.param(Tensor::from_vec(vec![-1.0]).unwrap());
            let old = tape.constant(Tensor::from_vec(vec![-1.0]).unwrap());
            assert!(clipped_objective(&mut tape, current, old, 1.0, bad).is_err());
        }
    }

    fn rollout_fixture(seed: u64) -> (GeneratorModel, Vec<RolloutSample>) {
        let actor = GeneratorModel::new(toy_config(11), seed).unwrap();
        let reference = GeneratorModel::new(toy_config(11), seed.wrapping_add(1)).unwrap();
        let inputs: Vec<RolloutInput> = (0..3)
            .map(|i| {
                let cv: Vec<usize> = (0..5).map(|t| 3 + (t + i) % 7).collect();
                RolloutInput {
                    prompt_tokens: cv.clone(),
                    cv_tokens: cv,
                }
            })
            .collect();
        let sampling = SamplingConfig {
            temperature: 0.9,
            top_k: 10,
            max_new_tokens: 6,
            eos_token: 1,
            seed: 0,
        };
        let mut samples = rollout(&actor, &reference, &inputs, &sampling, seed).unwrap();
        for (i, s) in samples.iter_mut().enumerate() {
            s.reward = 0.3 * (i as f64 + 1.0);
            s.advantage = if i % 2 == 0 { 0.4 } else { -0.6 };
        }
        (actor, samples)
    }

    #[test]
    fn fresh_actor_objective_equals_mean_advantage() {
        // Anchored on its own rollout log-probs, an unchanged actor has
        // every ratio exactly one, so the loss is the negated mean
        // advantage.
        let (actor, samples) = rollout_fixture(3);
        let refs: Vec<&RolloutSample> = samples.iter().collect();
        let mut tape = GradTape::new();
        let bound = Bound::new(&actor.params, &mut tape, false);
        let loss = actor_loss(&actor, &mut tape, &bound, &refs, 0.2, OldPolicy::RolloutActor).unwrap();
        let value = tape.value(loss).item().unwrap();
        let mean_adv: f64 =
            samples.iter().map(|s| s.advantage).sum::<f64>() / samples.len() as f64;
        assert!((value + mean_adv).abs() < 1e-12, "loss {value} vs mean advantage {mean_adv}");
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let (mut actor, samples) = rollout_fixture(5);
        let refs: Vec<&RolloutSample> = samples.iter().collect();
        let eval = |actor: &GeneratorModel| {
            let mut tape = GradTape::new();
            let bound = Bound::new(&actor.params, &mut tape, false);
            let loss =
                actor_loss(actor, &mut tape, &bound, &refs, 0.2, OldPolicy::FrozenReference)
                    .unwrap();
            tape.value(loss).item().unwrap()
        };
        let names = ["emb.tok", "layer0.attn.h0.wq", "layer0.ffn.w1", "out.w"];
        let analytic_by_name: Vec<f64> = {
            let mut tape = GradTape::new();
            let bound = Bound::new(&actor.params, &mut tape, true);
            let loss =
                actor_loss(&actor, &mut tape, &bound, &refs, 0.2, OldPolicy::FrozenReference)
                    .unwrap();
            let grads = tape.backward(loss).unwrap();
            names
                .iter()
                .map(|name| grads.get_or_zeros(&tape, bound.id(name)).data()[0])
                .collect()
        };

        let h = 1e-5;
        for (name, analytic) in names.iter().zip(analytic_by_name) {
            let pi = actor.params.index_of(name).unwrap();
            let original = actor.params.tensor(pi).data()[0];
            actor.params.update(pi, |w| w[0] = original + h);
            let plus = eval(&actor);
            actor.params.update(pi, |w| w[0] = original - h);
            let minus = eval(&actor);
            actor.params.update(pi, |w| w[0] = original);
            let numeric = (plus - minus) / (2.0 * h);
            assert!(
                (analytic - numeric).abs() < 1e-4 * analytic.abs().max(numeric.abs()).max(1.0),
                "{name}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn perfect_critic_costs_zero_and_constant_critic_costs_one() {
        let (_, mut samples) = rollout_fixture(7);
        let mut critic = CriticModel::new(toy_config(11), 9).unwrap();
        for name in ["head.w", "head.b"] {
            let i = critic.params.index_of(name).unwrap();
            critic.params.update(i, |w| w.fill(0.0));
        }
        for (i, s) in samples.iter_mut().enumerate() {
            s.reward = if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        // One spare sample keeps the set balanced between +1 and -1.
        let refs: Vec<&RolloutSample> = samples.iter().take(2).collect();

        let mut tape = GradTape::new();
        let bound = Bound::new(&critic.params, &mut tape, false);
        let loss = critic_loss(&critic, &mut tape, &bound, &refs).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 1.0);

        let mut perfect = samples.clone();
        for s in perfect.iter_mut() {
            s.reward = critic.critic_value(&s.cv_tokens).unwrap();
        }
        let refs: Vec<&RolloutSample> = perfect.iter().collect();
        let mut tape = GradTape::new();
        let bound = Bound::new(&critic.params, &mut tape, false);
        let loss = critic_loss(&critic, &mut tape, &bound, &refs).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let (_, samples) = rollout_fixture(11);
        let mut critic = CriticModel::new(toy_config(11), 13).unwrap();
        let refs: Vec<&RolloutSample> = samples.iter().collect();
        let eval = |critic: &CriticModel| {
            let mut tape = GradTape::new();
            let bound = Bound::new(&critic.params, &mut tape, false);
            let loss = critic_loss(critic, &mut tape, &bound, &refs).unwrap();
            tape.value(loss).item().unwrap()
        };
        let names = ["emb.tok", "layer0.attn.wo", "head.w"];
        let analytic_by_name: Vec<f64> = {
            let mut tape = GradTape::new();
            let bound = Bound::new(&critic.params, &mut tape, true);
            let loss = critic_loss(&critic, &mut tape, &bound, &refs).unwrap();
            let grads = tape.backward(loss).unwrap();
            names
                .iter()
                .map(|name| grads.get_or_zeros(&tape, bound.id(name)).data()[0])
                .collect()
        };

        let h = 1e-5;
        for (name, analytic) in names.iter().zip(analytic_by_name) {
            let pi = critic.params.index_of(name).unwrap();
            let original = critic.params.tensor(pi).data()[0];
            critic.params.update(pi, |w| w[0] = original + h);
            let plus = eval(&critic);
            critic.params.update(pi, |w| w[0] = original - h);
            let minus = eval(&critic);
            critic.params.update(pi, |w| w[0] = original);
            let numeric = (plus - minus) / (2.0 * h);
            assert!(
                (analytic - numeric).abs() < 1e-4 * analytic.abs().max(numeric.abs()).max(1.0),
                "{name}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn empty_minibatches_are_rejected() {
        let actor = GeneratorModel::new(toy_config(11), 1).unwrap();
        let critic = CriticModel::new(toy_config(11), 2).unwrap();
        let mut tape = GradTape::new();
        let bound = Bound::new(&actor.params, &mut tape, false);
        assert!(actor_loss(&actor, &mut tape, &bound, &[], 0.2, OldPolicy::FrozenReference).is_err());
        let mut tape = GradTape::new();
        let bound = Bound::new(&critic.params, &mut tape, false);
        assert!(critic_loss(&critic, &mut tape, &bound, &[]).is_err());
    }
}
