//! Rollout collection and reward shaping for the alignment stage.
//!
//! The actor writes a JD for each CV while its own per-token
//! log-probabilities and the frozen reference generator's are both
//! recorded at the sampled tokens. Shaping then folds the reward-model
//! score and a KL penalty into one scalar per sequence.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::generator::GeneratorModel;
use crate::models::sampling::{generate, SamplingConfig};
use crate::models::scorer::{CriticModel, RewardModel};
use crate::util::derive_seed_indexed;

/// One CV queued for rollout. The raw CV tokens feed the reward and
/// critic models; the assembled prompt conditions the actor.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RolloutInput {
    pub cv_tokens: Vec<usize>,
    pub prompt_tokens: Vec<usize>,
}

/// One generated JD together with everything the update step needs.
/// `score`, `kl`, `reward`, `value` and `advantage` start at zero and
/// are filled in by [`kl_estimate`], [`shape_reward`] and
/// [`compute_advantage`], in that order.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RolloutSample {
    pub cv_tokens: Vec<usize>,
    pub prompt_tokens: Vec<usize>,
    pub jd_tokens: Vec<usize>,
    /// Log-probabilities at the sampled tokens under the rollout-time actor.
    pub actor_logprobs: Vec<f64>,
    /// Log-probabilities at the same tokens under the frozen reference.
    pub reference_logprobs: Vec<f64>,
    pub score: f64,
    pub kl: f64,
    pub reward: f64,
    pub value: f64,
    pub advantage: f64,
}

/// Samples one JD per input from the actor and scores the sampled
/// tokens under the frozen reference as well. Inputs are processed in
/// parallel; each draws its sampling seed from `seed` and its index, so
/// the result is independent of scheduling.
pub fn rollout(
    actor: &GeneratorModel,
    reference: &GeneratorModel,
    inputs: &[RolloutInput],
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<Vec<RolloutSample>> {
    if inputs.is_empty() {
        return Err(Error::value("rollout", "empty CV batch"));
    }
    if actor.config.vocab_size != reference.config.vocab_size {
        return Err(Error::value(
            "rollout",
            format!(
                "actor vocabulary {} does not match reference vocabulary {}",
                actor.config.vocab_size, reference.config.vocab_size
            ),
        ));
    }
    inputs
        .par_iter()
        .enumerate()
        .map(|(i, input)| {
            let mut cfg = sampling.clone();
            cfg.seed = derive_seed_indexed(seed, i as u64);
            let generated = generate(actor, &input.prompt_tokens, &cfg)?;
            let reference_logprobs =
                reference.sequence_logprobs(&input.prompt_tokens, &generated.tokens)?;
            Ok(RolloutSample {
                cv_tokens: input.cv_tokens.clone(),
                prompt_tokens: input.prompt_tokens.clone(),
                jd_tokens: generated.tokens,
                actor_logprobs: generated.logprobs,
                reference_logprobs,
                score: 0.0,
                kl: 0.0,
                reward: 0.0,
                value: 0.0,
                advantage: 0.0,
            })
        })
        .collect()
}

/// Per-token KL estimate between the rollout-time actor and the frozen
/// reference: the mean over generated tokens of `ratio - 1 - ln ratio`,
/// with `ratio` the actor-over-reference probability ratio at the
/// sampled token. Every term is nonnegative, zero exactly when the
/// ratio is one, so the estimate never dips below rounding noise.
pub fn kl_estimate(sample: &RolloutSample) -> Result<f64> {
    let n = sample.jd_tokens.len();
    if n == 0 {
        return Err(Error::value("kl_estimate", "sample has no generated tokens"));
    }
    if sample.actor_logprobs.len() != n || sample.reference_logprobs.len() != n {
        return Err(Error::value(
            "kl_estimate",
            format!(
                "per-token arrays disagree: {} tokens, {} actor log-probs, {} reference log-probs",
                n,
                sample.actor_logprobs.len(),
                sample.reference_logprobs.len()
            ),
        ));
    }
    let mut total = 0.0;
    for (&a, &r) in sample.actor_logprobs.iter().zip(&sample.reference_logprobs) {
        let log_ratio = a - r;
        let ratio = log_ratio.exp();
        if !ratio.is_finite() || ratio <= 0.0 {
            return Err(Error::value(
                "kl_estimate",
                format!("probability ratio {ratio} out of range"),
            ));
        }
        total += ratio - 1.0 - log_ratio;
    }
    Ok(total / n as f64)
}

/// Scores the generated JD with the reward model and stores both the
/// raw score and the shaped reward `score - kl_coefficient * kl` on the
/// sample. Call [`kl_estimate`] first and store its result in
/// `sample.kl`; a zero coefficient leaves the score untouched.
pub fn shape_reward(
    sample: &mut RolloutSample,
    reward: &RewardModel,
    kl_coefficient: f64,
) -> Result<f64> {
    if !(kl_coefficient >= 0.0) {
        return Err(Error::value(
            "shape_reward",
            format!("kl coefficient {kl_coefficient} must be nonnegative"),
        ));
    }
    sample.score = reward.reward_score(&sample.cv_tokens, &sample.jd_tokens)?;
    sample.reward = sample.score - kl_coefficient * sample.kl;
    Ok(sample.reward)
}

/// Evaluates the critic on the CV once and stores the value and the
/// advantage `reward - value` on the sample. The advantage is a single
/// sequence-level scalar; the actor loss broadcasts it to every
/// generated token.
pub fn compute_advantage(sample: &mut RolloutSample, critic: &CriticModel) -> Result<f64> {
    sample.value = critic.critic_value(&sample.cv_tokens)?;
    sample.advantage = sample.reward - sample.value;
    Ok(sample.advantage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ontology::SEP;
    use crate::models::trunk::TransformerConfig;
    use proptest::prelude::*;

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

    fn toy_generator(vocab: usize, seed: u64) -> GeneratorModel {
        GeneratorModel::new(toy_config(vocab), seed).unwrap()
    }

    fn toy_inputs(n: usize) -> Vec<RolloutInput> {
        (0..n)
            .map(|i| {
                let cv: Vec<usize> = (0..6).map(|t| 3 + (t + i) % 7).collect();
                RolloutInput {
                    prompt_tokens: cv.clone(),
                    cv_tokens: cv,
                }
            })
            .collect()
    }

    fn sampling() -> SamplingConfig {
        SamplingConfig {
            temperature: 0.9,
            top_k: 10,
            max_new_tokens: 8,
            eos_token: 1,
            seed: 0,
        }
    }

    fn bare_sample(jd: Vec<usize>, actor: Vec<f64>, reference: Vec<f64>) -> RolloutSample {
        RolloutSample {
            cv_tokens: vec![3, 4, 5],
            prompt_tokens: vec![3, 4, 5],
            jd_tokens: jd,
            actor_logprobs: actor,
            reference_logprobs: reference,
            score: 0.0,
            kl: 0.0,
            reward: 0.0,
            value: 0.0,
            advantage: 0.0,
        }
    }

    #[test]
    fn actor_equal_to_reference_gives_unit_ratios_and_zero_kl() {
        let actor = toy_generator(11, 5);
        let reference = actor.deep_clone();
        let samples = rollout(&actor, &reference, &toy_inputs(3), &sampling(), 42).unwrap();
        for s in &samples {
            assert_eq!(s.actor_logprobs, s.reference_logprobs);
            assert_eq!(kl_estimate(s).unwrap(), 0.0);
        }
    }

    #[test]
    fn fixed_seed_reproduces_the_rollout() {
        let actor = toy_generator(11, 5);
        let reference = toy_generator(11, 6);
        let a = rollout(&actor, &reference, &toy_inputs(4), &sampling(), 9).unwrap();
        let b = rollout(&actor, &reference, &toy_inputs(4), &sampling(), 9).unwrap();
        assert_eq!(a, b);
        let c = rollout(&actor, &reference, &toy_inputs(4), &sampling(), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn recorded_actor_logprobs_match_rescoring() {
        let actor = toy_generator(11, 5);
        let reference = toy_generator(11, 6);
        let samples = rollout(&actor, &reference, &toy_inputs(4), &sampling(), 3).unwrap();
        for s in &samples {
            let rescored = actor.sequence_logprobs(&s.prompt_tokens, &s.jd_tokens).unwrap();
            assert_eq!(s.actor_logprobs, rescored);
        }
    }

    #[test]
    fn empty_batch_and_vocab_mismatch_are_rejected() {
        let actor = toy_generator(11, 5);
        assert!(rollout(&actor, &actor, &[], &sampling(), 0).is_err());
        let other = toy_generator(13, 5);
        assert!(rollout(&actor, &other, &toy_inputs(1), &sampling(), 0).is_err());
    }

    #[test]
    fn kl_single_token_ratio_two() {
        let ln2 = std::f64::consts::LN_2;
        let s = bare_sample(vec![5], vec![-0.5], vec![-0.5 - ln2]);
        let kl = kl_estimate(&s).unwrap();
        assert!((kl - 0.3068528194400547).abs() < 1e-15, "kl {kl}");
    }

    #[test]
    fn kl_single_token_ratio_half() {
        let ln2 = std::f64::consts::LN_2;
        let s = bare_sample(vec![5], vec![-1.5], vec![-1.5 + ln2]);
        let kl = kl_estimate(&s).unwrap();
        assert!((kl - 0.19314718055994531).abs() < 1e-15, "kl {kl}");
    }

    #[test]
    fn kl_rejects_length_mismatch_and_empty() {
        let s = bare_sample(vec![5, 6], vec![-0.5], vec![-0.5, -0.6]);
        assert!(kl_estimate(&s).is_err());
        let s = bare_sample(vec![], vec![], vec![]);
        assert!(kl_estimate(&s).is_err());
    }

    proptest! {
        #[test]
        fn kl_never_negative(log_ratios in proptest::collection::vec(-5.0f64..5.0, 1..12)) {
            let n = log_ratios.len();
            let actor: Vec<f64> = log_ratios.iter().map(|lr| -1.0 + lr).collect();
            let reference = vec![-1.0; n];
            let s = bare_sample(vec![5; n], actor, reference);
            let kl = kl_estimate(&s).unwrap();
            prop_assert!(kl >= -1e-12, "kl {kl}");
        }
    }

    #[test]
    fn shaping_arithmetic_is_exact() {
        let mut model = RewardModel::new(toy_config(11), 3, SEP).unwrap();
        for name in ["head.w", "head.b"] {
            let i = model.params.index_of(name).unwrap();
            model.params.update(i, |w| w.fill(0.0));
        }
        let i = model.params.index_of("head.b").unwrap();
        model.params.update(i, |b| b[0] = 0.8);

        let mut s = bare_sample(vec![5], vec![-0.5], vec![-0.5]);
        s.kl = 0.2;
        let r = shape_reward(&mut s, &model, 0.5).unwrap();
        assert_eq!(s.score, 0.8);
        assert_eq!(r, 0.8 - 0.5 * 0.2);
        assert_eq!(s.reward, r);

        // A zero coefficient or a zero KL leaves the raw score alone.
        shape_reward(&mut s, &model, 0.0).unwrap();
        assert_eq!(s.reward, s.score);
        s.kl = 0.0;
        shape_reward(&mut s, &model, 7.5).unwrap();
        assert_eq!(s.reward, s.score);

        assert!(shape_reward(&mut s, &model, -0.1).is_err());
        assert!(shape_reward(&mut s, &model, f64::NAN).is_err());
    }

    #[test]
    fn advantage_subtracts_the_critic_value() {
        let mut critic = CriticModel::new(toy_config(11), 3).unwrap();
        for name in ["head.w", "head.b"] {
            let i = critic.params.index_of(name).unwrap();
            critic.params.update(i, |w| w.fill(0.0));
        }
        let i = critic.params.index_of("head.b").unwrap();
        critic.params.update(i, |b| b[0] = 0.2);

        let mut s = bare_sample(vec![5], vec![-0.5], vec![-0.5]);
        s.reward = 0.5;
        let a = compute_advantage(&mut s, &critic).unwrap();
        assert_eq!(s.value, 0.2);
        assert_eq!(a, 0.5 - 0.2);

        // A critic that matches the reward exactly leaves no advantage.
        s.reward = 0.2;
        assert_eq!(compute_advantage(&mut s, &critic).unwrap(), 0.0);
    }
}
