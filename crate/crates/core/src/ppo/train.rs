//! The full alignment loop: collect rollouts from the live actor,
//! shape rewards with the reward model and a KL penalty against the
//! frozen reference, then run clipped-surrogate updates on the actor
//! and a value regression on the critic.

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::generator::GeneratorModel;
use crate::models::sampling::SamplingConfig;
use crate::models::scorer::{CriticModel, RewardModel};
use crate::ppo::losses::{anchor_logprobs, clipped_objective, OldPolicy};
use crate::ppo::rollout::{compute_advantage, kl_estimate, rollout, shape_reward, RolloutInput};
use crate::tensor::{OptimizerKind, OptimizerState, Tensor};
use crate::training::{batch_loss_and_grads, check_finite_loss, shuffled_indices};
use crate::util::{derive_seed, derive_seed_indexed};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PPOConfig {
    /// Weight of the KL penalty inside the shaped reward.
    pub kl_coefficient: f64,
    /// Half-width of the ratio clip band around one.
    pub clip: f64,
    pub iterations: usize,
    /// Passes over each rollout batch before fresh rollouts.
    pub inner_epochs: usize,
    pub minibatch_size: usize,
    /// CVs rolled out per iteration.
    pub rollout_batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub sampling: SamplingConfig,
    /// Anchor policy for the importance ratio.
    pub old_policy: OldPolicy,
    /// Normalize advantages to zero mean and unit variance per rollout
    /// batch before the actor update.
    pub normalize_advantages: bool,
    pub seed: u64,
}

impl Default for PPOConfig {
    fn default() -> Self {
        PPOConfig {
            kl_coefficient: 0.1,
            clip: 0.2,
            iterations: 30,
            inner_epochs: 2,
            minibatch_size: 8,
            rollout_batch_size: 16,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            sampling: SamplingConfig::default(),
            old_policy: OldPolicy::FrozenReference,
            normalize_advantages: true,
            seed: 0,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kl_coefficient >= 0.0) {
            return Err(Error::Config(format!(
                "kl coefficient {} must be nonnegative",
                self.kl_coefficient
            )));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::Config(format!(
                "clip parameter {} must lie strictly between 0 and 1",
                self.clip
            )));
        }
        if self.inner_epochs == 0 || self.minibatch_size == 0 || self.rollout_batch_size == 0 {
            return Err(Error::Config(
                "inner_epochs, minibatch_size and rollout_batch_size must be positive".into(),
            ));
        }
        if !(self.actor_lr > 0.0) || !(self.critic_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        self.sampling.validate()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PpoIterationStats {
    pub iteration: usize,
    /// Mean raw reward-model score over the iteration's rollouts.
    pub mean_score: f64,
    /// Mean per-sequence KL estimate against the frozen reference.
    pub mean_kl: f64,
    pub mean_actor_loss: f64,
    pub mean_critic_loss: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct PpoReport {
    pub iterations: Vec<PpoIterationStats>,
}

impl PpoReport {
    pub fn final_mean_kl(&self) -> Option<f64> {
        self.iterations.last().map(|i| i.mean_kl)
    }
}

/// Aligns the actor against the reward model. The reference generator
/// and the reward model are read-only throughout; the critic trains
/// alongside the actor. A non-finite loss aborts before the offending
/// update, so the models keep their last healthy parameters.
pub fn ppo_train(
    actor: &mut GeneratorModel,
    critic: &mut CriticModel,
    reference: &GeneratorModel,
    reward: &RewardModel,
    inputs: &[RolloutInput],
    cfg: &PPOConfig,
) -> Result<PpoReport> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::value("ppo_train", "empty CV set"));
    }
    let mut actor_opt = OptimizerState::new(OptimizerKind::adam(), cfg.actor_lr);
    let mut critic_opt = OptimizerState::new(OptimizerKind::adam(), cfg.critic_lr);
    let pick_seed = derive_seed(cfg.seed, "ppo-pick");
    let rollout_seed = derive_seed(cfg.seed, "ppo-rollout");
    let shuffle_seed = derive_seed(cfg.seed, "ppo-shuffle");
    let mut report = PpoReport::default();
    let mut step = 0u64;

    for iteration in 0..cfg.iterations {
        let order = shuffled_indices(inputs.len(), derive_seed_indexed(pick_seed, iteration as u64));
        let batch: Vec<RolloutInput> = order
            .iter()
            .take(cfg.rollout_batch_size.min(inputs.len()))
            .map(|&i| inputs[i].clone())
            .collect();
        let mut samples = rollout(
            actor,
            reference,
            &batch,
            &cfg.sampling,
            derive_seed_indexed(rollout_seed, iteration as u64),
        )?;
        samples.par_iter_mut().try_for_each(|s| -> Result<()> {
            s.kl = kl_estimate(s)?;
            shape_reward(s, reward, cfg.kl_coefficient)?;
            compute_advantage(s, critic)?;
            Ok(())
        })?;

        let n = samples.len() as f64;
        let mean_score = samples.iter().map(|s| s.score).sum::<f64>() / n;
        let mean_kl = samples.iter().map(|s| s.kl).sum::<f64>() / n;
        if cfg.normalize_advantages {
            let mean = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
            let var = samples.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            for s in samples.iter_mut() {
                s.advantage = (s.advantage - mean) / (std + 1e-8);
            }
        }

        let mut actor_loss_sum = 0.0;
        let mut critic_loss_sum = 0.0;
        let mut minibatches = 0usize;
        for epoch in 0..cfg.inner_epochs {
            let mix = derive_seed_indexed(shuffle_seed, (iteration * cfg.inner_epochs + epoch) as u64);
            let order = shuffled_indices(samples.len(), mix);
            for chunk in order.chunks(cfg.minibatch_size) {
                let minibatch: Vec<_> = chunk.iter().map(|&i| &samples[i]).collect();

                let out = batch_loss_and_grads(&actor.params, &minibatch, |tape, bound, s| {
                    let current =
                        actor.logprob_graph(tape, bound, &s.prompt_tokens, &s.jd_tokens, None)?;
                    let anchor = tape
                        .constant(Tensor::from_vec(anchor_logprobs(s, cfg.old_policy).to_vec())?);
                    let objective =
                        clipped_objective(tape, current, anchor, s.advantage, cfg.clip)?;
                    tape.scale(objective, -1.0)
                })?;
                check_finite_loss("ppo-actor", step, out.mean_loss)?;
                actor_opt
                    .step(&mut actor.params, &out.grads)
                    .map_err(|e| Error::Diverged {
                        stage: "ppo-actor".into(),
                        step,
                        detail: e.to_string(),
                    })?;
                actor_loss_sum += out.mean_loss;

                let out = batch_loss_and_grads(&critic.params, &minibatch, |tape, bound, s| {
                    let value = critic.value_graph(tape, bound, &s.cv_tokens, None)?;
                    let target = tape.constant(Tensor::matrix(1, 1, vec![s.reward])?);
                    let diff = tape.sub(target, value)?;
                    tape.mul(diff, diff)
                })?;
                check_finite_loss("ppo-critic", step, out.mean_loss)?;
                critic_opt
                    .step(&mut critic.params, &out.grads)
                    .map_err(|e| Error::Diverged {
                        stage: "ppo-critic".into(),
                        step,
                        detail: e.to_string(),
                    })?;
                critic_loss_sum += out.mean_loss;

                minibatches += 1;
                step += 1;
            }
        }

        report.iterations.push(PpoIterationStats {
            iteration,
            mean_score,
            mean_kl,
            mean_actor_loss: actor_loss_sum / minibatches as f64,
            mean_critic_loss: critic_loss_sum / minibatches as f64,
        });
    }
    Ok(report)
}
