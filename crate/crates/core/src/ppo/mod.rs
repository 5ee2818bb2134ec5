//! Training stage three: policy alignment against the trained reward
//! model with a clipped-ratio surrogate and a KL-shaped reward.
//!
//! Each iteration samples JDs from the live actor, scores them with
//! the frozen reward model, subtracts a KL penalty toward the frozen
//! reference generator, and applies minibatch updates to the actor and
//! the critic. The reference doubles as the ratio anchor by default;
//! a per-iteration snapshot anchor is available as an option.

pub mod losses;
pub mod rollout;
pub mod train;

pub use losses::{actor_loss, clipped_objective, critic_loss, OldPolicy};
pub use rollout::{
    compute_advantage, kl_estimate, rollout, shape_reward, RolloutInput, RolloutSample,
};
pub use train::{ppo_train, PPOConfig, PpoIterationStats, PpoReport};
