//! The four networks of the pipeline and their shared trunk.
//!
//! * [`GeneratorModel`]: causal language model writing JDs from CV
//!   prompts; also serves as the policy during alignment.
//! * [`RewardModel`]: scalar match score over a CV/JD pair.
//! * [`CriticModel`]: scalar value estimate over a CV.
//! * [`TextEncoder`]: mean-pooled document embeddings for the
//!   recommender.
//!
//! All of them build their forward pass on the gradient tape, so one
//! code path covers inference (parameters registered as constants) and
//! training (parameters tracked).

pub mod encoder;
pub mod generator;
pub mod persist;
pub mod sampling;
pub mod scorer;
pub mod trunk;

pub use encoder::{pooled_encode_graph, TextEncoder};
pub use generator::GeneratorModel;
pub use persist::ModelRole;
pub use sampling::{generate, GeneratedSequence, SamplingConfig};
pub use scorer::{CriticModel, RewardModel};
pub use trunk::{Bound, TransformerConfig};
