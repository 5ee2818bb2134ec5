//! Desk-scale generative job recommendation pipeline.
//!
//! Everything needed to reproduce the three training stages and the
//! downstream recommender on a laptop, end to end and bit-reproducibly:
//!
//! * [`tensor`]: `f64` tensors, tape-based reverse autodiff, optimizers,
//!   finite-difference checking and binary checkpoints,
//! * [`corpus`]: a synthetic CV/job-description world with a known
//!   ground-truth matching rule, token vocabulary and dataset files,
//! * [`models`]: a small causal transformer generator, scalar-scoring
//!   transformers for reward and value, and a mean-pooling text encoder,
//! * [`alignment`]: supervised fine-tuning of the generator and pairwise
//!   reward-model training,
//! * [`ppo`]: clipped-surrogate policy optimization of the generator
//!   against the learned reward with a KL penalty to the frozen reference,
//! * [`recsys`]: a two-tower CV/JD recommender, optionally enhanced with
//!   embeddings of generated job descriptions,
//! * [`evaluation`]: ranking metrics, a deterministic rubric judge and
//!   position-debiased pairwise tournaments,
//! * [`config`]: one TOML file describing a full run, hashing to a
//!   checksum that every metrics record embeds,
//! * [`metrics_log`]: append-only, byte-reproducible JSONL metric logs,
//! * [`pipeline`]: stage orchestration over a single output directory,
//!   from corpus synthesis through training to the evaluation reports.

pub mod alignment;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod metrics_log;
pub mod models;
pub mod pipeline;
pub mod ppo;
pub mod recsys;
pub mod tensor;
pub mod training;
mod util;

pub use config::{GenerationSettings, ModelShape, RecSettings, RunConfig, Stage, StageSeeds};
pub use error::{Error, Result};
pub use metrics_log::{read_metrics, MetricsLog, MetricsRecord};
pub use pipeline::{
    ColdStartEvalReport, GenRecord, GenSweepReport, GeneratorSource, Pipeline, QualityReport,
    RecEvalReport,
};
pub use tensor::{GradTape, NodeId, OpKind, ParamSet, Tensor};
