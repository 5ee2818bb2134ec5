//! One TOML file describing a full run: corpus sizes, network shapes,
//! per-stage hyperparameters and the global seed.
//!
//! Network shapes deliberately omit the vocabulary size; it is derived
//! from the ontology plus the prompt template at build time, so a
//! hand-edited config cannot disagree with the tokenizer. Every stage
//! draws its seed from the global one through a stage label, with an
//! optional explicit override per stage, and the whole config hashes to
//! a checksum that metrics logs embed so any number can be traced back
//! to the exact configuration that produced it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{RmtConfig, SftConfig};
use crate::corpus::datasets::CorpusConfig;
use crate::corpus::prompt::PromptTemplate;
use crate::error::{Error, Result};
use crate::evaluation::RubricConfig;
use crate::models::{SamplingConfig, TransformerConfig};
use crate::ppo::PPOConfig;
use crate::recsys::{PredictorKind, RecModelConfig, RecTrainConfig};
use crate::util::derive_seed;

/// A transformer shape without its vocabulary size.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelShape {
    pub width: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_width: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl ModelShape {
    pub fn generator_default() -> ModelShape {
        ModelShape {
            width: 64,
            n_layers: 2,
            n_heads: 4,
            ff_width: 128,
            max_seq_len: 64,
            dropout: 0.0,
        }
    }

    pub fn scorer_default() -> ModelShape {
        ModelShape {
            width: 32,
            n_layers: 2,
            n_heads: 4,
            ff_width: 64,
            max_seq_len: 64,
            dropout: 0.0,
        }
    }

    /// Completes the shape into a buildable config.
    pub fn with_vocab(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            vocab_size,
            max_seq_len: self.max_seq_len,
            width: self.width,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ff_width: self.ff_width,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // Any positive vocabulary exercises the shape checks.
        self.with_vocab(8).validate()
    }
}

/// Recommender architecture choices; the encoder shape completes
/// against the vocabulary like the other networks.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RecSettings {
    pub encoder: ModelShape,
    pub predictor: PredictorKind,
    pub twin_encoders: bool,
    pub hidden_width: usize,
}

impl Default for RecSettings {
    fn default() -> Self {
        RecSettings {
            encoder: ModelShape::scorer_default(),
            predictor: PredictorKind::Dot,
            twin_encoders: false,
            hidden_width: 64,
        }
    }
}

impl RecSettings {
    pub fn model_config(&self, vocab_size: usize, enhanced: bool) -> RecModelConfig {
        let mut cfg = RecModelConfig::default_for(vocab_size);
        cfg.encoder = self.encoder.with_vocab(vocab_size);
        cfg.predictor = self.predictor;
        cfg.twin_encoders = self.twin_encoders;
        cfg.hidden_width = self.hidden_width;
        cfg.enhanced = enhanced;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(8, false).validate()?;
        self.model_config(8, true).validate()
    }
}

/// How many JDs to draw per CV when filling the generation cache and
/// how many of them the enhanced recommender consumes.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GenerationSettings {
    /// Cache size per CV; sweeps reuse prefixes of this cache.
    pub per_cv: usize,
    /// Generations fused into the enhanced recommender input.
    pub enhance_with: usize,
    pub sampling: SamplingConfig,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        GenerationSettings {
            per_cv: 8,
            enhance_with: 2,
            sampling: SamplingConfig::default(),
        }
    }
}

impl GenerationSettings {
    pub fn validate(&self) -> Result<()> {
        if self.per_cv == 0 {
            return Err(Error::Config("generation.per_cv must be positive".into()));
        }
        if self.enhance_with == 0 || self.enhance_with > self.per_cv {
            return Err(Error::Config(format!(
                "generation.enhance_with must lie in 1..={}, got {}",
                self.per_cv, self.enhance_with
            )));
        }
        self.sampling.validate()
    }
}

/// Pipeline stages, in execution order. The label doubles as the seed
/// derivation tag and the artifact prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Corpus,
    Sft,
    Rmt,
    Ppo,
    Rec,
    Eval,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::Corpus => "corpus",
            Stage::Sft => "sft",
            Stage::Rmt => "rmt",
            Stage::Ppo => "ppo",
            Stage::Rec => "rec",
            Stage::Eval => "eval",
        }
    }
}

/// Optional per-stage seed overrides; unset stages derive from the
/// global seed.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct StageSeeds {
    pub corpus: Option<u64>,
    pub sft: Option<u64>,
    pub rmt: Option<u64>,
    pub ppo: Option<u64>,
    pub rec: Option<u64>,
    pub eval: Option<u64>,
}

impl StageSeeds {
    fn get(&self, stage: Stage) -> Option<u64> {
        match stage {
            Stage::Corpus => self.corpus,
            Stage::Sft => self.sft,
            Stage::Rmt => self.rmt,
            Stage::Ppo => self.ppo,
            Stage::Rec => self.rec,
            Stage::Eval => self.eval,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    /// Global seed; every stage derives its own from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub seeds: StageSeeds,
    pub corpus: CorpusConfig,
    pub prompt: PromptTemplate,
    /// Shape of the JD generator (and its actor/reference copies).
    pub generator: ModelShape,
    /// Shape of the reward model.
    pub reward: ModelShape,
    /// Shape of the critic.
    pub critic: ModelShape,
    pub sft: SftConfig,
    pub rmt: RmtConfig,
    pub ppo: PPOConfig,
    /// Mean per-sequence KL to the reference that the aligned actor
    /// must stay below for the run to count as healthy.
    pub ppo_kl_ceiling: f64,
    pub rec_model: RecSettings,
    pub rec_train: RecTrainConfig,
    pub rubric: RubricConfig,
    pub generation: GenerationSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            seeds: StageSeeds::default(),
            corpus: CorpusConfig::default(),
            prompt: PromptTemplate::default(),
            generator: ModelShape::generator_default(),
            reward: ModelShape::scorer_default(),
            critic: ModelShape::scorer_default(),
            sft: SftConfig::default(),
            rmt: RmtConfig::default(),
            ppo: PPOConfig::default(),
            ppo_kl_ceiling: 1.0,
            rec_model: RecSettings::default(),
            rec_train: RecTrainConfig::default(),
            rubric: RubricConfig::default(),
            generation: GenerationSettings::default(),
        }
    }
}

impl RunConfig {
    /// The effective seed for a stage: the explicit override when set,
    /// otherwise derived from the global seed and the stage label.
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        self.seeds
            .get(stage)
            .unwrap_or_else(|| derive_seed(self.seed, stage.label()))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.prompt.validate()?;
        self.generator.validate()?;
        self.reward.validate()?;
        self.critic.validate()?;
        self.sft.validate()?;
        self.rmt.validate()?;
        self.ppo.validate()?;
        if !self.ppo_kl_ceiling.is_finite() || self.ppo_kl_ceiling <= 0.0 {
            return Err(Error::Config(format!(
                "ppo_kl_ceiling must be positive and finite, got {}",
                self.ppo_kl_ceiling
            )));
        }
        self.rec_model.validate()?;
        self.rec_train.validate()?;
        self.rubric.validate()?;
        self.generation.validate()?;
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::Config("out_dir must not be empty".into()));
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config serialization: {e}")))
    }

    /// Checksum of the canonical serialization, so the same effective
    /// configuration hashes identically whether it came from a file,
    /// from defaults, or from command-line overrides.
    pub fn checksum(&self) -> Result<String> {
        let text = self.to_toml_string()?;
        let digest = Sha256::digest(text.as_bytes());
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::MissingPrerequisite {
            path: path.to_path_buf(),
            hint: format!("config file not readable ({e})"),
        })?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_is_lossless() {
        let mut config = RunConfig::default();
        config.seed = 7;
        config.seeds.ppo = Some(99);
        config.rec_model.twin_encoders = true;
        config.generation.enhance_with = 4;
        let text = config.to_toml_string().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn file_round_trip_preserves_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let mut config = RunConfig::default();
        config.seed = 1234;
        config.save(&path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back, config);
        assert_eq!(back.checksum().unwrap(), config.checksum().unwrap());
    }

    #[test]
    fn a_partial_file_fills_in_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partial.toml");
        fs::write(&path, "seed = 5\n[corpus]\nsft_examples = 50\n").unwrap();
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config.seed, 5);
        assert_eq!(config.corpus.sft_examples, 50);
        assert_eq!(config.corpus.rmt_triples, CorpusConfig::default().rmt_triples);
        assert_eq!(config.generator, ModelShape::generator_default());
    }

    #[test]
    fn stage_seeds_derive_from_the_global_seed_with_overrides() {
        let mut config = RunConfig::default();
        config.seed = 42;
        let sft = config.stage_seed(Stage::Sft);
        let rmt = config.stage_seed(Stage::Rmt);
        assert_ne!(sft, rmt);
        assert_eq!(sft, config.stage_seed(Stage::Sft));
        config.seeds.sft = Some(7);
        assert_eq!(config.stage_seed(Stage::Sft), 7);
        assert_eq!(config.stage_seed(Stage::Rmt), rmt);
        // A different global seed moves every non-overridden stage.
        let mut other = config.clone();
        other.seed = 43;
        assert_ne!(other.stage_seed(Stage::Rmt), rmt);
        assert_eq!(other.stage_seed(Stage::Sft), 7);
    }

    #[test]
    fn checksums_separate_different_configs() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.seed = 1;
        assert_ne!(a.checksum().unwrap(), b.checksum().unwrap());
        assert_eq!(a.checksum().unwrap(), RunConfig::default().checksum().unwrap());
    }

    #[test]
    fn invalid_nested_configs_are_rejected() {
        let mut bad_shape = RunConfig::default();
        bad_shape.generator.n_heads = 3;
        assert!(bad_shape.validate().is_err());

        let mut bad_gen = RunConfig::default();
        bad_gen.generation.enhance_with = 100;
        assert!(bad_gen.validate().is_err());

        let mut bad_ceiling = RunConfig::default();
        bad_ceiling.ppo_kl_ceiling = 0.0;
        assert!(bad_ceiling.validate().is_err());

        let mut bad_corpus = RunConfig::default();
        bad_corpus.corpus.tau = 0.0;
        assert!(bad_corpus.validate().is_err());
    }

    #[test]
    fn malformed_toml_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        fs::write(&path, "seed = \"not a number\"").unwrap();
        match RunConfig::load(&path).unwrap_err() {
            Error::Config(msg) => assert!(msg.contains("bad.toml"), "{msg}"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn a_missing_config_file_names_itself() {
        match RunConfig::load(Path::new("/nonexistent/run.toml")).unwrap_err() {
            Error::MissingPrerequisite { path, .. } => {
                assert!(path.ends_with("run.toml"));
            }
            other => panic!("unexpected error {other}"),
        }
    }
}
