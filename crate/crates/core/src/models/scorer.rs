//! Scalar-output scorers: the reward model over (CV, JD) pairs and the
//! critic over CVs alone.
//!
//! Both are the causal trunk with a one-unit linear head read at the
//! final position. The reward model joins its two inputs with the
//! separator token; the critic consumes the CV directly. Trailing
//! padding is stripped before scoring so padded and unpadded inputs
//! produce bit-identical scalars.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::corpus::ontology::PAD;
use crate::error::{Error, Result};
use crate::models::persist::{load_checkpoint_for, save_checkpoint, ModelRole};
use crate::models::trunk::{
    head_forward, init_head_params, init_rng, init_trunk_params, trunk_forward, Bound,
    TransformerConfig,
};
use crate::tensor::{GradTape, NodeId, ParamSet};

fn strip_trailing_pad(tokens: &[usize]) -> &[usize] {
    let mut end = tokens.len();
    while end > 0 && tokens[end - 1] == PAD {
        end -= 1;
    }
    &tokens[..end]
}

/// Builds trunk + head and reads the scalar at the last position.
fn scalar_graph(
    tape: &mut GradTape,
    bound: &Bound,
    config: &TransformerConfig,
    tokens: &[usize],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let hidden = trunk_forward(tape, bound, config, tokens, true, dropout_rng)?;
    let last = tape.row_gather(hidden, vec![tokens.len() - 1])?;
    head_forward(tape, bound, last, "head")
}

fn new_scorer_params(config: &TransformerConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = init_rng(seed);
    let mut params = ParamSet::new();
    init_trunk_params(&mut params, config, &mut rng);
    init_head_params(&mut params, config, &mut rng, "head", 1);
    Ok(params)
}

#[derive(Debug)]
pub struct RewardModel {
    pub config: TransformerConfig,
    pub params: ParamSet,
    pub sep_token: usize,
}

impl RewardModel {
    pub fn new(config: TransformerConfig, seed: u64, sep_token: usize) -> Result<RewardModel> {
        if sep_token >= config.vocab_size {
            return Err(Error::Config(format!(
                "separator token {sep_token} outside vocab of {}",
                config.vocab_size
            )));
        }
        Ok(RewardModel {
            params: new_scorer_params(&config, seed)?,
            config,
            sep_token,
        })
    }

    /// CV, separator, JD as one sequence, trailing padding removed.
    pub fn joined_input(&self, cv: &[usize], jd: &[usize]) -> Result<Vec<usize>> {
        let cv = strip_trailing_pad(cv);
        let jd = strip_trailing_pad(jd);
        if cv.is_empty() || jd.is_empty() {
            return Err(Error::value("reward_score", "cv and jd must be nonempty"));
        }
        let joined: Vec<usize> = cv
            .iter()
            .chain(std::iter::once(&self.sep_token))
            .chain(jd.iter())
            .copied()
            .collect();
        if joined.len() > self.config.max_seq_len {
            return Err(Error::value(
                "reward_score",
                format!(
                    "cv of {} plus jd of {} exceeds max sequence length {}",
                    cv.len(),
                    jd.len(),
                    self.config.max_seq_len
                ),
            ));
        }
        Ok(joined)
    }

    /// Scalar score node for a pair, for training graphs.
    pub fn score_graph(
        &self,
        tape: &mut GradTape,
        bound: &Bound,
        cv: &[usize],
        jd: &[usize],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let joined = self.joined_input(cv, jd)?;
        scalar_graph(tape, bound, &self.config, &joined, dropout_rng)
    }

    /// Deterministic matching score for one pair.
    pub fn reward_score(&self, cv: &[usize], jd: &[usize]) -> Result<f64> {
        let mut tape = GradTape::new();
        let bound = Bound::new(&self.params, &mut tape, false);
        let node = self.score_graph(&mut tape, &bound, cv, jd, None)?;
        let value = tape.value(node).item()?;
        if !value.is_finite() {
            return Err(Error::value("reward_score", format!("non-finite score {value}")));
        }
        Ok(value)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let extra = [("sep_token".to_string(), self.sep_token.to_string())];
        save_checkpoint(
            path,
            ModelRole::Reward,
            &self.config,
            extra.into_iter().collect(),
            &self.params,
        )
    }

    pub fn load(path: &Path) -> Result<RewardModel> {
        let (config, extra, tensors) =
            load_checkpoint_for(path, &[ModelRole::Reward], ModelRole::Reward)?;
        let sep_token = extra
            .get("sep_token")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("reward checkpoint lacks sep_token".into()))?;
        let mut model = RewardModel::new(config, 0, sep_token)?;
        model.params.import_tensors(&tensors)?;
        Ok(model)
    }
}

#[derive(Debug)]
pub struct CriticModel {
    pub config: TransformerConfig,
    pub params: ParamSet,
}

impl CriticModel {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<CriticModel> {
        Ok(CriticModel {
            params: new_scorer_params(&config, seed)?,
            config,
        })
    }

    /// Critic initialized from a trained reward model: same
    /// architecture, weights copied, then optimized separately.
    pub fn from_reward(reward: &RewardModel) -> CriticModel {
        CriticModel {
            config: reward.config.clone(),
            params: reward.params.deep_clone(),
        }
    }

    pub fn value_graph(
        &self,
        tape: &mut GradTape,
        bound: &Bound,
        cv: &[usize],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let cv = strip_trailing_pad(cv);
        if cv.is_empty() {
            return Err(Error::value("critic_value", "cv is empty"));
        }
        scalar_graph(tape, bound, &self.config, cv, dropout_rng)
    }

    /// Deterministic value estimate for one CV.
    pub fn critic_value(&self, cv: &[usize]) -> Result<f64> {
        let mut tape = GradTape::new();
        let bound = Bound::new(&self.params, &mut tape, false);
        let node = self.value_graph(&mut tape, &bound, cv, None)?;
        let value = tape.value(node).item()?;
        if !value.is_finite() {
            return Err(Error::value("critic_value", format!("non-finite value {value}")));
        }
        Ok(value)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(
            path,
            ModelRole::Critic,
            &self.config,
            Default::default(),
            &self.params,
        )
    }

    pub fn load(path: &Path) -> Result<CriticModel> {
        let (config, _, tensors) =
            load_checkpoint_for(path, &[ModelRole::Critic], ModelRole::Critic)?;
        let mut model = CriticModel::new(config, 0)?;
        model.params.import_tensors(&tensors)?;
        Ok(model)
    }
}
