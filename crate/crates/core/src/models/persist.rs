//! Role-tagged checkpoint plumbing shared by every model type.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::trunk::TransformerConfig;
use crate::tensor::{read_checkpoint, write_checkpoint, Checkpoint, ParamSet, Tensor};

/// Which network a checkpoint file holds. One file per model, the role
/// is stored in the header and verified on load.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelRole {
    Generator,
    Actor,
    Reward,
    Critic,
    Encoder,
    Recommender,
}

impl ModelRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelRole::Generator => "generator",
            ModelRole::Actor => "actor",
            ModelRole::Reward => "reward",
            ModelRole::Critic => "critic",
            ModelRole::Encoder => "encoder",
            ModelRole::Recommender => "recommender",
        }
    }

    pub fn parse(s: &str) -> Result<ModelRole> {
        Ok(match s {
            "generator" => ModelRole::Generator,
            "actor" => ModelRole::Actor,
            "reward" => ModelRole::Reward,
            "critic" => ModelRole::Critic,
            "encoder" => ModelRole::Encoder,
            "recommender" => ModelRole::Recommender,
            other => {
                return Err(Error::Checkpoint(format!("unknown model role {other:?}")));
            }
        })
    }
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn save_checkpoint(
    path: &Path,
    role: ModelRole,
    config: &TransformerConfig,
    extra: BTreeMap<String, String>,
    params: &ParamSet,
) -> Result<()> {
    let mut ck = Checkpoint::new(role.as_str(), serde_json::to_value(config)?);
    ck.extra = extra;
    ck.tensors = params
        .iter()
        .map(|(name, t)| (name.to_string(), t.clone()))
        .collect();
    write_checkpoint(path, &ck)
}

/// Reads a checkpoint, insisting its role equals `expected` and that
/// `expected` is one of the roles this model type can hold.
pub fn load_checkpoint_for(
    path: &Path,
    allowed: &[ModelRole],
    expected: ModelRole,
) -> Result<(TransformerConfig, BTreeMap<String, String>, Vec<(String, Tensor)>)> {
    if !allowed.contains(&expected) {
        return Err(Error::Checkpoint(format!(
            "this model type cannot hold role {expected}"
        )));
    }
    let ck = read_checkpoint(path)?;
    let role = ModelRole::parse(&ck.role)?;
    if role != expected {
        return Err(Error::Checkpoint(format!(
            "{} holds role {role}, expected {expected}",
            path.display()
        )));
    }
    let config: TransformerConfig = serde_json::from_value(ck.hyperparams)?;
    config.validate()?;
    Ok((config, ck.extra, ck.tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roles_round_trip_through_strings() {
        for role in [
            ModelRole::Generator,
            ModelRole::Actor,
            ModelRole::Reward,
            ModelRole::Critic,
            ModelRole::Encoder,
            ModelRole::Recommender,
        ] {
            assert_eq!(ModelRole::parse(role.as_str()).unwrap(), role);
        }
        assert!(ModelRole::parse("referee").is_err());
    }
}
