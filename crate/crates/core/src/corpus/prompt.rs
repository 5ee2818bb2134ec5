//! Four-part prompt assembly: role, instruction, input CV, output JD.
//!
//! Training instances carry the target JD in the output segment and a
//! mask that is true exactly there; inference instances leave the output
//! empty. The mask is what keeps the SFT loss off the prompt.

use serde::{Deserialize, Serialize};

use crate::corpus::docs::{CVDoc, JDDoc};
use crate::corpus::ontology::Vocab;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PromptTemplate {
    /// Who the model is, e.g. "you are a recruitment assistant".
    pub role_text: String,
    /// What it should do with the input.
    pub instruction_text: String,
    /// Hard cap on the assembled length including the output segment.
    pub max_len: usize,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            role_text: "you are a recruitment assistant".into(),
            instruction_text: "write a suitable jd for the following candidate".into(),
            max_len: 64,
        }
    }
}

impl PromptTemplate {
    /// All template words, for vocabulary construction.
    pub fn words(&self) -> Vec<&str> {
        self.role_text
            .split_whitespace()
            .chain(self.instruction_text.split_whitespace())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.role_text.trim().is_empty() || self.instruction_text.trim().is_empty() {
            return Err(Error::Config(
                "prompt template needs non-empty role and instruction texts".into(),
            ));
        }
        if self.max_len < 8 {
            return Err(Error::Config(format!(
                "prompt template max_len {} is too small to hold any instance",
                self.max_len
            )));
        }
        Ok(())
    }
}

/// An assembled prompt. `tokens` is the concatenation of the four
/// segments in order; `output_mask` is aligned with `tokens` and true
/// exactly on the output segment.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptInstance {
    pub role: Vec<usize>,
    pub instruction: Vec<usize>,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
    pub tokens: Vec<usize>,
    pub output_mask: Vec<bool>,
}

impl PromptInstance {
    /// Length of the non-output prefix.
    pub fn prompt_len(&self) -> usize {
        self.tokens.len() - self.output.len()
    }

    /// The prompt prefix handed to the sampler at inference time.
    pub fn prompt_tokens(&self) -> &[usize] {
        &self.tokens[..self.prompt_len()]
    }
}

/// Builds a [`PromptInstance`] from a CV and, for training, its target
/// JD. `None` yields an inference instance with an empty output segment
/// and an all-false mask.
pub fn assemble_prompt(
    cv: &CVDoc,
    jd: Option<&JDDoc>,
    template: &PromptTemplate,
    vocab: &Vocab,
) -> Result<PromptInstance> {
    template.validate()?;
    let role = vocab.encode(&template.role_text)?;
    let instruction = vocab.encode(&template.instruction_text)?;
    let input = cv.tokens.clone();
    let output = jd.map(|j| j.tokens.clone()).unwrap_or_default();
    let total = role.len() + instruction.len() + input.len() + output.len();
    if total > template.max_len {
        return Err(Error::value(
            "assemble_prompt",
            format!(
                "assembled length {total} exceeds max {} (role {}, instruction {}, input {}, output {})",
                template.max_len,
                role.len(),
                instruction.len(),
                input.len(),
                output.len()
            ),
        ));
    }
    let mut tokens = Vec::with_capacity(total);
    tokens.extend_from_slice(&role);
    tokens.extend_from_slice(&instruction);
    tokens.extend_from_slice(&input);
    tokens.extend_from_slice(&output);
    let mut output_mask = vec![false; total - output.len()];
    output_mask.extend(std::iter::repeat(true).take(output.len()));
    Ok(PromptInstance {
        role,
        instruction,
        input,
        output,
        tokens,
        output_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::docs::{CorpusSampler, SeekerId};
    use crate::corpus::ontology::SkillOntology;

    fn setup() -> (SkillOntology, Vocab, PromptTemplate) {
        let template = PromptTemplate::default();
        let ontology = SkillOntology::default_world();
        let vocab = Vocab::build(&ontology, &template.words());
        (ontology, vocab, template)
    }

    #[test]
    fn training_instance_masks_exactly_the_output() {
        let (ontology, vocab, template) = setup();
        let sampler = CorpusSampler::new(&ontology, &vocab);
        let cv = sampler.sample_cv(SeekerId(1), 11);
        let jd = sampler.sample_jd_for_cv(&cv, 1, 12).unwrap();
        let inst = assemble_prompt(&cv, Some(&jd), &template, &vocab).unwrap();
        assert_eq!(inst.tokens.len(), inst.output_mask.len());
        let masked: usize = inst.output_mask.iter().filter(|&&m| m).count();
        assert_eq!(masked, jd.tokens.len());
        assert!(inst.output_mask[inst.prompt_len()..].iter().all(|&m| m));
        assert!(inst.output_mask[..inst.prompt_len()].iter().all(|&m| !m));
    }

    #[test]
    fn inference_instance_has_empty_output_and_allfalse_mask() {
        let (ontology, vocab, template) = setup();
        let sampler = CorpusSampler::new(&ontology, &vocab);
        let cv = sampler.sample_cv(SeekerId(2), 21);
        let inst = assemble_prompt(&cv, None, &template, &vocab).unwrap();
        assert!(inst.output.is_empty());
        assert!(inst.output_mask.iter().all(|&m| !m));
        assert_eq!(inst.prompt_tokens(), inst.tokens.as_slice());
    }

    #[test]
    fn segments_detokenize_back_to_their_sources() {
        let (ontology, vocab, template) = setup();
        let sampler = CorpusSampler::new(&ontology, &vocab);
        let cv = sampler.sample_cv(SeekerId(3), 31);
        let jd = sampler.sample_jd_for_cv(&cv, 1, 32).unwrap();
        let inst = assemble_prompt(&cv, Some(&jd), &template, &vocab).unwrap();
        assert_eq!(vocab.decode(&inst.role).unwrap(), template.role_text);
        assert_eq!(
            vocab.decode(&inst.instruction).unwrap(),
            template.instruction_text
        );
        assert_eq!(vocab.decode(&inst.input).unwrap(), cv.text);
        // The JD's trailing eos decodes to its marker word.
        assert_eq!(
            vocab.decode(&inst.output).unwrap(),
            format!("{} <eos>", jd.text)
        );
        // And the concatenation is the four parts in order.
        let rebuilt: Vec<usize> = inst
            .role
            .iter()
            .chain(&inst.instruction)
            .chain(&inst.input)
            .chain(&inst.output)
            .copied()
            .collect();
        assert_eq!(rebuilt, inst.tokens);
    }

    #[test]
    fn overlong_assembly_is_rejected_with_lengths() {
        let (ontology, vocab, mut template) = setup();
        template.max_len = 10;
        let sampler = CorpusSampler::new(&ontology, &vocab);
        let cv = sampler.sample_cv(SeekerId(4), 41);
        let err = assemble_prompt(&cv, None, &template, &vocab).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("exceeds max 10"), "{msg}");
        assert!(msg.contains("role 5"), "{msg}");
    }

    #[test]
    fn empty_template_is_rejected() {
        let (ontology, vocab, mut template) = setup();
        template.role_text = "  ".into();
        let sampler = CorpusSampler::new(&ontology, &vocab);
        let cv = sampler.sample_cv(SeekerId(5), 51);
        assert!(assemble_prompt(&cv, None, &template, &vocab).is_err());
    }
}
