//! Deterministic rubric for comparing two generated JDs for one CV.
//!
//! Each JD gets three sub-scores in [0, 1]:
//!
//! * detail: fraction of the mandatory sections present (a
//!   requirements marker, a responsibilities marker, a salary-band
//!   token),
//! * relevance: fraction of the CV's skills that appear inside the
//!   JD's requirements section,
//! * conciseness: a length-band factor times the unique-token ratio,
//!   so both rambling and stuttering output lose credit.
//!
//! The verdict compares weighted sums with a tie threshold. Everything
//! is a pure function of tokens, so the whole evaluation suite is
//! hermetic; the [`Judge`] trait lets a live external judge be wired in
//! with the same verdict contract, and [`live_judge_prompt`] renders
//! the instruction text such a judge would receive.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::docs::CVDoc;
use crate::corpus::ontology::{SkillOntology, Vocab, EOS, PAD, SALARY_BANDS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Win,
    Tie,
    Lose,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubScores {
    pub detail: f64,
    pub relevance: f64,
    pub conciseness: f64,
}

impl SubScores {
    /// Weighted mean under the rubric's criterion weights.
    pub fn weighted(&self, config: &RubricConfig) -> f64 {
        let total = config.detail_weight + config.relevance_weight + config.conciseness_weight;
        (self.detail * config.detail_weight
            + self.relevance * config.relevance_weight
            + self.conciseness * config.conciseness_weight)
            / total
    }
}

/// Outcome of one ordered comparison: `verdict` is from the first
/// JD's perspective and `margin` is its weighted score minus the
/// second's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub verdict: VerdictKind,
    pub first: SubScores,
    pub second: SubScores,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RubricConfig {
    pub detail_weight: f64,
    pub relevance_weight: f64,
    pub conciseness_weight: f64,
    /// Weighted-sum margin at or below which the comparison is a tie.
    pub tie_threshold: f64,
    /// Token-count band granted full conciseness credit.
    pub min_length: usize,
    pub max_length: usize,
}

impl Default for RubricConfig {
    fn default() -> Self {
        RubricConfig {
            detail_weight: 1.0 / 3.0,
            relevance_weight: 1.0 / 3.0,
            conciseness_weight: 1.0 / 3.0,
            tie_threshold: 0.05,
            min_length: 8,
            max_length: 24,
        }
    }
}

impl RubricConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.detail_weight,
            self.relevance_weight,
            self.conciseness_weight,
        ];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("rubric weights must be finite and nonnegative".into()));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("rubric weights must not all be zero".into()));
        }
        if !(0.0..1.0).contains(&self.tie_threshold) {
            return Err(Error::Config("rubric tie_threshold outside [0, 1)".into()));
        }
        if self.min_length == 0 || self.min_length > self.max_length {
            return Err(Error::Config(
                "rubric length band needs 1 <= min_length <= max_length".into(),
            ));
        }
        Ok(())
    }
}

/// Comparison interface shared by the built-in rubric and any external
/// judge an integrator wires in.
pub trait Judge: Sync {
    fn judge(&self, cv: &CVDoc, jd_first: &[usize], jd_second: &[usize]) -> Result<JudgeVerdict>;
}

/// The built-in deterministic judge, with token ids resolved once at
/// construction.
pub struct RubricJudge {
    config: RubricConfig,
    requirements_id: usize,
    responsibilities_id: usize,
    /// Tokens that end the requirements section.
    section_stops: BTreeSet<usize>,
    salary_band_ids: BTreeSet<usize>,
    skill_ids: BTreeMap<String, usize>,
}

impl RubricJudge {
    pub fn new(ontology: &SkillOntology, vocab: &Vocab, config: RubricConfig) -> Result<RubricJudge> {
        config.validate()?;
        let requirements_id = vocab.id("requirements")?;
        let responsibilities_id = vocab.id("responsibilities")?;
        let section_stops = BTreeSet::from([
            vocab.id("experience")?,
            vocab.id("salary")?,
            responsibilities_id,
            EOS,
        ]);
        let mut salary_band_ids = BTreeSet::new();
        for band in SALARY_BANDS {
            salary_band_ids.insert(vocab.id(band)?);
        }
        for family in &ontology.families {
            for band in &family.salary_bands {
                salary_band_ids.insert(vocab.id(band)?);
            }
        }
        let mut skill_ids = BTreeMap::new();
        for skill in &ontology.skills {
            skill_ids.insert(skill.clone(), vocab.id(skill)?);
        }
        Ok(RubricJudge {
            config,
            requirements_id,
            responsibilities_id,
            section_stops,
            salary_band_ids,
            skill_ids,
        })
    }

    pub fn config(&self) -> &RubricConfig {
        &self.config
    }

    /// Tokens up to the first end marker, padding removed.
    fn content<'t>(&self, tokens: &'t [usize]) -> Vec<usize> {
        tokens
            .iter()
            .copied()
            .take_while(|&t| t != EOS)
            .filter(|&t| t != PAD)
            .collect()
    }

    fn requirement_section<'t>(&self, content: &'t [usize]) -> &'t [usize] {
        match content.iter().position(|&t| t == self.requirements_id) {
            None => &[],
            Some(i) => {
                let rest = &content[i + 1..];
                let end = rest
                    .iter()
                    .position(|&t| self.section_stops.contains(&t))
                    .unwrap_or(rest.len());
                &rest[..end]
            }
        }
    }

    fn detail_score(&self, content: &[usize]) -> f64 {
        let mut present = 0usize;
        if content.contains(&self.requirements_id) {
            present += 1;
        }
        if content.contains(&self.responsibilities_id) {
            present += 1;
        }
        if content.iter().any(|t| self.salary_band_ids.contains(t)) {
            present += 1;
        }
        present as f64 / 3.0
    }

    fn relevance_score(&self, cv_skill_ids: &[usize], content: &[usize]) -> f64 {
        if cv_skill_ids.is_empty() {
            return 1.0;
        }
        let section: BTreeSet<usize> = self.requirement_section(content).iter().copied().collect();
        let covered = cv_skill_ids.iter().filter(|id| section.contains(id)).count();
        covered as f64 / cv_skill_ids.len() as f64
    }

    fn conciseness_score(&self, content: &[usize]) -> f64 {
        let n = content.len();
        let length_factor = if n < self.config.min_length {
            n as f64 / self.config.min_length as f64
        } else if n > self.config.max_length {
            self.config.max_length as f64 / n as f64
        } else {
            1.0
        };
        let unique: BTreeSet<usize> = content.iter().copied().collect();
        let unique_ratio = unique.len() as f64 / n as f64;
        length_factor * unique_ratio
    }

    fn score_one(&self, cv_skill_ids: &[usize], tokens: &[usize]) -> Result<SubScores> {
        let content = self.content(tokens);
        if content.is_empty() {
            return Err(Error::Eval("jd has no content tokens".into()));
        }
        Ok(SubScores {
            detail: self.detail_score(&content),
            relevance: self.relevance_score(cv_skill_ids, &content),
            conciseness: self.conciseness_score(&content),
        })
    }

    fn cv_skill_ids(&self, cv: &CVDoc) -> Result<Vec<usize>> {
        cv.skills
            .iter()
            .map(|s| {
                self.skill_ids
                    .get(s)
                    .copied()
                    .ok_or_else(|| Error::Vocab(format!("cv skill {s:?} not in the ontology")))
            })
            .collect()
    }
}

impl Judge for RubricJudge {
    fn judge(&self, cv: &CVDoc, jd_first: &[usize], jd_second: &[usize]) -> Result<JudgeVerdict> {
        let skills = self.cv_skill_ids(cv)?;
        let first = self.score_one(&skills, jd_first)?;
        let second = self.score_one(&skills, jd_second)?;
        let margin = first.weighted(&self.config) - second.weighted(&self.config);
        let verdict = if margin > self.config.tie_threshold {
            VerdictKind::Win
        } else if margin < -self.config.tie_threshold {
            VerdictKind::Lose
        } else {
            VerdictKind::Tie
        };
        Ok(JudgeVerdict {
            verdict,
            first,
            second,
            margin,
        })
    }
}

/// Instruction text for a live external judge, mirroring the built-in
/// rubric's three criteria and verdict contract.
pub fn live_judge_prompt(cv_text: &str, jd_first_text: &str, jd_second_text: &str) -> String {
    format!(
        "You compare two job descriptions written for the same candidate.\n\
         \n\
         Candidate profile:\n{cv_text}\n\
         \n\
         Job description A:\n{jd_first_text}\n\
         \n\
         Job description B:\n{jd_second_text}\n\
         \n\
         Judge the two against each other on three criteria:\n\
         1. Level of details: does the job description contain enough necessary \
         information about the job (requirements, responsibilities, salary)?\n\
         2. Relevance: is the job description suitable for this candidate's \
         skills?\n\
         3. Conciseness: is the text fluid and readable, without padding or \
         repetition?\n\
         \n\
         Answer with exactly one word: 'win' if A is better, 'lose' if B is \
         better, 'tie' if they are comparable.\n"
    )
}
