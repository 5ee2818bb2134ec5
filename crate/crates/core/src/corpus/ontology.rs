//! The fixed world: skills, job families, experience levels, vocabulary.
//!
//! Everything downstream (matching rule, document rendering, token ids)
//! derives from [`SkillOntology::default_world`] plus the prompt template
//! words. The vocabulary is closed: encoding an unknown word is an error,
//! not an UNK token, because in a synthetic world an unknown word is
//! always a bug.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token id reserved for padding. Guaranteed by vocabulary construction.
pub const PAD: usize = 0;
/// Token id of the end-of-sequence marker.
pub const EOS: usize = 1;
/// Token id of the CV/JD separator used by the scoring models.
pub const SEP: usize = 2;

pub const EXPERIENCE_LEVELS: [&str; 3] = ["junior", "mid", "senior"];

/// Numeric experience level, 1-based to match the word list above.
pub fn experience_rank(word: &str) -> Option<u8> {
    EXPERIENCE_LEVELS
        .iter()
        .position(|w| *w == word)
        .map(|i| (i + 1) as u8)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct JobFamily {
    pub name: String,
    pub required_skills: Vec<String>,
    /// Minimum experience rank (1 = junior) a seeker needs to match.
    pub min_experience: u8,
    pub salary_bands: Vec<String>,
    /// Alternative responsibility phrasings, each a short word sequence.
    pub responsibilities: Vec<Vec<String>>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SkillOntology {
    pub schema_version: u32,
    pub skills: Vec<String>,
    pub families: Vec<JobFamily>,
}

impl SkillOntology {
    /// The default 40-skill, 8-family world used by every seeded run.
    pub fn default_world() -> SkillOntology {
        let skills = [
            "python", "java", "rust", "golang", "typescript", "sql", "spark", "kafka", "airflow",
            "hadoop", "pytorch", "sklearn", "statistics", "pandas", "tensorflow", "react", "css",
            "html", "webpack", "figma", "docker", "kubernetes", "terraform", "ansible", "jenkins",
            "excel", "tableau", "powerbi", "forecasting", "accounting", "auditing", "taxation",
            "payroll", "recruiting", "onboarding", "compliance", "negotiation", "copywriting",
            "photoshop", "cad",
        ];
        let fam = |name: &str,
                   required: [&str; 4],
                   min_experience: u8,
                   bands: &[&str],
                   resp: [[&str; 3]; 2]| JobFamily {
            name: name.to_string(),
            required_skills: required.iter().map(|s| s.to_string()).collect(),
            min_experience,
            salary_bands: bands.iter().map(|s| s.to_string()).collect(),
            responsibilities: resp
                .iter()
                .map(|v| v.iter().map(|s| s.to_string()).collect())
                .collect(),
        };
        SkillOntology {
            schema_version: 1,
            skills: skills.iter().map(|s| s.to_string()).collect(),
            families: vec![
                fam(
                    "frontend_developer",
                    ["react", "css", "html", "webpack"],
                    1,
                    &["salary_low", "salary_mid"],
                    [["build", "ship", "polish"], ["design", "review", "support"]],
                ),
                fam(
                    "hr_specialist",
                    ["payroll", "recruiting", "onboarding", "compliance"],
                    1,
                    &["salary_low", "salary_mid"],
                    [["hire", "coordinate", "support"], ["screen", "train", "document"]],
                ),
                fam(
                    "backend_engineer",
                    ["python", "java", "sql", "golang"],
                    2,
                    &["salary_mid", "salary_high"],
                    [["build", "deploy", "scale"], ["design", "optimize", "maintain"]],
                ),
                fam(
                    "data_engineer",
                    ["spark", "kafka", "airflow", "hadoop"],
                    2,
                    &["salary_mid", "salary_high"],
                    [["ingest", "transform", "monitor"], ["automate", "scale", "document"]],
                ),
                fam(
                    "devops_engineer",
                    ["docker", "kubernetes", "terraform", "ansible"],
                    2,
                    &["salary_mid", "salary_high"],
                    [["deploy", "monitor", "automate"], ["harden", "scale", "support"]],
                ),
                fam(
                    "data_analyst",
                    ["excel", "tableau", "powerbi", "statistics"],
                    2,
                    &["salary_low", "salary_mid"],
                    [["analyze", "report", "present"], ["forecast", "review", "document"]],
                ),
                fam(
                    "ml_engineer",
                    ["pytorch", "sklearn", "statistics", "pandas"],
                    3,
                    &["salary_high"],
                    [["train", "evaluate", "ship"], ["prototype", "optimize", "monitor"]],
                ),
                fam(
                    "finance_manager",
                    ["accounting", "auditing", "taxation", "forecasting"],
                    3,
                    &["salary_high"],
                    [["audit", "forecast", "report"], ["budget", "review", "present"]],
                ),
            ],
        }
    }

    /// Checks referential integrity; call after deserializing.
    pub fn validate(&self) -> Result<()> {
        if self.skills.is_empty() || self.families.is_empty() {
            return Err(Error::CorpusInfeasible("empty skill list or family list".into()));
        }
        let skill_set: BTreeSet<&str> = self.skills.iter().map(|s| s.as_str()).collect();
        if skill_set.len() != self.skills.len() {
            return Err(Error::CorpusInfeasible("duplicate skill names".into()));
        }
        let mut family_names = BTreeSet::new();
        for f in &self.families {
            if !family_names.insert(f.name.as_str()) {
                return Err(Error::CorpusInfeasible(format!(
                    "duplicate family name {}",
                    f.name
                )));
            }
            if f.required_skills.is_empty() {
                return Err(Error::CorpusInfeasible(format!(
                    "family {} has no required skills",
                    f.name
                )));
            }
            for s in &f.required_skills {
                if !skill_set.contains(s.as_str()) {
                    return Err(Error::CorpusInfeasible(format!(
                        "family {} requires unknown skill {s}",
                        f.name
                    )));
                }
            }
            if f.min_experience < 1 || f.min_experience > 3 {
                return Err(Error::CorpusInfeasible(format!(
                    "family {} has experience rank {} outside 1..=3",
                    f.name, f.min_experience
                )));
            }
            if f.salary_bands.is_empty() || f.responsibilities.is_empty() {
                return Err(Error::CorpusInfeasible(format!(
                    "family {} lacks salary bands or responsibilities",
                    f.name
                )));
            }
        }
        Ok(())
    }

    pub fn family(&self, name: &str) -> Option<&JobFamily> {
        self.families.iter().find(|f| f.name == name)
    }

    /// Index of a skill in the canonical ordering, used for deterministic
    /// rendering.
    pub fn skill_index(&self, skill: &str) -> Option<usize> {
        self.skills.iter().position(|s| s == skill)
    }
}

/// Closed word-level vocabulary with stable ids.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

/// Structural words used when rendering documents.
pub const STRUCTURAL_WORDS: [&str; 9] = [
    "profile",
    "experience",
    "skills",
    "jd",
    "title",
    "requirements",
    "salary",
    "responsibilities",
    "candidate",
];

pub const SALARY_BANDS: [&str; 3] = ["salary_low", "salary_mid", "salary_high"];

impl Vocab {
    /// Builds the vocabulary from the ontology plus any extra words the
    /// prompt template needs. Insertion order is fixed: specials,
    /// structural words, experience levels, salary bands, skills, family
    /// names, responsibility words, then extras, each first-occurrence
    /// deduplicated, so ids are stable for a given ontology.
    pub fn build(ontology: &SkillOntology, extra_words: &[&str]) -> Vocab {
        let mut vocab = Vocab {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in ["<pad>", "<eos>", "<sep>"] {
            vocab.insert(w);
        }
        debug_assert_eq!(vocab.index["<pad>"], PAD);
        debug_assert_eq!(vocab.index["<eos>"], EOS);
        debug_assert_eq!(vocab.index["<sep>"], SEP);
        for w in STRUCTURAL_WORDS {
            vocab.insert(w);
        }
        for w in EXPERIENCE_LEVELS {
            vocab.insert(w);
        }
        for w in SALARY_BANDS {
            vocab.insert(w);
        }
        for w in &ontology.skills {
            vocab.insert(w);
        }
        for f in &ontology.families {
            vocab.insert(&f.name);
            for band in &f.salary_bands {
                vocab.insert(band);
            }
            for phrase in &f.responsibilities {
                for w in phrase {
                    vocab.insert(w);
                }
            }
        }
        for w in extra_words {
            vocab.insert(w);
        }
        vocab
    }

    fn insert(&mut self, word: &str) {
        if !self.index.contains_key(word) {
            self.index.insert(word.to_string(), self.words.len());
            self.words.push(word.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Vocab(format!("unknown word {word:?}")))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Vocab(format!("token id {id} out of range (vocab {})", self.len())))
    }

    /// Whitespace-splits and maps each word to its id.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Joins token words with single spaces.
    pub fn decode(&self, tokens: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = tokens.iter().map(|&t| self.word(t)).collect();
        Ok(words?.join(" "))
    }
}
