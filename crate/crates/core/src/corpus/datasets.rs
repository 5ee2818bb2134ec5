//! Seeded construction of the five dataset slices.
//!
//! One call to [`make_datasets`] produces, from a single seed:
//!
//! * `sft`: matched CV/JD pairs for supervised fine-tuning,
//! * `rmt`: (CV, matched JD, mismatched JD) triples for reward training,
//! * `rl_cvs`: CVs for policy rollouts, seekers disjoint from both stages,
//! * `rec`: labelled CV/JD interaction pairs in train/val/test splits,
//!   the test split carrying a flagged cold-start subset whose seekers
//!   never appear in train,
//! * `eval_cvs`: held-out CVs touched by no training stage, reserved for
//!   final policy evaluation.
//!
//! Seeker ids are allocated in disjoint blocks per slice, so the
//! disjointness guarantees are structural rather than checked after the
//! fact (tests re-check them anyway).

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::docs::{CVDoc, CorpusSampler, JDDoc, SeekerId};
use crate::corpus::ontology::{SkillOntology, Vocab};
use crate::error::{Error, Result};
use crate::util::{derive_seed, derive_seed_indexed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecSplit {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SftExample {
    pub cv: CVDoc,
    pub jd: JDDoc,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RmtTriple {
    pub cv: CVDoc,
    pub jd_pos: JDDoc,
    pub jd_neg: JDDoc,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecPair {
    pub cv: CVDoc,
    pub jd: JDDoc,
    /// Interaction label, possibly noise-flipped on train/val.
    pub label: u8,
    pub split: RecSplit,
    /// True when this test seeker never appears in the train split.
    pub cold_start: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CorpusConfig {
    pub sft_examples: usize,
    pub rmt_triples: usize,
    pub rl_cvs: usize,
    pub rec_train: usize,
    pub rec_val: usize,
    pub rec_test: usize,
    pub eval_cvs: usize,
    /// How many SFT examples / RMT triples reuse one seeker's CV.
    pub examples_per_seeker: usize,
    /// How many rec interactions each seeker contributes.
    pub rec_examples_per_seeker: usize,
    /// Fraction of the rec test split drawn from unseen seekers.
    pub cold_start_fraction: f64,
    /// Probability of flipping a train/val interaction label. Test
    /// labels are never flipped so evaluation keeps its ground truth.
    pub label_noise: f64,
    /// Skill-overlap threshold of the matching rule.
    pub tau: f64,
    pub min_extra_skills: usize,
    pub max_extra_skills: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            sft_examples: 2000,
            rmt_triples: 3000,
            rl_cvs: 500,
            rec_train: 1500,
            rec_val: 200,
            rec_test: 300,
            eval_cvs: 200,
            examples_per_seeker: 2,
            rec_examples_per_seeker: 3,
            cold_start_fraction: 0.5,
            label_noise: 0.0,
            tau: 0.75,
            min_extra_skills: 1,
            max_extra_skills: 2,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sft_examples", self.sft_examples),
            ("rmt_triples", self.rmt_triples),
            ("rl_cvs", self.rl_cvs),
            ("rec_train", self.rec_train),
            ("rec_val", self.rec_val),
            ("rec_test", self.rec_test),
            ("eval_cvs", self.eval_cvs),
            ("examples_per_seeker", self.examples_per_seeker),
            ("rec_examples_per_seeker", self.rec_examples_per_seeker),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("corpus.{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.cold_start_fraction) {
            return Err(Error::Config("corpus.cold_start_fraction outside [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::Config("corpus.label_noise outside [0, 1)".into()));
        }
        if !(0.0 < self.tau && self.tau <= 1.0) {
            return Err(Error::Config("corpus.tau outside (0, 1]".into()));
        }
        if self.min_extra_skills > self.max_extra_skills {
            return Err(Error::Config("corpus.min_extra_skills exceeds max_extra_skills".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct DatasetBundle {
    pub sft: Vec<SftExample>,
    pub rmt: Vec<RmtTriple>,
    pub rl_cvs: Vec<CVDoc>,
    pub rec: Vec<RecPair>,
    pub eval_cvs: Vec<CVDoc>,
}

// Seeker id blocks. Disjoint by construction; the capacity guard below
// keeps any slice from spilling into the next block.
const BLOCK: u64 = 1_000_000;
const SFT_BASE: u64 = 0;
const RMT_BASE: u64 = BLOCK;
const RL_BASE: u64 = 2 * BLOCK;
const REC_TRAIN_BASE: u64 = 3 * BLOCK;
const REC_VAL_BASE: u64 = 3 * BLOCK + 500_000;
const REC_COLD_BASE: u64 = 3 * BLOCK + 800_000;
const EVAL_BASE: u64 = 4 * BLOCK;

fn seekers_for(examples: usize, per_seeker: usize) -> usize {
    examples.div_ceil(per_seeker)
}

/// Builds every dataset slice from one seed. Pure: identical inputs give
/// identical bundles.
pub fn make_datasets(
    ontology: &SkillOntology,
    vocab: &Vocab,
    config: &CorpusConfig,
    seed: u64,
) -> Result<DatasetBundle> {
    config.validate()?;
    ontology.validate()?;
    let sampler = CorpusSampler {
        ontology,
        vocab,
        tau: config.tau,
        min_extra_skills: config.min_extra_skills,
        max_extra_skills: config.max_extra_skills,
    };

    let sft_seekers = seekers_for(config.sft_examples, config.examples_per_seeker);
    let rmt_seekers = seekers_for(config.rmt_triples, config.examples_per_seeker);
    let rec_train_seekers = seekers_for(config.rec_train, config.rec_examples_per_seeker);
    let rec_val_seekers = seekers_for(config.rec_val, config.rec_examples_per_seeker);
    let cold_examples = (config.rec_test as f64 * config.cold_start_fraction).round() as usize;
    let cold_seekers = seekers_for(cold_examples.max(1), config.rec_examples_per_seeker);
    let capacity = [
        ("sft", sft_seekers as u64, BLOCK),
        ("rmt", rmt_seekers as u64, BLOCK),
        ("rl", config.rl_cvs as u64, BLOCK),
        ("rec train", rec_train_seekers as u64, 500_000),
        ("rec val", rec_val_seekers as u64, 300_000),
        ("rec cold", cold_seekers as u64, 200_000),
        ("eval", config.eval_cvs as u64, BLOCK),
    ];
    for (name, need, cap) in capacity {
        if need > cap {
            return Err(Error::CorpusInfeasible(format!(
                "{name} slice needs {need} unique seekers, block holds {cap}"
            )));
        }
    }

    let sft = build_pairs(&sampler, config, seed, "corpus/sft", SFT_BASE, config.sft_examples)?;
    let rmt = build_triples(&sampler, config, seed, RMT_BASE)?;
    let rl_cvs = build_cvs(&sampler, seed, "corpus/rl", RL_BASE, config.rl_cvs);
    let eval_cvs = build_cvs(&sampler, seed, "corpus/eval", EVAL_BASE, config.eval_cvs);
    let rec = build_rec(&sampler, config, seed, rec_train_seekers)?;

    Ok(DatasetBundle {
        sft,
        rmt,
        rl_cvs,
        rec,
        eval_cvs,
    })
}

fn cv_for(
    sampler: &CorpusSampler,
    cache: &mut HashMap<u64, CVDoc>,
    cv_seed_base: u64,
    base: u64,
    seeker_idx: usize,
) -> CVDoc {
    cache
        .entry(base + seeker_idx as u64)
        .or_insert_with(|| {
            sampler.sample_cv(
                SeekerId(base + seeker_idx as u64),
                derive_seed_indexed(cv_seed_base, base + seeker_idx as u64),
            )
        })
        .clone()
}

fn build_pairs(
    sampler: &CorpusSampler,
    config: &CorpusConfig,
    seed: u64,
    label: &str,
    base: u64,
    count: usize,
) -> Result<Vec<SftExample>> {
    let section = derive_seed(seed, label);
    let cv_section = derive_seed(seed, "corpus/cv");
    let mut cache = HashMap::new();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let cv = cv_for(sampler, &mut cache, cv_section, base, i / config.examples_per_seeker);
        let jd = sampler.sample_jd_for_cv(&cv, 1, derive_seed_indexed(section, i as u64))?;
        out.push(SftExample { cv, jd });
    }
    Ok(out)
}

fn build_triples(
    sampler: &CorpusSampler,
    config: &CorpusConfig,
    seed: u64,
    base: u64,
) -> Result<Vec<RmtTriple>> {
    let section = derive_seed(seed, "corpus/rmt");
    let cv_section = derive_seed(seed, "corpus/cv");
    let mut cache = HashMap::new();
    let mut out = Vec::with_capacity(config.rmt_triples);
    for i in 0..config.rmt_triples {
        let cv = cv_for(sampler, &mut cache, cv_section, base, i / config.examples_per_seeker);
        let jd_pos =
            sampler.sample_jd_for_cv(&cv, 1, derive_seed_indexed(section, 2 * i as u64))?;
        let jd_neg =
            sampler.sample_jd_for_cv(&cv, 0, derive_seed_indexed(section, 2 * i as u64 + 1))?;
        out.push(RmtTriple { cv, jd_pos, jd_neg });
    }
    Ok(out)
}

fn build_cvs(
    sampler: &CorpusSampler,
    seed: u64,
    label: &str,
    base: u64,
    count: usize,
) -> Vec<CVDoc> {
    let section = derive_seed(seed, label);
    (0..count)
        .map(|i| {
            sampler.sample_cv(
                SeekerId(base + i as u64),
                derive_seed_indexed(section, i as u64),
            )
        })
        .collect()
}

fn build_rec(
    sampler: &CorpusSampler,
    config: &CorpusConfig,
    seed: u64,
    train_seekers: usize,
) -> Result<Vec<RecPair>> {
    let section = derive_seed(seed, "corpus/rec");
    let cv_section = derive_seed(seed, "corpus/cv");
    let noise_section = derive_seed(seed, "corpus/rec_noise");
    let mut cache = HashMap::new();
    let mut out = Vec::new();

    let push_examples = |out: &mut Vec<RecPair>,
                             cache: &mut HashMap<u64, CVDoc>,
                             base: u64,
                             seeker_idx: usize,
                             count: usize,
                             offset: usize,
                             split: RecSplit,
                             cold: bool|
     -> Result<()> {
        for k in 0..count {
            let cv = cv_for(sampler, cache, cv_section, base, seeker_idx);
            let desired = ((seeker_idx + k) % 2) as u8;
            let jd_seed = derive_seed_indexed(section, (offset + out.len()) as u64);
            let jd = sampler.sample_jd_for_cv(&cv, desired, jd_seed)?;
            let mut label = desired;
            if config.label_noise > 0.0 && split != RecSplit::Test {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(
                    noise_section,
                    (offset + out.len()) as u64,
                ));
                if rng.gen::<f64>() < config.label_noise {
                    label ^= 1;
                }
            }
            out.push(RecPair {
                cv,
                jd,
                label,
                split,
                cold_start: cold,
            });
        }
        Ok(())
    };

    // Train: one block of seekers, several interactions each.
    let mut i = 0;
    while out.len() < config.rec_train {
        let take = config
            .rec_examples_per_seeker
            .min(config.rec_train - out.len());
        push_examples(&mut out, &mut cache, REC_TRAIN_BASE, i, take, 0, RecSplit::Train, false)?;
        i += 1;
    }

    // Val: fresh seekers.
    let val_start = out.len();
    let mut i = 0;
    while out.len() - val_start < config.rec_val {
        let take = config
            .rec_examples_per_seeker
            .min(config.rec_val - (out.len() - val_start));
        push_examples(&mut out, &mut cache, REC_VAL_BASE, i, take, 100_000, RecSplit::Val, false)?;
        i += 1;
    }

    // Test: warm half reuses train seekers with new JDs; cold half uses
    // seekers no other slice has touched.
    let cold_target = (config.rec_test as f64 * config.cold_start_fraction).round() as usize;
    let warm_target = config.rec_test - cold_target;
    let test_start = out.len();
    let mut i = 0;
    while out.len() - test_start < warm_target {
        let take = config
            .rec_examples_per_seeker
            .min(warm_target - (out.len() - test_start));
        let seeker_idx = i % train_seekers.max(1);
        push_examples(&mut out, &mut cache, REC_TRAIN_BASE, seeker_idx, take, 200_000, RecSplit::Test, false)?;
        i += 1;
    }
    let cold_start_begin = out.len();
    let mut i = 0;
    while out.len() - cold_start_begin < cold_target {
        let take = config
            .rec_examples_per_seeker
            .min(cold_target - (out.len() - cold_start_begin));
        push_examples(&mut out, &mut cache, REC_COLD_BASE, i, take, 300_000, RecSplit::Test, true)?;
        i += 1;
    }

    Ok(out)
}
