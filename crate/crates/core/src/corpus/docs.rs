//! CV and job-description documents and their sampler.
//!
//! A CV is an anchor family's required skills (all four, or three of the
//! four) plus one or two unrelated extras, with an experience level at or
//! above the anchor family's minimum. A JD advertises one family: its
//! full required skill set, the family's minimum experience, a salary
//! band and a responsibility phrasing. The ground-truth label of a pair
//! is a pure function of both documents ([`CorpusSampler::match_label`]),
//! which is what makes every downstream claim mechanically checkable.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ontology::{JobFamily, SkillOntology, Vocab, EXPERIENCE_LEVELS};
use crate::error::{Error, Result};
use crate::util::splitmix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SeekerId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JobId(pub u64);

#[derive(Clone, Debug, PartialEq)]
pub struct CVDoc {
    pub seeker: SeekerId,
    pub tokens: Vec<usize>,
    pub text: String,
    /// Latent skill set in canonical ontology order.
    pub skills: Vec<String>,
    /// Experience rank, 1 = junior through 3 = senior.
    pub experience: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JDDoc {
    pub job: JobId,
    pub tokens: Vec<usize>,
    pub text: String,
    pub family: String,
    pub required_skills: Vec<String>,
    pub min_experience: u8,
    pub salary_band: String,
    pub responsibility: Vec<String>,
}

/// One observed seeker/job interaction with its label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub seeker: SeekerId,
    pub job: JobId,
    pub label: u8,
}

/// Document sampler over a fixed ontology and vocabulary.
pub struct CorpusSampler<'a> {
    pub ontology: &'a SkillOntology,
    pub vocab: &'a Vocab,
    /// Required-skill overlap fraction at or above which the skill gate
    /// passes.
    pub tau: f64,
    pub min_extra_skills: usize,
    pub max_extra_skills: usize,
}

const JD_REJECTION_LIMIT: usize = 1000;

impl<'a> CorpusSampler<'a> {
    pub fn new(ontology: &'a SkillOntology, vocab: &'a Vocab) -> CorpusSampler<'a> {
        CorpusSampler {
            ontology,
            vocab,
            tau: 0.75,
            min_extra_skills: 1,
            max_extra_skills: 2,
        }
    }

    /// Samples one CV. Same seed, same CV, bit for bit.
    pub fn sample_cv(&self, seeker: SeekerId, seed: u64) -> CVDoc {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let family = &self.ontology.families[rng.gen_range(0..self.ontology.families.len())];
        let m = family.required_skills.len();
        let keep = if rng.gen_bool(0.5) { m } else { m - 1 };
        let mut skills: Vec<String> = family.required_skills.clone();
        if keep < m {
            let drop = rng.gen_range(0..m);
            skills.remove(drop);
        }
        let n_extra = rng.gen_range(self.min_extra_skills..=self.max_extra_skills);
        let mut added = 0;
        let mut attempts = 0;
        while added < n_extra && attempts < 1000 {
            attempts += 1;
            let s = &self.ontology.skills[rng.gen_range(0..self.ontology.skills.len())];
            if !skills.contains(s) {
                skills.push(s.clone());
                added += 1;
            }
        }
        self.sort_by_ontology(&mut skills);
        let experience = rng.gen_range(family.min_experience..=3);
        let (text, tokens) = self.render_cv(&skills, experience);
        CVDoc {
            seeker,
            tokens,
            text,
            skills,
            experience,
        }
    }

    /// Ground-truth label: the CV covers at least a `tau` fraction of the
    /// JD's required skills AND meets the family's experience floor.
    pub fn match_label(&self, cv: &CVDoc, jd: &JDDoc) -> u8 {
        let overlap = jd
            .required_skills
            .iter()
            .filter(|s| cv.skills.contains(*s))
            .count();
        // Integer threshold: overlap/|req| >= tau, computed without float
        // boundary surprises (3-of-4 at tau = 0.75 must pass exactly).
        let needed = (self.tau * jd.required_skills.len() as f64 - 1e-9).ceil() as usize;
        let skills_ok = overlap >= needed;
        let experience_ok = cv.experience >= jd.min_experience;
        u8::from(skills_ok && experience_ok)
    }

    /// Samples a JD whose label against `cv` equals `desired`.
    ///
    /// A matched JD is drawn uniformly from the families this CV actually
    /// matches; a mismatched one by rejection over all families, bounded
    /// at 1,000 draws. With the default world a CV always matches its
    /// anchor family, so `desired = 1` never fails; `desired = 0` fails
    /// only for a CV matching every family, which a six-skill CV cannot.
    pub fn sample_jd_for_cv(&self, cv: &CVDoc, desired: u8, seed: u64) -> Result<JDDoc> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let job = JobId(splitmix64(seed ^ 0x4a44));
        if desired == 1 {
            let feasible: Vec<&JobFamily> = self
                .ontology
                .families
                .iter()
                .filter(|f| self.family_matches(cv, f))
                .collect();
            if feasible.is_empty() {
                return Err(Error::CorpusInfeasible(format!(
                    "seeker {} matches no family, cannot sample a matched JD",
                    cv.seeker.0
                )));
            }
            let family = feasible[rng.gen_range(0..feasible.len())];
            return Ok(self.render_jd(job, family, &mut rng));
        }
        for _ in 0..JD_REJECTION_LIMIT {
            let family = &self.ontology.families[rng.gen_range(0..self.ontology.families.len())];
            let jd = self.render_jd(job, family, &mut rng);
            if self.match_label(cv, &jd) == 0 {
                return Ok(jd);
            }
        }
        Err(Error::CorpusInfeasible(format!(
            "no mismatched JD found for seeker {} within {} draws",
            cv.seeker.0, JD_REJECTION_LIMIT
        )))
    }

    fn family_matches(&self, cv: &CVDoc, family: &JobFamily) -> bool {
        let overlap = family
            .required_skills
            .iter()
            .filter(|s| cv.skills.contains(*s))
            .count();
        let needed = (self.tau * family.required_skills.len() as f64 - 1e-9).ceil() as usize;
        overlap >= needed && cv.experience >= family.min_experience
    }

    fn sort_by_ontology(&self, skills: &mut [String]) {
        skills.sort_by_key(|s| self.ontology.skill_index(s).unwrap_or(usize::MAX));
    }

    fn render_cv(&self, skills: &[String], experience: u8) -> (String, Vec<usize>) {
        let level = EXPERIENCE_LEVELS[(experience - 1) as usize];
        let mut words = vec!["profile", "experience", level, "skills"];
        words.extend(skills.iter().map(|s| s.as_str()));
        let text = words.join(" ");
        let tokens = self.vocab.encode(&text).expect("ontology words are in vocab");
        (text, tokens)
    }

    fn render_jd(&self, job: JobId, family: &JobFamily, rng: &mut ChaCha8Rng) -> JDDoc {
        let band = family.salary_bands.choose(rng).expect("validated nonempty").clone();
        let responsibility = family
            .responsibilities
            .choose(rng)
            .expect("validated nonempty")
            .clone();
        let level = EXPERIENCE_LEVELS[(family.min_experience - 1) as usize];
        let mut words = vec!["jd", "title", family.name.as_str(), "requirements"];
        words.extend(family.required_skills.iter().map(|s| s.as_str()));
        words.extend(["experience", level, "salary", band.as_str(), "responsibilities"]);
        words.extend(responsibility.iter().map(|s| s.as_str()));
        let text = words.join(" ");
        let mut tokens = self.vocab.encode(&text).expect("ontology words are in vocab");
        tokens.push(crate::corpus::ontology::EOS);
        JDDoc {
            job,
            tokens,
            text,
            family: family.name.clone(),
            required_skills: family.required_skills.clone(),
            min_experience: family.min_experience,
            salary_band: band,
            responsibility,
        }
    }
}
