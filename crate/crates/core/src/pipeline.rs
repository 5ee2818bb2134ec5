//! Stage orchestration over one output directory.
//!
//! Every command reads and writes a fixed layout under the configured
//! output root:
//!
//! ```text
//! out/
//!   run.toml        effective configuration snapshot
//!   corpus/         dataset files plus checksummed manifest
//!   checkpoints/    model weights per stage
//!   generations/    cached JD generations, keyed by seeker and index
//!   metrics/        append-only JSONL logs, one file per stage
//!   reports/        evaluation summaries as pretty-printed JSON
//! ```
//!
//! Stages check their prerequisites up front and refuse with the exact
//! missing artifact named. All randomness flows from the global seed
//! through per-stage labels, so identical configs rerun to identical
//! bytes, and the SFT and aligned generators draw generation seeds from
//! the same per-(seeker, index) stream so their outputs are paired.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::alignment::{train_reward, train_sft, RmtReport, SftReport};
use crate::config::{RunConfig, Stage};
use crate::corpus::datasets::{make_datasets, DatasetBundle, RecPair, RecSplit};
use crate::corpus::docs::{CVDoc, CorpusSampler};
use crate::corpus::io::{
    self, read_bundle, write_bundle, FileHeader, Manifest, DATASET_SCHEMA_VERSION, MANIFEST_FILE,
};
use crate::corpus::ontology::{SkillOntology, Vocab, EOS, SEP};
use crate::corpus::prompt::{assemble_prompt, PromptInstance};
use crate::error::{Error, Result};
use crate::evaluation::{
    bootstrap_advantage, cold_start_slice, report_from_outcomes, tournament_outcomes,
    ColdStartReport, RubricJudge, TournamentReport,
};
use crate::metrics_log::{metric_values, MetricsLog};
use crate::models::{generate, CriticModel, GeneratorModel, ModelRole, RewardModel};
use crate::ppo::{kl_estimate, ppo_train, PpoReport, RolloutInput, RolloutSample};
use crate::recsys::{
    rec_auc, rec_probabilities, train_rec, PredictorKind, RecExample, RecModel, RecReport,
    RecTrainConfig,
};
use crate::util::{derive_seed, derive_seed_indexed};

const CKPT_SFT: &str = "sft";
const CKPT_RMT: &str = "rmt";
const CKPT_PPO_ACTOR: &str = "ppo_actor";
const CKPT_PPO_CRITIC: &str = "ppo_critic";
const CKPT_REC: &str = "rec";

/// Fraction of SFT examples and RMT triples held out for evaluation.
const HELDOUT_FRACTION: f64 = 0.1;

/// Generation counts exercised by the sweep, capped by the cache size.
const SWEEP_COUNTS: [usize; 4] = [1, 2, 4, 8];

/// Which trained generator produces a generation cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorSource {
    Sft,
    Ppo,
}

impl GeneratorSource {
    pub fn label(self) -> &'static str {
        match self {
            GeneratorSource::Sft => "sft",
            GeneratorSource::Ppo => "ppo",
        }
    }

    fn checkpoint(self) -> &'static str {
        match self {
            GeneratorSource::Sft => CKPT_SFT,
            GeneratorSource::Ppo => CKPT_PPO_ACTOR,
        }
    }

    fn role(self) -> ModelRole {
        match self {
            GeneratorSource::Sft => ModelRole::Generator,
            GeneratorSource::Ppo => ModelRole::Actor,
        }
    }
}

/// One cached generation. `index` runs from zero per seeker; `seed` is
/// the derived sampling seed, recorded so any row can be reproduced in
/// isolation.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GenRecord {
    pub seeker: u64,
    pub index: usize,
    pub tokens: Vec<usize>,
    pub text: String,
    pub eos_terminated: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GenerateSummary {
    pub source: GeneratorSource,
    pub rec_cvs: usize,
    pub eval_cvs: usize,
    pub per_cv: usize,
    pub eos_fraction: f64,
    /// Malformed input records skipped while reading CV files.
    pub skipped: usize,
}

/// Generation-quality comparison of the aligned actor against the SFT
/// policy: position-debiased tournament plus paired reward and KL
/// statistics over the held-out evaluation CVs.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct QualityReport {
    pub tournament: TournamentReport,
    /// Percentile bootstrap interval for the tournament advantage.
    pub advantage_low: f64,
    pub advantage_high: f64,
    pub mean_reward_sft: f64,
    pub mean_reward_ppo: f64,
    /// Mean per-sequence KL of the aligned actor to the reference.
    pub mean_kl_ppo: f64,
    pub kl_ceiling: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RecCell {
    pub predictor: PredictorKind,
    /// "base", or the generation source fused in: "sft" / "ppo".
    pub enhancement: String,
    pub best_val_auc: f64,
    pub test_auc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RecEvalReport {
    pub cells: Vec<RecCell>,
}

impl RecEvalReport {
    pub fn cell(&self, predictor: PredictorKind, enhancement: &str) -> Option<&RecCell> {
        self.cells
            .iter()
            .find(|c| c.predictor == predictor && c.enhancement == enhancement)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ColdStartEvalReport {
    pub base: ColdStartReport,
    pub enhanced: ColdStartReport,
    /// Enhanced minus base AUC on all test pairs.
    pub full_gap: f64,
    /// The same gap restricted to cold-start pairs.
    pub cold_gap: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SweepPoint {
    pub n: usize,
    pub best_val_auc: f64,
    pub test_auc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GenSweepReport {
    pub points: Vec<SweepPoint>,
}

/// A validated config bound to its output directory, with the ontology
/// and vocabulary built once.
pub struct Pipeline {
    config: RunConfig,
    config_sha256: String,
    ontology: SkillOntology,
    vocab: Vocab,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Pipeline> {
        config.validate()?;
        let config_sha256 = config.checksum()?;
        let ontology = SkillOntology::default_world();
        let vocab = Vocab::build(&ontology, &config.prompt.words());
        Ok(Pipeline {
            config,
            config_sha256,
            ontology,
            vocab,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn config_sha256(&self) -> &str {
        &self.config_sha256
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn ontology(&self) -> &SkillOntology {
        &self.ontology
    }

    // ---- paths ----------------------------------------------------

    pub fn out_dir(&self) -> &Path {
        &self.config.out_dir
    }

    pub fn corpus_dir(&self) -> PathBuf {
        io::corpus_dir(&self.config.out_dir)
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.config.out_dir.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn generations_path(&self, set: &str, source: GeneratorSource) -> PathBuf {
        self.config
            .out_dir
            .join("generations")
            .join(format!("{set}_{}.jsonl", source.label()))
    }

    pub fn metrics_path(&self, stage: &str) -> PathBuf {
        self.config.out_dir.join("metrics").join(format!("{stage}.jsonl"))
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.config.out_dir.join("reports").join(format!("{name}.json"))
    }

    // ---- shared plumbing ------------------------------------------

    /// Writes the effective config snapshot; every stage entry point
    /// calls this so the output directory is self-describing.
    fn prepare(&self) -> Result<()> {
        fs::create_dir_all(&self.config.out_dir)?;
        self.config.save(&self.config.out_dir.join("run.toml"))
    }

    fn log(&self, stage: &str) -> Result<MetricsLog> {
        MetricsLog::open(&self.metrics_path(stage), &self.config_sha256)
    }

    fn sampler(&self) -> CorpusSampler<'_> {
        CorpusSampler {
            ontology: &self.ontology,
            vocab: &self.vocab,
            tau: self.config.corpus.tau,
            min_extra_skills: self.config.corpus.min_extra_skills,
            max_extra_skills: self.config.corpus.max_extra_skills,
        }
    }

    fn load_bundle(&self) -> Result<DatasetBundle> {
        read_bundle(&self.corpus_dir())
    }

    fn require(&self, path: PathBuf, hint: &str) -> Result<PathBuf> {
        if path.is_file() {
            Ok(path)
        } else {
            Err(Error::MissingPrerequisite {
                path,
                hint: hint.to_string(),
            })
        }
    }

    fn write_report<T: Serialize>(&self, name: &str, report: &T) -> Result<PathBuf> {
        let path = self.report_path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut text = serde_json::to_string_pretty(report)?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }

    fn training_instances(&self, bundle: &DatasetBundle) -> Result<Vec<PromptInstance>> {
        bundle
            .sft
            .iter()
            .map(|e| assemble_prompt(&e.cv, Some(&e.jd), &self.config.prompt, &self.vocab))
            .collect()
    }

    fn inference_prompt(&self, cv: &CVDoc) -> Result<PromptInstance> {
        assemble_prompt(cv, None, &self.config.prompt, &self.vocab)
    }

    // ---- corpus ---------------------------------------------------

    /// Builds every dataset slice, writes them with a checksummed
    /// manifest, and re-verifies the stored labels against the
    /// matching rule.
    pub fn run_corpus(&self) -> Result<Manifest> {
        self.prepare()?;
        let seed = self.config.stage_seed(Stage::Corpus);
        let bundle = make_datasets(&self.ontology, &self.vocab, &self.config.corpus, seed)?;
        let mismatches = self.verify_labels(&bundle)?;
        if mismatches > 0 {
            return Err(Error::Dataset(format!(
                "label verification found {mismatches} mismatches against the matching rule"
            )));
        }
        let manifest = write_bundle(&self.corpus_dir(), &bundle, seed)?;
        let log = self.log(Stage::Corpus.label())?;
        let mut values = metric_values([("label_mismatches", 0.0)]);
        for f in &manifest.files {
            values.insert(format!("count.{}", f.name), f.count as f64);
        }
        log.append(Stage::Corpus.label(), "built", 0, &values)?;
        Ok(manifest)
    }

    /// Recomputes the matching rule over every slice whose labels are
    /// noise-free by construction and counts disagreements.
    fn verify_labels(&self, bundle: &DatasetBundle) -> Result<usize> {
        let sampler = self.sampler();
        let mut mismatches = 0usize;
        for e in &bundle.sft {
            if sampler.match_label(&e.cv, &e.jd) != 1 {
                mismatches += 1;
            }
        }
        for t in &bundle.rmt {
            if sampler.match_label(&t.cv, &t.jd_pos) != 1
                || sampler.match_label(&t.cv, &t.jd_neg) != 0
            {
                mismatches += 1;
            }
        }
        // Train and validation labels may carry configured noise; test
        // labels are exact by contract.
        for p in bundle.rec.iter().filter(|p| p.split == RecSplit::Test) {
            if sampler.match_label(&p.cv, &p.jd) != p.label {
                mismatches += 1;
            }
        }
        Ok(mismatches)
    }

    // ---- stage one: supervised fine-tuning ------------------------

    /// Trains the generator on matched CV→JD pairs. `resume` initializes
    /// from an existing generator checkpoint instead of a seeded random
    /// init.
    pub fn run_sft(&self, resume: Option<&Path>) -> Result<SftReport> {
        self.prepare()?;
        let bundle = self.load_bundle()?;
        let instances = self.training_instances(&bundle)?;
        let (train, heldout) = split_tail(&instances, HELDOUT_FRACTION);
        let seed = self.config.stage_seed(Stage::Sft);
        let mut model = match resume {
            Some(path) => GeneratorModel::load(path, ModelRole::Generator)?,
            None => GeneratorModel::new(self.config.generator.with_vocab(self.vocab.len()), seed)?,
        };
        let mut cfg = self.config.sft.clone();
        cfg.seed = seed;
        let report = train_sft(&mut model, train, heldout, &cfg)?;
        model.save(&self.checkpoint_path(CKPT_SFT), ModelRole::Generator)?;

        let log = self.log(Stage::Sft.label())?;
        log.append(
            Stage::Sft.label(),
            "initial",
            0,
            &metric_values([("heldout_loss", report.initial_heldout_loss)]),
        )?;
        for e in &report.epochs {
            log.append(
                Stage::Sft.label(),
                "epoch",
                e.epoch as u64,
                &metric_values([("train_loss", e.train_loss), ("heldout_loss", e.heldout_loss)]),
            )?;
        }
        log.append(
            Stage::Sft.label(),
            "done",
            report.epochs.len() as u64,
            &metric_values([
                ("final_heldout_loss", report.final_heldout_loss()),
                ("heldout_perplexity", report.final_heldout_loss().exp()),
            ]),
        )?;
        Ok(report)
    }

    // ---- stage two: reward model ----------------------------------

    pub fn run_rmt(&self, resume: Option<&Path>) -> Result<RmtReport> {
        self.prepare()?;
        let bundle = self.load_bundle()?;
        let (train, heldout) = split_tail(&bundle.rmt, HELDOUT_FRACTION);
        let seed = self.config.stage_seed(Stage::Rmt);
        let mut model = match resume {
            Some(path) => RewardModel::load(path)?,
            None => RewardModel::new(self.config.reward.with_vocab(self.vocab.len()), seed, SEP)?,
        };
        let mut cfg = self.config.rmt.clone();
        cfg.seed = seed;
        let sampler = self.sampler();
        let resample = |cv: &CVDoc, s: u64| sampler.sample_jd_for_cv(cv, 0, s);
        let report = train_reward(&mut model, train, heldout, &cfg, Some(&resample))?;
        model.save(&self.checkpoint_path(CKPT_RMT))?;

        let log = self.log(Stage::Rmt.label())?;
        log.append(
            Stage::Rmt.label(),
            "initial",
            0,
            &metric_values([("heldout_accuracy", report.initial_heldout_accuracy)]),
        )?;
        for e in &report.epochs {
            log.append(
                Stage::Rmt.label(),
                "epoch",
                e.epoch as u64,
                &metric_values([
                    ("train_loss", e.train_loss),
                    ("heldout_accuracy", e.heldout_accuracy),
                ]),
            )?;
        }
        log.append(
            Stage::Rmt.label(),
            "done",
            report.epochs.len() as u64,
            &metric_values([("final_heldout_accuracy", report.final_heldout_accuracy())]),
        )?;
        Ok(report)
    }

    // ---- stage three: alignment -----------------------------------

    /// Aligns the actor against the trained reward model. Requires the
    /// SFT and reward checkpoints; `resume` restarts from a previously
    /// saved actor instead of the SFT weights.
    pub fn run_ppo(&self, resume: Option<&Path>) -> Result<PpoReport> {
        self.prepare()?;
        let sft_path = self.require(
            self.checkpoint_path(CKPT_SFT),
            "train the sft stage first; alignment starts from its weights",
        )?;
        let rmt_path = self.require(
            self.checkpoint_path(CKPT_RMT),
            "train the rmt stage first; alignment needs its reward model",
        )?;
        let bundle = self.load_bundle()?;
        let reference = GeneratorModel::load(&sft_path, ModelRole::Generator)?;
        let reward = RewardModel::load(&rmt_path)?;
        let mut actor = match resume {
            Some(path) => GeneratorModel::load(path, ModelRole::Actor)?,
            None => reference.deep_clone(),
        };
        let seed = self.config.stage_seed(Stage::Ppo);
        let mut critic = CriticModel::new(
            self.config.critic.with_vocab(self.vocab.len()),
            derive_seed_indexed(seed, 1),
        )?;
        let inputs: Vec<RolloutInput> = bundle
            .rl_cvs
            .iter()
            .map(|cv| {
                Ok(RolloutInput {
                    cv_tokens: cv.tokens.clone(),
                    prompt_tokens: self.inference_prompt(cv)?.tokens,
                })
            })
            .collect::<Result<_>>()?;
        let mut cfg = self.config.ppo.clone();
        cfg.seed = seed;
        let report = ppo_train(&mut actor, &mut critic, &reference, &reward, &inputs, &cfg)?;
        actor.save(&self.checkpoint_path(CKPT_PPO_ACTOR), ModelRole::Actor)?;
        critic.save(&self.checkpoint_path(CKPT_PPO_CRITIC))?;

        let log = self.log(Stage::Ppo.label())?;
        for i in &report.iterations {
            log.append(
                Stage::Ppo.label(),
                "iteration",
                i.iteration as u64,
                &metric_values([
                    ("mean_score", i.mean_score),
                    ("mean_kl", i.mean_kl),
                    ("actor_loss", i.mean_actor_loss),
                    ("critic_loss", i.mean_critic_loss),
                ]),
            )?;
        }
        if let (Some(first), Some(last)) = (report.iterations.first(), report.iterations.last()) {
            log.append(
                Stage::Ppo.label(),
                "done",
                report.iterations.len() as u64,
                &metric_values([
                    ("initial_mean_score", first.mean_score),
                    ("final_mean_score", last.mean_score),
                    ("final_mean_kl", last.mean_kl),
                ]),
            )?;
        }
        Ok(report)
    }

    // ---- recommender training -------------------------------------

    fn rec_split(&self, bundle: &DatasetBundle, split: RecSplit) -> Vec<RecPair> {
        bundle.rec.iter().filter(|p| p.split == split).cloned().collect()
    }

    fn rec_examples(
        &self,
        pairs: &[RecPair],
        gens: Option<(&BTreeMap<u64, Vec<GenRecord>>, usize)>,
    ) -> Result<Vec<RecExample>> {
        pairs
            .iter()
            .map(|p| {
                let mut e = RecExample::from_pair(p);
                if let Some((cache, n)) = gens {
                    let rows = cache.get(&p.cv.seeker.0).ok_or_else(|| {
                        Error::Dataset(format!(
                            "seeker {} has no cached generations; rerun generate",
                            p.cv.seeker.0
                        ))
                    })?;
                    if rows.len() < n {
                        return Err(Error::Dataset(format!(
                            "seeker {} has {} cached generations, {n} needed",
                            p.cv.seeker.0,
                            rows.len()
                        )));
                    }
                    e.generated = rows[..n].iter().map(|r| r.tokens.clone()).collect();
                }
                Ok(e)
            })
            .collect()
    }

    /// Trains the plain (non-enhanced) recommender in its configured
    /// predictor flavour.
    pub fn run_rec(&self, resume: Option<&Path>) -> Result<RecReport> {
        self.prepare()?;
        let bundle = self.load_bundle()?;
        let train = self.rec_examples(&self.rec_split(&bundle, RecSplit::Train), None)?;
        let val = self.rec_examples(&self.rec_split(&bundle, RecSplit::Val), None)?;
        let test = self.rec_examples(&self.rec_split(&bundle, RecSplit::Test), None)?;
        let seed = self.config.stage_seed(Stage::Rec);
        let mut model = match resume {
            Some(path) => RecModel::load(path)?,
            None => RecModel::new(
                self.config.rec_model.model_config(self.vocab.len(), false),
                seed,
            )?,
        };
        let mut cfg = self.config.rec_train.clone();
        cfg.seed = seed;
        let report = train_rec(&mut model, &train, &val, &cfg)?;
        model.save(&self.checkpoint_path(CKPT_REC))?;
        let test_auc = rec_auc(&model, &test)?;

        let log = self.log(Stage::Rec.label())?;
        log.append(
            Stage::Rec.label(),
            "initial",
            0,
            &metric_values([("val_auc", report.initial_val_auc)]),
        )?;
        for e in &report.epochs {
            log.append(
                Stage::Rec.label(),
                "epoch",
                e.epoch as u64,
                &metric_values([("train_loss", e.train_loss), ("val_auc", e.val_auc)]),
            )?;
        }
        log.append(
            Stage::Rec.label(),
            "done",
            report.epochs.len() as u64,
            &metric_values([
                ("best_val_auc", report.best_val_auc),
                ("best_epoch", report.best_epoch as f64),
                ("test_auc", test_auc),
            ]),
        )?;
        Ok(report)
    }

    // ---- generation caches ----------------------------------------

    /// Per-(seeker, index) sampling seed, shared by every generator
    /// source so SFT and aligned outputs are paired draw for draw.
    fn generation_seed(&self, seeker: u64, index: usize) -> u64 {
        let base = derive_seed(self.config.seed, "generate");
        derive_seed_indexed(derive_seed_indexed(base, seeker), index as u64)
    }

    fn generate_for_cvs(
        &self,
        model: &GeneratorModel,
        cvs: &[CVDoc],
    ) -> Result<Vec<GenRecord>> {
        let per_cv = self.config.generation.per_cv;
        let rows: Vec<Vec<GenRecord>> = cvs
            .par_iter()
            .map(|cv| {
                let prompt = self.inference_prompt(cv)?;
                (0..per_cv)
                    .map(|index| {
                        let mut cfg = self.config.generation.sampling.clone();
                        cfg.seed = self.generation_seed(cv.seeker.0, index);
                        let out = generate(model, prompt.prompt_tokens(), &cfg)?;
                        let eos_terminated = out.tokens.last() == Some(&EOS);
                        Ok(GenRecord {
                            seeker: cv.seeker.0,
                            index,
                            text: self.vocab.decode(&out.tokens)?,
                            tokens: out.tokens,
                            eos_terminated,
                            seed: cfg.seed,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(rows.into_iter().flatten().collect())
    }

    /// Fills both generation caches for one source: JDs for every
    /// distinct recommendation seeker and for the held-out evaluation
    /// CVs.
    pub fn run_generate(&self, source: GeneratorSource) -> Result<GenerateSummary> {
        self.prepare()?;
        let ckpt = self.require(
            self.checkpoint_path(source.checkpoint()),
            match source {
                GeneratorSource::Sft => "train the sft stage first",
                GeneratorSource::Ppo => "train the ppo stage first",
            },
        )?;
        let model = GeneratorModel::load(&ckpt, source.role())?;

        let corpus = self.corpus_dir();
        let (rec_records, rec_skipped): (Vec<io::RecRecord>, usize) =
            read_jsonl_lenient(&corpus.join(io::REC_FILE), "rec")?;
        let (eval_records, eval_skipped): (Vec<io::CvRecord>, usize) =
            read_jsonl_lenient(&corpus.join(io::EVAL_FILE), "cv")?;
        let mut rec_cvs: BTreeMap<u64, CVDoc> = BTreeMap::new();
        for r in &rec_records {
            rec_cvs.entry(r.cv.seeker).or_insert_with(|| (&r.cv).into());
        }
        let rec_cvs: Vec<CVDoc> = rec_cvs.into_values().collect();
        let eval_cvs: Vec<CVDoc> = eval_records.iter().map(CVDoc::from).collect();
        let skipped = rec_skipped + eval_skipped;
        if skipped > 0 {
            eprintln!("warning: skipped {skipped} malformed records while reading CV inputs");
        }

        let rec_gen = self.generate_for_cvs(&model, &rec_cvs)?;
        let eval_gen = self.generate_for_cvs(&model, &eval_cvs)?;
        let eos_count = rec_gen
            .iter()
            .chain(&eval_gen)
            .filter(|g| g.eos_terminated)
            .count();
        let total = rec_gen.len() + eval_gen.len();
        io::write_jsonl(&self.generations_path("rec", source), "gen", &rec_gen)?;
        io::write_jsonl(&self.generations_path("eval", source), "gen", &eval_gen)?;

        let summary = GenerateSummary {
            source,
            rec_cvs: rec_cvs.len(),
            eval_cvs: eval_cvs.len(),
            per_cv: self.config.generation.per_cv,
            eos_fraction: eos_count as f64 / total.max(1) as f64,
            skipped,
        };
        let log = self.log("generate")?;
        log.append(
            "generate",
            source.label(),
            0,
            &metric_values([
                ("rec_cvs", summary.rec_cvs as f64),
                ("eval_cvs", summary.eval_cvs as f64),
                ("per_cv", summary.per_cv as f64),
                ("eos_fraction", summary.eos_fraction),
                ("skipped", summary.skipped as f64),
            ]),
        )?;
        Ok(summary)
    }

    fn load_generations(
        &self,
        set: &str,
        source: GeneratorSource,
        min_per_cv: usize,
    ) -> Result<BTreeMap<u64, Vec<GenRecord>>> {
        let path = self.require(
            self.generations_path(set, source),
            "run the generate stage for this source first",
        )?;
        let (records, skipped): (Vec<GenRecord>, usize) = read_jsonl_lenient(&path, "gen")?;
        if skipped > 0 {
            eprintln!(
                "warning: skipped {skipped} malformed records in {}",
                path.display()
            );
        }
        let mut by_seeker: BTreeMap<u64, Vec<GenRecord>> = BTreeMap::new();
        for r in records {
            by_seeker.entry(r.seeker).or_default().push(r);
        }
        for rows in by_seeker.values_mut() {
            rows.sort_by_key(|r| r.index);
        }
        if let Some((seeker, rows)) = by_seeker.iter().find(|(_, rows)| rows.len() < min_per_cv) {
            return Err(Error::Dataset(format!(
                "{}: seeker {seeker} has {} generations, {min_per_cv} needed",
                path.display(),
                rows.len()
            )));
        }
        Ok(by_seeker)
    }

    // ---- evaluation: generation quality ---------------------------

    /// Judges aligned-actor generations against SFT generations over
    /// the evaluation CVs and compares their reward-model scores.
    pub fn run_eval_quality(&self) -> Result<QualityReport> {
        self.prepare()?;
        let bundle = self.load_bundle()?;
        let sft_gens = self.load_generations("eval", GeneratorSource::Sft, 1)?;
        let ppo_gens = self.load_generations("eval", GeneratorSource::Ppo, 1)?;
        let reward = RewardModel::load(&self.require(
            self.checkpoint_path(CKPT_RMT),
            "train the rmt stage first; quality evaluation scores with its reward model",
        )?)?;
        let reference = GeneratorModel::load(
            &self.require(self.checkpoint_path(CKPT_SFT), "train the sft stage first")?,
            ModelRole::Generator,
        )?;
        let actor = GeneratorModel::load(
            &self.require(self.checkpoint_path(CKPT_PPO_ACTOR), "train the ppo stage first")?,
            ModelRole::Actor,
        )?;

        let judge = RubricJudge::new(&self.ontology, &self.vocab, self.config.rubric.clone())?;
        let mut first_ppo = Vec::new();
        let mut first_sft = Vec::new();
        for cv in &bundle.eval_cvs {
            let pick = |cache: &BTreeMap<u64, Vec<GenRecord>>| -> Result<Vec<usize>> {
                cache
                    .get(&cv.seeker.0)
                    .and_then(|rows| rows.first())
                    .map(|r| r.tokens.clone())
                    .ok_or_else(|| {
                        Error::Dataset(format!(
                            "evaluation seeker {} missing from the generation cache",
                            cv.seeker.0
                        ))
                    })
            };
            first_ppo.push(pick(&ppo_gens)?);
            first_sft.push(pick(&sft_gens)?);
        }
        let outcomes = tournament_outcomes(&judge, &bundle.eval_cvs, &first_ppo, &first_sft)?;
        let tournament = report_from_outcomes(&outcomes);
        let (advantage_low, advantage_high) =
            bootstrap_advantage(&outcomes, 1000, self.config.stage_seed(Stage::Eval))?;

        let mean_reward = |cache: &BTreeMap<u64, Vec<GenRecord>>| -> Result<f64> {
            let scored: Vec<f64> = bundle
                .eval_cvs
                .par_iter()
                .map(|cv| {
                    let rows = &cache[&cv.seeker.0];
                    let mut total = 0.0;
                    for r in rows {
                        total += reward.reward_score(&cv.tokens, &r.tokens)?;
                    }
                    Ok(total / rows.len() as f64)
                })
                .collect::<Result<_>>()?;
            Ok(scored.iter().sum::<f64>() / scored.len() as f64)
        };
        let mean_reward_sft = mean_reward(&sft_gens)?;
        let mean_reward_ppo = mean_reward(&ppo_gens)?;

        let kls: Vec<f64> = bundle
            .eval_cvs
            .par_iter()
            .map(|cv| {
                let prompt = self.inference_prompt(cv)?.tokens;
                let rows = &ppo_gens[&cv.seeker.0];
                let mut total = 0.0;
                for r in rows {
                    let sample = RolloutSample {
                        cv_tokens: cv.tokens.clone(),
                        prompt_tokens: prompt.clone(),
                        jd_tokens: r.tokens.clone(),
                        actor_logprobs: actor.sequence_logprobs(&prompt, &r.tokens)?,
                        reference_logprobs: reference.sequence_logprobs(&prompt, &r.tokens)?,
                        score: 0.0,
                        kl: 0.0,
                        reward: 0.0,
                        value: 0.0,
                        advantage: 0.0,
                    };
                    total += kl_estimate(&sample)?;
                }
                Ok(total / rows.len() as f64)
            })
            .collect::<Result<_>>()?;
        let mean_kl_ppo = kls.iter().sum::<f64>() / kls.len() as f64;

        let report = QualityReport {
            tournament,
            advantage_low,
            advantage_high,
            mean_reward_sft,
            mean_reward_ppo,
            mean_kl_ppo,
            kl_ceiling: self.config.ppo_kl_ceiling,
        };
        self.write_report("quality", &report)?;
        let log = self.log(Stage::Eval.label())?;
        log.append(
            Stage::Eval.label(),
            "quality",
            0,
            &metric_values([
                ("win_rate", report.tournament.win_rate),
                ("tie_rate", report.tournament.tie_rate),
                ("lose_rate", report.tournament.lose_rate),
                ("advantage", report.tournament.advantage),
                ("mean_reward_sft", mean_reward_sft),
                ("mean_reward_ppo", mean_reward_ppo),
                ("mean_kl_ppo", mean_kl_ppo),
            ]),
        )?;
        Ok(report)
    }

    // ---- evaluation: recommendation table -------------------------

    fn train_rec_cell(
        &self,
        predictor: PredictorKind,
        gens: Option<(&BTreeMap<u64, Vec<GenRecord>>, usize)>,
        bundle: &DatasetBundle,
        seed: u64,
    ) -> Result<(RecModel, RecReport, f64)> {
        let train = self.rec_examples(&self.rec_split(bundle, RecSplit::Train), gens)?;
        let val = self.rec_examples(&self.rec_split(bundle, RecSplit::Val), gens)?;
        let test = self.rec_examples(&self.rec_split(bundle, RecSplit::Test), gens)?;
        let mut model_cfg = self
            .config
            .rec_model
            .model_config(self.vocab.len(), gens.is_some());
        model_cfg.predictor = predictor;
        let mut model = RecModel::new(model_cfg, seed)?;
        let mut train_cfg = self.config.rec_train.clone();
        train_cfg.seed = seed;
        let report = train_rec(&mut model, &train, &val, &train_cfg)?;
        let test_auc = rec_auc(&model, &test)?;
        Ok((model, report, test_auc))
    }

    /// Trains and tests the full recommendation table: each predictor
    /// flavour, plain and enhanced with each generation source.
    pub fn run_eval_rec(&self) -> Result<RecEvalReport> {
        self.prepare()?;
        let bundle = self.load_bundle()?;
        let n = self.config.generation.enhance_with;
        let sft_gens = self.load_generations("rec", GeneratorSource::Sft, n)?;
        let ppo_gens = self.load_generations("rec", GeneratorSource::Ppo, n)?;
        let eval_seed = self.config.stage_seed(Stage::Eval);

        let mut cells = Vec::new();
        let log = self.log(Stage::Eval.label())?;
        for (idx, predictor) in [PredictorKind::Mlp, PredictorKind::Dot].into_iter().enumerate() {
            let sources: [(&str, Option<(&BTreeMap<u64, Vec<GenRecord>>, usize)>); 3] = [
                ("base", None),
                ("sft", Some((&sft_gens, n))),
                ("ppo", Some((&ppo_gens, n))),
            ];
            for (s_idx, (label, gens)) in sources.into_iter().enumerate() {
                let seed = derive_seed_indexed(eval_seed, (idx * 3 + s_idx) as u64);
                let (model, report, test_auc) =
                    self.train_rec_cell(predictor, gens, &bundle, seed)?;
                let kind = predictor_label(predictor);
                model.save(&self.checkpoint_path(&format!("rec_{kind}_{label}")))?;
                log.append(
                    Stage::Eval.label(),
                    "rec_cell",
                    (idx * 3 + s_idx) as u64,
                    &metric_values([
                        (&format!("{kind}_{label}_val_auc"), report.best_val_auc),
                        (&format!("{kind}_{label}_test_auc"), test_auc),
                    ]),
                )?;
                cells.push(RecCell {
                    predictor,
                    enhancement: label.to_string(),
                    best_val_auc: report.best_val_auc,
                    test_auc,
                });
            }
        }
        let report = RecEvalReport { cells };
        self.write_report("rec", &report)?;
        Ok(report)
    }

    // ---- evaluation: cold start -----------------------------------

    /// Scores the saved base and aligned-enhanced recommenders on the
    /// test split, whole and restricted to cold-start seekers.
    pub fn run_eval_coldstart(&self) -> Result<ColdStartEvalReport> {
        self.prepare()?;
        let bundle = self.load_bundle()?;
        let kind = predictor_label(self.config.rec_model.predictor);
        let base_path = self.require(
            self.checkpoint_path(&format!("rec_{kind}_base")),
            "run the rec evaluation first; cold-start analysis reuses its checkpoints",
        )?;
        let enh_path = self.require(
            self.checkpoint_path(&format!("rec_{kind}_ppo")),
            "run the rec evaluation first; cold-start analysis reuses its checkpoints",
        )?;
        let base = RecModel::load(&base_path)?;
        let enhanced = RecModel::load(&enh_path)?;
        let n = self.config.generation.enhance_with;
        let ppo_gens = self.load_generations("rec", GeneratorSource::Ppo, n)?;

        let test_pairs = self.rec_split(&bundle, RecSplit::Test);
        let labels: Vec<u8> = test_pairs.iter().map(|p| p.label).collect();
        let flags: Vec<bool> = test_pairs.iter().map(|p| p.cold_start).collect();
        let base_examples = self.rec_examples(&test_pairs, None)?;
        let enh_examples = self.rec_examples(&test_pairs, Some((&ppo_gens, n)))?;
        let base_scores = rec_probabilities(&base, &base_examples)?;
        let enh_scores = rec_probabilities(&enhanced, &enh_examples)?;
        let base_report = cold_start_slice(&base_scores, &labels, &flags)?;
        let enh_report = cold_start_slice(&enh_scores, &labels, &flags)?;

        let report = ColdStartEvalReport {
            full_gap: enh_report.full.auc - base_report.full.auc,
            cold_gap: enh_report.cold.auc - base_report.cold.auc,
            base: base_report,
            enhanced: enh_report,
        };
        self.write_report("coldstart", &report)?;
        let log = self.log(Stage::Eval.label())?;
        log.append(
            Stage::Eval.label(),
            "coldstart",
            0,
            &metric_values([
                ("base_full_auc", report.base.full.auc),
                ("base_cold_auc", report.base.cold.auc),
                ("enhanced_full_auc", report.enhanced.full.auc),
                ("enhanced_cold_auc", report.enhanced.cold.auc),
                ("full_gap", report.full_gap),
                ("cold_gap", report.cold_gap),
            ]),
        )?;
        Ok(report)
    }

    // ---- evaluation: generation-count sweep -----------------------

    /// Retrains the enhanced recommender with an increasing number of
    /// fused generations, reusing prefixes of the aligned cache.
    pub fn run_eval_gen_sweep(&self) -> Result<GenSweepReport> {
        self.prepare()?;
        let bundle = self.load_bundle()?;
        let per_cv = self.config.generation.per_cv;
        let counts: Vec<usize> = SWEEP_COUNTS.iter().copied().filter(|&n| n <= per_cv).collect();
        if counts.is_empty() {
            return Err(Error::Config(format!(
                "generation.per_cv = {per_cv} leaves no sweep points"
            )));
        }
        let ppo_gens = self.load_generations("rec", GeneratorSource::Ppo, *counts.last().unwrap())?;
        let eval_seed = self.config.stage_seed(Stage::Eval);

        let mut points = Vec::new();
        let log = self.log(Stage::Eval.label())?;
        for &n in &counts {
            let seed = derive_seed_indexed(eval_seed, 100 + n as u64);
            let (_, report, test_auc) = self.train_rec_cell(
                self.config.rec_model.predictor,
                Some((&ppo_gens, n)),
                &bundle,
                seed,
            )?;
            log.append(
                Stage::Eval.label(),
                "gen_sweep",
                n as u64,
                &metric_values([("test_auc", test_auc), ("best_val_auc", report.best_val_auc)]),
            )?;
            points.push(SweepPoint {
                n,
                best_val_auc: report.best_val_auc,
                test_auc,
            });
        }
        let report = GenSweepReport { points };
        self.write_report("gen_sweep", &report)?;
        Ok(report)
    }
}

fn predictor_label(kind: PredictorKind) -> &'static str {
    match kind {
        PredictorKind::Mlp => "mlp",
        PredictorKind::Dot => "dot",
    }
}

/// Splits a slice into a leading training part and a trailing holdout
/// of at least one element.
fn split_tail<T>(items: &[T], holdout_fraction: f64) -> (&[T], &[T]) {
    let holdout = ((items.len() as f64 * holdout_fraction).round() as usize)
        .clamp(1, items.len().saturating_sub(1).max(1));
    let cut = items.len() - holdout.min(items.len());
    (&items[..cut], &items[cut..])
}

/// Reads a header-checked JSONL file, skipping malformed records with a
/// warning instead of failing the whole run. Returns the records and
/// the number skipped.
pub fn read_jsonl_lenient<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<(Vec<T>, usize)> {
    let file = fs::File::open(path).map_err(|e| Error::MissingPrerequisite {
        path: path.to_path_buf(),
        hint: format!("input file not readable ({e})"),
    })?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| Error::Dataset(format!("{}: empty file", path.display())))?;
    let header: FileHeader = serde_json::from_str(&header_line?)
        .map_err(|e| Error::Dataset(format!("{}: bad header: {e}", path.display())))?;
    if header.schema_version != DATASET_SCHEMA_VERSION || header.kind != kind {
        return Err(Error::Dataset(format!(
            "{}: holds {:?} records at schema {}, expected {kind:?} at schema {DATASET_SCHEMA_VERSION}",
            path.display(),
            header.kind,
            header.schema_version
        )));
    }
    let mut out = Vec::with_capacity(header.count);
    let mut skipped = 0usize;
    for (line_no, line) in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(record) => out.push(record),
            Err(e) => {
                skipped += 1;
                eprintln!(
                    "warning: {}:{}: skipped malformed record: {e}",
                    path.display(),
                    line_no + 1
                );
            }
        }
    }
    Ok((out, skipped))
}
