//! Head-to-head comparison of two generation systems over a shared CV
//! list.
//!
//! Each pair is judged twice, once in each presentation order, and the
//! two verdicts must agree for either side to be credited; any
//! disagreement is scored as a tie. With a positionally biased judge
//! this collapses every pair to a tie instead of rewarding whichever
//! side happens to be shown first.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::docs::CVDoc;
use crate::error::{Error, Result};
use crate::evaluation::judge::{Judge, VerdictKind};

/// Order-debiased outcome of one pair, from the first system's
/// perspective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairOutcome {
    Win,
    Tie,
    Lose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TournamentReport {
    pub win_rate: f64,
    pub tie_rate: f64,
    pub lose_rate: f64,
    /// `win_rate - lose_rate`; positive means the first system is
    /// ahead.
    pub advantage: f64,
    pub count: usize,
}

/// Judge one pair in both presentation orders and combine the
/// verdicts.
pub fn judge_both_orders<J: Judge>(
    judge: &J,
    cv: &CVDoc,
    jd_a: &[usize],
    jd_b: &[usize],
) -> Result<PairOutcome> {
    let forward = judge.judge(cv, jd_a, jd_b)?.verdict;
    let reverse = judge.judge(cv, jd_b, jd_a)?.verdict;
    Ok(match (forward, reverse) {
        (VerdictKind::Win, VerdictKind::Lose) => PairOutcome::Win,
        (VerdictKind::Lose, VerdictKind::Win) => PairOutcome::Lose,
        _ => PairOutcome::Tie,
    })
}

/// Judge every aligned (cv, a, b) triple and tally the outcomes.
pub fn tournament<J: Judge>(
    judge: &J,
    cvs: &[CVDoc],
    system_a: &[Vec<usize>],
    system_b: &[Vec<usize>],
) -> Result<TournamentReport> {
    let outcomes = tournament_outcomes(judge, cvs, system_a, system_b)?;
    Ok(report_from_outcomes(&outcomes))
}

/// The per-pair outcomes behind a report, for callers that want to
/// resample them.
pub fn tournament_outcomes<J: Judge>(
    judge: &J,
    cvs: &[CVDoc],
    system_a: &[Vec<usize>],
    system_b: &[Vec<usize>],
) -> Result<Vec<PairOutcome>> {
    if cvs.is_empty() {
        return Err(Error::Eval("tournament needs at least one pair".into()));
    }
    if cvs.len() != system_a.len() || cvs.len() != system_b.len() {
        return Err(Error::Eval(format!(
            "tournament inputs disagree on length: {} cvs, {} from system a, {} from system b",
            cvs.len(),
            system_a.len(),
            system_b.len()
        )));
    }
    (0..cvs.len())
        .into_par_iter()
        .map(|i| judge_both_orders(judge, &cvs[i], &system_a[i], &system_b[i]))
        .collect()
}

/// Tallies rates from per-pair outcomes.
pub fn report_from_outcomes(outcomes: &[PairOutcome]) -> TournamentReport {
    let n = outcomes.len() as f64;
    let count_of = |kind: PairOutcome| outcomes.iter().filter(|&&o| o == kind).count() as f64;
    let win_rate = count_of(PairOutcome::Win) / n;
    let tie_rate = count_of(PairOutcome::Tie) / n;
    let lose_rate = count_of(PairOutcome::Lose) / n;
    TournamentReport {
        win_rate,
        tie_rate,
        lose_rate,
        advantage: win_rate - lose_rate,
        count: outcomes.len(),
    }
}

/// Percentile bootstrap interval for the advantage, resampling pairs
/// with replacement. Returns `(low, high)` at the 2.5th and 97.5th
/// percentiles.
pub fn bootstrap_advantage(
    outcomes: &[PairOutcome],
    rounds: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if outcomes.is_empty() {
        return Err(Error::Eval("bootstrap needs at least one outcome".into()));
    }
    if rounds == 0 {
        return Err(Error::Eval("bootstrap needs at least one round".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut advantages: Vec<f64> = (0..rounds)
        .map(|_| {
            let resampled: Vec<PairOutcome> = (0..outcomes.len())
                .map(|_| outcomes[rng.gen_range(0..outcomes.len())])
                .collect();
            report_from_outcomes(&resampled).advantage
        })
        .collect();
    advantages.sort_by(|a, b| a.total_cmp(b));
    let pick = |q: f64| {
        let idx = (q * (rounds - 1) as f64).round() as usize;
        advantages[idx.min(rounds - 1)]
    };
    Ok((pick(0.025), pick(0.975)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::docs::{CorpusSampler, SeekerId};
    use crate::corpus::ontology::{SkillOntology, Vocab};
    use crate::evaluation::judge::{JudgeVerdict, RubricConfig, RubricJudge, SubScores};

    fn world() -> (SkillOntology, Vocab) {
        let o = SkillOntology::default_world();
        let v = Vocab::build(&o, &[]);
        (o, v)
    }

    fn fixtures(n: u64) -> (Vec<CVDoc>, Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let (o, v) = world();
        let s = CorpusSampler::new(&o, &v);
        let mut cvs = Vec::new();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for i in 0..n {
            let cv = s.sample_cv(SeekerId(i), 100 + i);
            a.push(s.sample_jd_for_cv(&cv, 1, 200 + i).unwrap().tokens);
            b.push(s.sample_jd_for_cv(&cv, (i % 2) as u8, 300 + i).unwrap().tokens);
            cvs.push(cv);
        }
        (cvs, a, b)
    }

    #[test]
    fn identical_systems_tie_on_every_pair() {
        let (o, v) = world();
        let judge = RubricJudge::new(&o, &v, RubricConfig::default()).unwrap();
        let (cvs, a, _) = fixtures(40);
        let report = tournament(&judge, &cvs, &a, &a).unwrap();
        assert_eq!(report.win_rate, 0.0);
        assert_eq!(report.lose_rate, 0.0);
        assert_eq!(report.tie_rate, 1.0);
        assert_eq!(report.advantage, 0.0);
        assert_eq!(report.count, 40);
    }

    #[test]
    fn rates_always_sum_to_one() {
        let (o, v) = world();
        let judge = RubricJudge::new(&o, &v, RubricConfig::default()).unwrap();
        let (cvs, a, b) = fixtures(120);
        let report = tournament(&judge, &cvs, &a, &b).unwrap();
        assert!((report.win_rate + report.tie_rate + report.lose_rate - 1.0).abs() < 1e-9);
        assert!(report.win_rate >= 0.0 && report.tie_rate >= 0.0 && report.lose_rate >= 0.0);
        assert_eq!(report.advantage, report.win_rate - report.lose_rate);
    }

    /// A judge that always prefers whichever JD it is shown first.
    struct FirstIsBest;

    impl Judge for FirstIsBest {
        fn judge(&self, _cv: &CVDoc, _a: &[usize], _b: &[usize]) -> Result<JudgeVerdict> {
            let flat = SubScores { detail: 1.0, relevance: 1.0, conciseness: 1.0 };
            Ok(JudgeVerdict {
                verdict: VerdictKind::Win,
                first: flat,
                second: flat,
                margin: 1.0,
            })
        }
    }

    #[test]
    fn order_debiasing_neutralises_a_position_biased_judge() {
        let (cvs, a, b) = fixtures(25);
        let report = tournament(&FirstIsBest, &cvs, &a, &b).unwrap();
        assert_eq!(report.tie_rate, 1.0);
        assert_eq!(report.advantage, 0.0);
    }

    #[test]
    fn a_dominant_system_sweeps_the_board() {
        let (o, v) = world();
        let s = CorpusSampler::new(&o, &v);
        let judge = RubricJudge::new(&o, &v, RubricConfig::default()).unwrap();
        let mut cvs = Vec::new();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for i in 0..20u64 {
            let cv = s.sample_cv(SeekerId(i), 400 + i);
            // Matched JDs against a fixed skeleton that never names
            // the CV's skills and skips the responsibilities section.
            a.push(s.sample_jd_for_cv(&cv, 1, 500 + i).unwrap().tokens);
            b.push(v.encode("jd title hr_specialist requirements recruiting salary salary_low").unwrap());
            cvs.push(cv);
        }
        let report = tournament(&judge, &cvs, &a, &b).unwrap();
        assert_eq!(report.win_rate, 1.0);
        assert_eq!(report.advantage, 1.0);
    }

    #[test]
    fn mismatched_or_empty_inputs_are_rejected() {
        let (o, v) = world();
        let judge = RubricJudge::new(&o, &v, RubricConfig::default()).unwrap();
        let (cvs, a, mut b) = fixtures(10);
        b.pop();
        assert!(tournament(&judge, &cvs, &a, &b).is_err());
        assert!(tournament(&judge, &[], &[], &[]).is_err());
    }

    #[test]
    fn bootstrap_brackets_the_point_estimate_deterministically() {
        let outcomes: Vec<PairOutcome> = (0..60)
            .map(|i| match i % 4 {
                0 | 1 => PairOutcome::Win,
                2 => PairOutcome::Tie,
                _ => PairOutcome::Lose,
            })
            .collect();
        let point = report_from_outcomes(&outcomes).advantage;
        let (lo, hi) = bootstrap_advantage(&outcomes, 500, 9).unwrap();
        assert!(lo <= point && point <= hi, "{lo} {point} {hi}");
        assert!(lo < hi);
        assert_eq!(bootstrap_advantage(&outcomes, 500, 9).unwrap(), (lo, hi));
        assert_ne!(bootstrap_advantage(&outcomes, 500, 10).unwrap(), (lo, hi));
    }

    #[test]
    fn bootstrap_on_a_sweep_is_degenerate() {
        let outcomes = vec![PairOutcome::Win; 30];
        assert_eq!(bootstrap_advantage(&outcomes, 100, 1).unwrap(), (1.0, 1.0));
        assert!(bootstrap_advantage(&[], 100, 1).is_err());
        assert!(bootstrap_advantage(&outcomes, 0, 1).is_err());
    }
}
