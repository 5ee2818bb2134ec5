//! Evaluation: ranking metrics, the deterministic generation-quality
//! judge, tournament aggregation, and cold-start slicing.

pub mod judge;
pub mod metrics;
pub mod slice;
pub mod tournament;

pub use judge::{
    live_judge_prompt, Judge, JudgeVerdict, RubricConfig, RubricJudge, SubScores, VerdictKind,
};
pub use metrics::{auc, logloss};
pub use slice::{cold_start_slice, ColdStartReport, SliceMetrics};
pub use tournament::{
    bootstrap_advantage, judge_both_orders, report_from_outcomes, tournament,
    tournament_outcomes, PairOutcome, TournamentReport,
};
