//! Metrics restricted to a flagged subset of scored pairs, next to the
//! same metrics on the full set.
//!
//! The intended use is cold-start analysis: pairs whose seeker was
//! withheld from recommender training carry a flag, and the gap
//! between the full-set and flagged-slice numbers shows how much of
//! the model's accuracy depends on having seen the seeker before.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::metrics::{auc, logloss};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub count: usize,
    pub auc: f64,
    pub logloss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColdStartReport {
    pub full: SliceMetrics,
    pub cold: SliceMetrics,
}

fn slice_metrics(scores: &[f64], labels: &[u8]) -> Result<SliceMetrics> {
    Ok(SliceMetrics {
        count: scores.len(),
        auc: auc(scores, labels)?,
        logloss: logloss(scores, labels)?,
    })
}

/// Scores the full set and the flagged subset. `scores` are match
/// probabilities in [0, 1]; `flags` marks the cold-start pairs.
pub fn cold_start_slice(scores: &[f64], labels: &[u8], flags: &[bool]) -> Result<ColdStartReport> {
    if scores.len() != labels.len() || scores.len() != flags.len() {
        return Err(Error::Eval(format!(
            "cold-start inputs disagree on length: {} scores, {} labels, {} flags",
            scores.len(),
            labels.len(),
            flags.len()
        )));
    }
    let mut cold_scores = Vec::new();
    let mut cold_labels = Vec::new();
    for i in 0..scores.len() {
        if flags[i] {
            cold_scores.push(scores[i]);
            cold_labels.push(labels[i]);
        }
    }
    if cold_scores.is_empty() {
        return Err(Error::Eval("cold-start slice is empty, nothing is flagged".into()));
    }
    Ok(ColdStartReport {
        full: slice_metrics(scores, labels)?,
        cold: slice_metrics(&cold_scores, &cold_labels)?,
    })
}
