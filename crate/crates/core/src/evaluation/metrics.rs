//! Ranking and calibration metrics for binary feedback.
//!
//! AUC uses midranks, so tied scores count half a concordant pair and
//! the result agrees exactly with exhaustive pair counting. LogLoss
//! clamps probabilities away from 0 and 1 before taking logs.

use crate::error::{Error, Result};

/// Probability floor applied before logs in [`logloss`].
pub const PROB_CLAMP: f64 = 1e-7;

fn check_binary(scores: &[f64], labels: &[u8], what: &str) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::value(
            what,
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.is_empty() {
        return Err(Error::value(what, "empty input"));
    }
    if let Some(bad) = labels.iter().find(|&&z| z > 1) {
        return Err(Error::value(what, format!("label {bad} is not 0/1")));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::value(what, format!("non-finite score {bad}")));
    }
    Ok(())
}

/// Probability that a uniformly random positive outscores a uniformly
/// random negative, ties counted half. Computed from midranks; equal to
/// brute-force counting over all positive/negative pairs.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_binary(scores, labels, "auc")?;
    let n_pos = labels.iter().filter(|&&z| z == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::value(
            "auc",
            format!("need both classes, found {n_pos} positives and {n_neg} negatives"),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("scores are finite"));

    // Walk groups of equal scores; every member of a group takes the
    // group's average rank (1-based).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// Mean binary cross-entropy between clamped probabilities and labels.
pub fn logloss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_binary(scores, labels, "logloss")?;
    let mut total = 0.0;
    for (&p, &z) in scores.iter().zip(labels) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total += if z == 1 { -p.ln() } else { -(1.0 - p).ln() };
    }
    Ok(total / scores.len() as f64)
}
