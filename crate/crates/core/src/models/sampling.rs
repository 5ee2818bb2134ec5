//! Seeded autoregressive decoding with recorded log-probabilities.
//!
//! Each step recomputes the full forward pass over the prefix (no
//! key/value cache at this scale), applies temperature and a top-k
//! cutoff to pick the next token, and records the token's
//! log-probability under the untempered distribution. Those recorded
//! values are what the alignment stage treats as the policy's own
//! scores, so they must agree with [`GeneratorModel::sequence_logprobs`]
//! down to the last bit; a test holds the two paths together.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ontology::EOS;
use crate::error::{Error, Result};
use crate::models::generator::GeneratorModel;
use crate::tensor::kernels::log_softmax_rows;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SamplingConfig {
    /// Softmax temperature. Zero selects greedy argmax decoding.
    pub temperature: f64,
    /// Sample only among the k highest-scoring tokens.
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub eos_token: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            temperature: 0.8,
            top_k: 20,
            max_new_tokens: 24,
            eos_token: EOS,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Config(format!(
                "sampling temperature {} must be finite and non-negative",
                self.temperature
            )));
        }
        if self.top_k == 0 {
            return Err(Error::Config("sampling top_k must be at least 1".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("sampling max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSequence {
    /// Sampled tokens, including the terminating EOS when one was drawn.
    pub tokens: Vec<usize>,
    /// Log-probability of each sampled token under the model's full
    /// (untempered) next-token distribution.
    pub logprobs: Vec<f64>,
}

/// Index of the maximal logit; ties resolve to the lowest index so
/// greedy decoding needs no randomness.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Picks the next token from one row of logits.
fn pick_token(row: &[f64], cfg: &SamplingConfig, rng: &mut ChaCha8Rng) -> usize {
    if cfg.temperature == 0.0 || cfg.top_k == 1 {
        return argmax(row);
    }
    // Highest logits first, ties broken toward the lower index so the
    // cutoff is deterministic.
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    order.truncate(cfg.top_k.min(row.len()));

    let max = row[order[0]];
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| ((row[i] - max) / cfg.temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.gen::<f64>() * total;
    for (&token, w) in order.iter().zip(&weights) {
        draw -= w;
        if draw <= 0.0 {
            return token;
        }
    }
    *order.last().expect("top_k >= 1")
}

/// Samples up to `max_new_tokens` continuation tokens for a prompt.
/// Identical (weights, prompt, config) produce identical output; the
/// temperature-zero mode is deterministic regardless of seed.
pub fn generate(
    model: &GeneratorModel,
    prompt: &[usize],
    cfg: &SamplingConfig,
) -> Result<GeneratedSequence> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(Error::value("generate", "prompt is empty"));
    }
    if prompt.len() + cfg.max_new_tokens > model.config.max_seq_len {
        return Err(Error::value(
            "generate",
            format!(
                "prompt of {} plus {} new tokens exceeds max sequence length {}",
                prompt.len(),
                cfg.max_new_tokens,
                model.config.max_seq_len
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut prefix = prompt.to_vec();
    let mut tokens = Vec::new();
    let mut logprobs = Vec::new();
    for _ in 0..cfg.max_new_tokens {
        let logits = model.forward_logits(&prefix)?;
        let last = logits.rows() - 1;
        let row: Vec<f64> = (0..logits.cols()).map(|v| logits.at(last, v)).collect();
        let token = pick_token(&row, cfg, &mut rng);
        let lp = log_softmax_rows(&row, 1, row.len())[token];
        prefix.push(token);
        tokens.push(token);
        logprobs.push(lp);
        if token == cfg.eos_token {
            break;
        }
    }
    Ok(GeneratedSequence { tokens, logprobs })
}
