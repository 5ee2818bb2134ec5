//! Causal language model over the corpus vocabulary.
//!
//! The same struct serves as the supervised generator and, deep-copied,
//! as the policy the alignment stage optimizes. Scoring and decoding
//! share one forward graph, so the log-probabilities recorded while
//! sampling agree with the ones recomputed when scoring.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::persist::{load_checkpoint_for, save_checkpoint, ModelRole};
use crate::models::trunk::{
    check_tokens, head_forward, init_head_params, init_rng, init_trunk_params,
    trunk_forward, Bound, TransformerConfig, LN_EPS,
};
use crate::tensor::{GradTape, NodeId, ParamSet, Tensor};

#[derive(Debug)]
pub struct GeneratorModel {
    pub config: TransformerConfig,
    pub params: ParamSet,
    /// When true the output projection reuses the token embedding table
    /// instead of its own weight matrix.
    pub tied_output: bool,
}

impl GeneratorModel {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<GeneratorModel> {
        Self::with_tied_output(config, seed, false)
    }

    pub fn with_tied_output(
        config: TransformerConfig,
        seed: u64,
        tied_output: bool,
    ) -> Result<GeneratorModel> {
        config.validate()?;
        let mut rng = init_rng(seed);
        let mut params = ParamSet::new();
        init_trunk_params(&mut params, &config, &mut rng);
        if tied_output {
            let w = config.width;
            params.push("final_ln.g", Tensor::full(&[w], 1.0).expect("width is positive"));
            params.push("final_ln.b", Tensor::zeros(&[w]).expect("width is positive"));
            params.push("out.b", Tensor::zeros(&[config.vocab_size]).expect("vocab is positive"));
        } else {
            init_head_params(&mut params, &config, &mut rng, "out", config.vocab_size);
        }
        Ok(GeneratorModel {
            config,
            params,
            tied_output,
        })
    }

    /// Fresh parameter copy with no shared storage mutation hazards.
    pub fn deep_clone(&self) -> GeneratorModel {
        GeneratorModel {
            config: self.config.clone(),
            params: self.params.deep_clone(),
            tied_output: self.tied_output,
        }
    }

    /// Builds the per-position logits graph on an existing tape.
    pub fn logits_graph(
        &self,
        tape: &mut GradTape,
        bound: &Bound,
        tokens: &[usize],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let hidden = trunk_forward(tape, bound, &self.config, tokens, true, dropout_rng)?;
        if self.tied_output {
            let normed =
                tape.layer_norm(hidden, bound.id("final_ln.g"), bound.id("final_ln.b"), LN_EPS)?;
            let logits = tape.matmul_tb(normed, bound.id("emb.tok"))?;
            tape.add(logits, bound.id("out.b"))
        } else {
            head_forward(tape, bound, hidden, "out")
        }
    }

    /// Per-position vocabulary logits, shape `[len, vocab]`. Logits at
    /// position t depend only on tokens at positions up to t.
    pub fn forward_logits(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = GradTape::new();
        let bound = Bound::new(&self.params, &mut tape, false);
        let logits = self.logits_graph(&mut tape, &bound, tokens, None)?;
        Ok(tape.value(logits).clone())
    }

    /// Log-probability nodes of each target token given the prompt,
    /// shape `[target len]`. Row `prompt_len + j - 1` of the sequence
    /// logits predicts target token `j`.
    pub fn logprob_graph(
        &self,
        tape: &mut GradTape,
        bound: &Bound,
        prompt: &[usize],
        target: &[usize],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        if target.is_empty() {
            return Err(Error::value("sequence_logprobs", "target is empty"));
        }
        let mut joined = Vec::with_capacity(prompt.len() + target.len());
        joined.extend_from_slice(prompt);
        joined.extend_from_slice(target);
        check_tokens(&self.config, &joined, "prompt+target")?;
        if prompt.is_empty() {
            return Err(Error::value("sequence_logprobs", "prompt is empty"));
        }
        let logits = self.logits_graph(tape, bound, &joined, dropout_rng)?;
        let logprobs = tape.log_softmax(logits)?;
        let entries: Vec<(usize, usize)> = target
            .iter()
            .enumerate()
            .map(|(j, &t)| (prompt.len() + j - 1, t))
            .collect();
        tape.select_entries(logprobs, entries)
    }

    /// Log-probabilities of the target tokens under this model.
    pub fn sequence_logprobs(&self, prompt: &[usize], target: &[usize]) -> Result<Vec<f64>> {
        let mut tape = GradTape::new();
        let bound = Bound::new(&self.params, &mut tape, false);
        let node = self.logprob_graph(&mut tape, &bound, prompt, target, None)?;
        Ok(tape.value(node).data().to_vec())
    }

    pub fn save(&self, path: &Path, role: ModelRole) -> Result<()> {
        if !matches!(role, ModelRole::Generator | ModelRole::Actor) {
            return Err(Error::Checkpoint(format!(
                "generator weights cannot be stored under role {role}"
            )));
        }
        let extra = [("tied_output".to_string(), self.tied_output.to_string())];
        save_checkpoint(path, role, &self.config, extra.into_iter().collect(), &self.params)
    }

    pub fn load(path: &Path, expected: ModelRole) -> Result<GeneratorModel> {
        let (config, extra, tensors) =
            load_checkpoint_for(path, &[ModelRole::Generator, ModelRole::Actor], expected)?;
        let tied_output = extra.get("tied_output").map(|s| s == "true").unwrap_or(false);
        let mut model = GeneratorModel::with_tied_output(config, 0, tied_output)?;
        model.params.import_tensors(&tensors)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels::softmax_rows;

    fn probs_of(logits: &crate::tensor::Tensor) -> Vec<f64> {
        softmax_rows(logits.data(), logits.rows(), logits.cols())
    }

    fn toy() -> GeneratorModel {
        let config = TransformerConfig {
            vocab_size: 9,
            max_seq_len: 8,
            width: 8,
            n_layers: 2,
            n_heads: 2,
            ff_width: 16,
            dropout: 0.0,
        };
        GeneratorModel::new(config, 11).unwrap()
    }

    #[test]
    fn appending_a_token_leaves_earlier_logits_bit_identical() {
        let model = toy();
        let short = model.forward_logits(&[3, 4, 5]).unwrap();
        for suffix in [0usize, 7, 8] {
            let long = model.forward_logits(&[3, 4, 5, suffix]).unwrap();
            for pos in 0..3 {
                for v in 0..9 {
                    assert_eq!(
                        short.at(pos, v).to_bits(),
                        long.at(pos, v).to_bits(),
                        "position {pos} logit {v} changed when appending {suffix}"
                    );
                }
            }
        }
    }

    #[test]
    fn changing_a_suffix_token_leaves_prefix_logits_bit_identical() {
        let model = toy();
        let a = model.forward_logits(&[2, 6, 1, 7, 3]).unwrap();
        let b = model.forward_logits(&[2, 6, 1, 0, 8]).unwrap();
        for pos in 0..3 {
            for v in 0..9 {
                assert_eq!(a.at(pos, v).to_bits(), b.at(pos, v).to_bits());
            }
        }
        assert!(
            (0..9).any(|v| a.at(3, v).to_bits() != b.at(3, v).to_bits()),
            "perturbed position should actually change"
        );
    }

    #[test]
    fn zeroed_output_projection_gives_a_uniform_distribution() {
        let mut model = toy();
        let i = model.params.index_of("out.w").unwrap();
        model.params.update(i, |w| w.fill(0.0));
        let i = model.params.index_of("out.b").unwrap();
        model.params.update(i, |b| b.fill(0.0));
        let logits = model.forward_logits(&[1, 2, 3]).unwrap();
        let probs = probs_of(&logits);
        for pos in 0..3 {
            for v in 0..9 {
                assert!((probs[pos * 9 + v] - 1.0 / 9.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_token_forward_matches_straight_line_hand_computation() {
        let config = TransformerConfig {
            vocab_size: 5,
            max_seq_len: 4,
            width: 4,
            n_layers: 2,
            n_heads: 2,
            ff_width: 6,
            dropout: 0.0,
        };
        let model = GeneratorModel::new(config, 77).unwrap();
        let token = 3usize;
        let got = model.forward_logits(&[token]).unwrap();

        // Independent scalar re-implementation, no shared kernels. With a
        // single position, each attention head reduces to its value
        // projection because softmax over one score is exactly one.
        let p = |name: &str| model.params.by_name(name).unwrap().data().to_vec();
        let w = 4usize;
        let mut x: Vec<f64> = (0..w)
            .map(|j| p("emb.tok")[token * w + j] + p("emb.pos")[j])
            .collect();

        let layer_norm = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len() as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            x.iter()
                .zip(g.iter().zip(b))
                .map(|(v, (g, b))| (v - mean) * inv * g + b)
                .collect()
        };
        let matvec = |x: &[f64], m: &[f64], cols: usize| -> Vec<f64> {
            (0..cols)
                .map(|j| x.iter().enumerate().map(|(i, v)| v * m[i * cols + j]).sum())
                .collect()
        };
        let gelu = |v: f64| {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh())
        };

        for l in 0..2 {
            let pre = |s: &str| format!("layer{l}.{s}");
            let normed = layer_norm(&x, &p(&pre("ln1.g")), &p(&pre("ln1.b")));
            let mut cat = Vec::new();
            for h in 0..2 {
                cat.extend(matvec(&normed, &p(&pre(&format!("attn.h{h}.wv"))), 2));
            }
            let proj = matvec(&cat, &p(&pre("attn.wo")), w);
            for j in 0..w {
                x[j] += proj[j] + p(&pre("attn.bo"))[j];
            }
            let normed = layer_norm(&x, &p(&pre("ln2.g")), &p(&pre("ln2.b")));
            let mut h1 = matvec(&normed, &p(&pre("ffn.w1")), 6);
            for (j, v) in h1.iter_mut().enumerate() {
                *v = gelu(*v + p(&pre("ffn.b1"))[j]);
            }
            let h2 = matvec(&h1, &p(&pre("ffn.w2")), w);
            for j in 0..w {
                x[j] += h2[j] + p(&pre("ffn.b2"))[j];
            }
        }
        let normed = layer_norm(&x, &p("final_ln.g"), &p("final_ln.b"));
        let mut logits = matvec(&normed, &p("out.w"), 5);
        for (j, v) in logits.iter_mut().enumerate() {
            *v += p("out.b")[j];
        }

        for v in 0..5 {
            assert!(
                (got.at(0, v) - logits[v]).abs() < 1e-12,
                "logit {v}: model {} vs hand {}",
                got.at(0, v),
                logits[v]
            );
        }
    }

    #[test]
    fn sequence_logprob_sums_match_stepwise_products() {
        let model = toy();
        let prompt = [2, 5];
        let target = [7, 1, 4];
        let lps = model.sequence_logprobs(&prompt, &target).unwrap();
        assert_eq!(lps.len(), 3);
        for lp in &lps {
            assert!(*lp <= 0.0 && lp.exp() > 0.0 && lp.exp() <= 1.0);
        }
        // Stepwise: probability of each target token from its own
        // prefix-only forward pass.
        let mut prefix = prompt.to_vec();
        let mut total = 0.0;
        for &t in &target {
            let logits = model.forward_logits(&prefix).unwrap();
            let probs = probs_of(&logits);
            total += probs[(prefix.len() - 1) * 9 + t].ln();
            prefix.push(t);
        }
        assert!((lps.iter().sum::<f64>() - total).abs() < 1e-10);
    }

    #[test]
    fn ratio_against_itself_is_exactly_one() {
        let model = toy();
        let lp1 = model.sequence_logprobs(&[3, 4], &[5, 6]).unwrap();
        let lp2 = model.sequence_logprobs(&[3, 4], &[5, 6]).unwrap();
        for (a, b) in lp1.iter().zip(&lp2) {
            assert_eq!((a - b).exp(), 1.0);
        }
    }

    #[test]
    fn empty_target_is_rejected() {
        let model = toy();
        let err = model.sequence_logprobs(&[1, 2], &[]).unwrap_err();
        assert!(err.to_string().contains("target is empty"), "{err}");
    }

    #[test]
    fn tied_output_uses_the_embedding_table() {
        let config = TransformerConfig {
            vocab_size: 9,
            max_seq_len: 8,
            width: 8,
            n_layers: 1,
            n_heads: 2,
            ff_width: 16,
            dropout: 0.0,
        };
        let model = GeneratorModel::with_tied_output(config, 5, true).unwrap();
        assert!(model.params.index_of("out.w").is_none());
        let logits = model.forward_logits(&[1, 2]).unwrap();
        assert_eq!(logits.shape(), &[2, 9]);
        assert!(logits.is_finite());
    }

    #[test]
    fn checkpoint_round_trip_preserves_every_bit() {
        let model = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.ckpt");
        model.save(&path, ModelRole::Generator).unwrap();
        let back = GeneratorModel::load(&path, ModelRole::Generator).unwrap();
        assert_eq!(model.params.fingerprint(), back.params.fingerprint());
        let a = model.forward_logits(&[1, 2, 3]).unwrap();
        let b = back.forward_logits(&[1, 2, 3]).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn role_mismatch_is_reported() {
        let model = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.ckpt");
        model.save(&path, ModelRole::Actor).unwrap();
        let err = GeneratorModel::load(&path, ModelRole::Generator).unwrap_err();
        assert!(err.to_string().contains("actor"), "{err}");
        assert!(GeneratorModel::load(&path, ModelRole::Actor).is_ok());
    }
}
