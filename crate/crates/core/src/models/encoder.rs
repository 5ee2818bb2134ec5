//! Text encoder: non-causal trunk mean-pooled into one fixed-width
//! vector per document.
//!
//! The recommender consumes these vectors for CVs, catalogue JDs, and
//! generated JDs alike. Pooling is a constant `1/n` row vector matrix
//! multiplied against the hidden states, so gradients reach the trunk
//! when the encoder trains jointly with the recommender head.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::corpus::ontology::PAD;
use crate::error::{Error, Result};
use crate::models::persist::{load_checkpoint_for, save_checkpoint, ModelRole};
use crate::models::trunk::{
    init_rng, init_trunk_params, trunk_forward, Bound, TransformerConfig,
};
use crate::tensor::{GradTape, NodeId, ParamSet, Tensor};

#[derive(Debug)]
pub struct TextEncoder {
    pub config: TransformerConfig,
    pub params: ParamSet,
}

fn strip_trailing_pad(tokens: &[usize]) -> &[usize] {
    let mut end = tokens.len();
    while end > 0 && tokens[end - 1] == PAD {
        end -= 1;
    }
    &tokens[..end]
}

/// Mean-pooled embedding node of shape `[1, width]`, usable with any
/// bound parameter set that holds a trunk (scoped or not).
pub fn pooled_encode_graph(
    tape: &mut GradTape,
    bound: &Bound,
    config: &TransformerConfig,
    tokens: &[usize],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let tokens = strip_trailing_pad(tokens);
    if tokens.is_empty() {
        return Err(Error::value("encode_text", "input is empty"));
    }
    let hidden = trunk_forward(tape, bound, config, tokens, false, dropout_rng)?;
    let n = tokens.len();
    let pool = tape.constant(Tensor::matrix(1, n, vec![1.0 / n as f64; n]).expect("n is positive"));
    tape.matmul(pool, hidden)
}

impl TextEncoder {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<TextEncoder> {
        config.validate()?;
        let mut rng = init_rng(seed);
        let mut params = ParamSet::new();
        init_trunk_params(&mut params, &config, &mut rng);
        Ok(TextEncoder { config, params })
    }

    /// Mean-pooled embedding node of shape `[1, width]`.
    pub fn encode_graph(
        &self,
        tape: &mut GradTape,
        bound: &Bound,
        tokens: &[usize],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        pooled_encode_graph(tape, bound, &self.config, tokens, dropout_rng)
    }

    /// Fixed-width document embedding.
    pub fn encode_text(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = GradTape::new();
        let bound = Bound::new(&self.params, &mut tape, false);
        let node = self.encode_graph(&mut tape, &bound, tokens, None)?;
        let pooled = tape.value(node);
        let out = Tensor::from_vec(pooled.data().to_vec())?;
        if !out.is_finite() {
            return Err(Error::value("encode_text", "non-finite embedding"));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(
            path,
            ModelRole::Encoder,
            &self.config,
            Default::default(),
            &self.params,
        )
    }

    pub fn load(path: &Path) -> Result<TextEncoder> {
        let (config, _, tensors) =
            load_checkpoint_for(path, &[ModelRole::Encoder], ModelRole::Encoder)?;
        let mut model = TextEncoder::new(config, 0)?;
        model.params.import_tensors(&tensors)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> TextEncoder {
        let config = TransformerConfig {
            vocab_size: 12,
            max_seq_len: 16,
            width: 8,
            n_layers: 2,
            n_heads: 2,
            ff_width: 16,
            dropout: 0.0,
        };
        TextEncoder::new(config, 31).unwrap()
    }

    #[test]
    fn same_text_encodes_identically() {
        let enc = toy();
        let a = enc.encode_text(&[3, 4, 5]).unwrap();
        let b = enc.encode_text(&[3, 4, 5]).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn output_width_is_independent_of_input_length() {
        let enc = toy();
        for len in [1usize, 3, 9, 16] {
            let v = enc.encode_text(&vec![4; len]).unwrap();
            assert_eq!(v.shape(), &[8]);
            assert!(v.is_finite());
        }
    }

    #[test]
    fn padding_only_suffix_does_not_change_the_embedding() {
        let enc = toy();
        let plain = enc.encode_text(&[3, 4, 5]).unwrap();
        let padded = enc.encode_text(&[3, 4, 5, PAD, PAD, PAD]).unwrap();
        assert!(plain.bits_eq(&padded));
    }

    #[test]
    fn empty_input_is_rejected() {
        let enc = toy();
        assert!(enc.encode_text(&[]).is_err());
        assert!(enc.encode_text(&[PAD, PAD]).is_err());
    }

    #[test]
    fn identity_trunk_returns_the_mean_of_token_embeddings() {
        let mut enc = toy();
        // Zeroing each residual branch's last projection makes every
        // block the identity; zeroing positional rows leaves only the
        // token embedding table.
        for l in 0..2 {
            for name in [format!("layer{l}.attn.wo"), format!("layer{l}.ffn.w2")] {
                let i = enc.params.index_of(&name).unwrap();
                enc.params.update(i, |w| w.fill(0.0));
            }
        }
        let i = enc.params.index_of("emb.pos").unwrap();
        enc.params.update(i, |w| w.fill(0.0));

        let tokens = [7usize, 2, 7, 5];
        let got = enc.encode_text(&tokens).unwrap();
        let table = enc.params.by_name("emb.tok").unwrap();
        for j in 0..8 {
            let mean: f64 =
                tokens.iter().map(|&t| table.at(t, j)).sum::<f64>() / tokens.len() as f64;
            assert!(
                (got.data()[j] - mean).abs() < 1e-12,
                "dim {j}: got {}, mean {mean}",
                got.data()[j]
            );
        }
    }

    #[test]
    fn non_causal_attention_sees_later_tokens() {
        let enc = toy();
        // Changing the last token must move the pooled embedding, and
        // with a bidirectional trunk it must also move earlier hidden
        // rows; compare pooled outputs of same-length inputs.
        let a = enc.encode_text(&[3, 4, 5]).unwrap();
        let b = enc.encode_text(&[3, 4, 6]).unwrap();
        assert!(!a.bits_eq(&b));
    }

    #[test]
    fn encoder_checkpoint_round_trips() {
        let enc = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("encoder.ckpt");
        enc.save(&path).unwrap();
        let back = TextEncoder::load(&path).unwrap();
        assert_eq!(back.params.fingerprint(), enc.params.fingerprint());
        let a = enc.encode_text(&[2, 3]).unwrap();
        let b = back.encode_text(&[2, 3]).unwrap();
        assert!(a.bits_eq(&b));
    }
}
