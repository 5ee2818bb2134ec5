//! Shared transformer machinery: configuration, parameter initialization,
//! and the tape-level forward graph used by every network in the crate.
//!
//! All four networks (generator, reward, critic, encoder) are the same
//! pre-norm transformer trunk with different heads bolted on. The trunk
//! is expressed as tape operations so a single code path serves both
//! inference (parameters registered as constants, nothing recorded) and
//! training (parameters tracked, gradients via backward).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{GradTape, NodeId, ParamSet, Tensor};

/// Epsilon inside every layer norm.
pub const LN_EPS: f64 = 1e-5;

/// Standard deviation for weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub width: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_width: usize,
    pub dropout: f64,
}

impl TransformerConfig {
    /// Default generator shape: wide enough to learn the corpus, small
    /// enough to train in seconds per epoch on one core.
    pub fn generator_default(vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            vocab_size,
            max_seq_len: 64,
            width: 64,
            n_layers: 2,
            n_heads: 4,
            ff_width: 128,
            dropout: 0.0,
        }
    }

    /// Default scorer/encoder shape, deliberately smaller than the
    /// generator.
    pub fn scorer_default(vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            vocab_size,
            max_seq_len: 64,
            width: 32,
            n_layers: 2,
            n_heads: 4,
            ff_width: 64,
            dropout: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("width", self.width),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ff_width", self.ff_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.width % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model width {} not divisible by {} heads",
                self.width, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) || !self.dropout.is_finite() {
            return Err(Error::Config(format!(
                "model dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

pub(crate) fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is positive");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape is nonempty")
}

/// Pushes embedding + per-layer trunk parameters into `params`.
/// Layer norm gains start at one, every bias at zero, weights at
/// Normal(0, 0.02).
pub fn init_trunk_params(params: &mut ParamSet, config: &TransformerConfig, rng: &mut ChaCha8Rng) {
    let w = config.width;
    let hd = config.head_dim();
    params.push("emb.tok", normal_tensor(rng, &[config.vocab_size, w], INIT_STD));
    params.push("emb.pos", normal_tensor(rng, &[config.max_seq_len, w], INIT_STD));
    for l in 0..config.n_layers {
        params.push(format!("layer{l}.ln1.g"), Tensor::full(&[w], 1.0).expect("width is positive"));
        params.push(format!("layer{l}.ln1.b"), Tensor::zeros(&[w]).expect("width is positive"));
        for h in 0..config.n_heads {
            params.push(format!("layer{l}.attn.h{h}.wq"), normal_tensor(rng, &[w, hd], INIT_STD));
            params.push(format!("layer{l}.attn.h{h}.wk"), normal_tensor(rng, &[w, hd], INIT_STD));
            params.push(format!("layer{l}.attn.h{h}.wv"), normal_tensor(rng, &[w, hd], INIT_STD));
        }
        params.push(format!("layer{l}.attn.wo"), normal_tensor(rng, &[w, w], INIT_STD));
        params.push(format!("layer{l}.attn.bo"), Tensor::zeros(&[w]).expect("width is positive"));
        params.push(format!("layer{l}.ln2.g"), Tensor::full(&[w], 1.0).expect("width is positive"));
        params.push(format!("layer{l}.ln2.b"), Tensor::zeros(&[w]).expect("width is positive"));
        params.push(format!("layer{l}.ffn.w1"), normal_tensor(rng, &[w, config.ff_width], INIT_STD));
        params.push(format!("layer{l}.ffn.b1"), Tensor::zeros(&[config.ff_width]).expect("width is positive"));
        params.push(format!("layer{l}.ffn.w2"), normal_tensor(rng, &[config.ff_width, w], INIT_STD));
        params.push(format!("layer{l}.ffn.b2"), Tensor::zeros(&[w]).expect("width is positive"));
    }
}

/// Pushes a final layer norm plus a linear head of the given output
/// width.
pub fn init_head_params(
    params: &mut ParamSet,
    config: &TransformerConfig,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    out_width: usize,
) {
    let w = config.width;
    params.push("final_ln.g", Tensor::full(&[w], 1.0).expect("width is positive"));
    params.push("final_ln.b", Tensor::zeros(&[w]).expect("width is positive"));
    params.push(format!("{prefix}.w"), normal_tensor(rng, &[w, out_width], INIT_STD));
    params.push(format!("{prefix}.b"), Tensor::zeros(&[out_width]).expect("width is positive"));
}

/// A parameter set registered on one tape: resolves names to node ids.
pub struct Bound<'a> {
    params: &'a ParamSet,
    ids: Vec<NodeId>,
    prefix: String,
}

impl<'a> Bound<'a> {
    /// Registers every parameter on the tape. `trainable: false` makes
    /// them constants, so nothing downstream is recorded and the forward
    /// pass doubles as plain inference.
    pub fn new(params: &'a ParamSet, tape: &mut GradTape, trainable: bool) -> Bound<'a> {
        let ids = params.register_all(tape, trainable);
        Bound {
            params,
            ids,
            prefix: String::new(),
        }
    }

    /// View over the same registration that prepends `prefix` on every
    /// lookup, so one parameter set can hold several trunks side by
    /// side (for example `cv.emb.tok` next to `jd.emb.tok`).
    pub fn scoped(&self, prefix: &str) -> Bound<'a> {
        Bound {
            params: self.params,
            ids: self.ids.clone(),
            prefix: format!("{}{prefix}", self.prefix),
        }
    }

    /// Node id of a parameter. Panics on unknown names: callers only
    /// pass names the init functions created, so a miss is a crate bug.
    pub fn id(&self, name: &str) -> NodeId {
        let found = if self.prefix.is_empty() {
            self.params.index_of(name)
        } else {
            self.params.index_of(&format!("{}{name}", self.prefix))
        };
        match found {
            Some(i) => self.ids[i],
            None => panic!("parameter {}{name} not found", self.prefix),
        }
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }
}

/// Validates a token sequence against the config before building any
/// graph.
pub fn check_tokens(config: &TransformerConfig, tokens: &[usize], what: &str) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::value("forward", format!("{what} is empty")));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::value(
            "forward",
            format!(
                "{what} holds {} tokens, model accepts at most {}",
                tokens.len(),
                config.max_seq_len
            ),
        ));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::value(
            "forward",
            format!("{what} contains token id {bad} outside vocab of {}", config.vocab_size),
        ));
    }
    Ok(())
}

/// Optional inverted-dropout mask. Only training graphs pass an rng;
/// inference paths leave it `None` and the activation passes through.
fn maybe_dropout(
    tape: &mut GradTape,
    x: NodeId,
    rate: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let Some(rng) = rng.as_deref_mut() else {
        return Ok(x);
    };
    if rate == 0.0 {
        return Ok(x);
    }
    let shape = tape.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 - rate;
    let dist = rand::distributions::Bernoulli::new(keep).expect("rate validated in (0,1)");
    let data: Vec<f64> = (0..n)
        .map(|_| if dist.sample(rng) { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = tape.constant(Tensor::new(shape, data).expect("mask matches activation shape"));
    tape.mul(x, mask)
}

/// Token + positional embedding rows for a sequence.
pub fn embed_tokens(
    tape: &mut GradTape,
    bound: &Bound,
    tokens: &[usize],
) -> Result<NodeId> {
    let tok = tape.row_gather(bound.id("emb.tok"), tokens.to_vec())?;
    let pos = tape.row_gather(bound.id("emb.pos"), (0..tokens.len()).collect())?;
    tape.add(tok, pos)
}

/// One pre-norm transformer block: attention sublayer then feed-forward,
/// each wrapped in a residual connection.
fn block(
    tape: &mut GradTape,
    bound: &Bound,
    config: &TransformerConfig,
    x: NodeId,
    layer: usize,
    causal: bool,
    dropout_rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let p = |suffix: &str| format!("layer{layer}.{suffix}");
    let normed = tape.layer_norm(x, bound.id(&p("ln1.g")), bound.id(&p("ln1.b")), LN_EPS)?;
    let scale = 1.0 / (config.head_dim() as f64).sqrt();
    let mut heads = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let q = tape.matmul(normed, bound.id(&p(&format!("attn.h{h}.wq"))))?;
        let k = tape.matmul(normed, bound.id(&p(&format!("attn.h{h}.wk"))))?;
        let v = tape.matmul(normed, bound.id(&p(&format!("attn.h{h}.wv"))))?;
        let scores = tape.matmul_tb(q, k)?;
        let scores = tape.scale(scores, scale)?;
        let scores = if causal {
            tape.causal_mask_fill(scores)?
        } else {
            scores
        };
        let weights = tape.softmax(scores)?;
        heads.push(tape.matmul(weights, v)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat(&heads)?
    };
    let proj = tape.matmul(cat, bound.id(&p("attn.wo")))?;
    let proj = tape.add(proj, bound.id(&p("attn.bo")))?;
    let proj = maybe_dropout(tape, proj, config.dropout, dropout_rng)?;
    let x = tape.add(x, proj)?;

    let normed = tape.layer_norm(x, bound.id(&p("ln2.g")), bound.id(&p("ln2.b")), LN_EPS)?;
    let h1 = tape.matmul(normed, bound.id(&p("ffn.w1")))?;
    let h1 = tape.add(h1, bound.id(&p("ffn.b1")))?;
    let h1 = tape.gelu(h1)?;
    let h2 = tape.matmul(h1, bound.id(&p("ffn.w2")))?;
    let h2 = tape.add(h2, bound.id(&p("ffn.b2")))?;
    let h2 = maybe_dropout(tape, h2, config.dropout, dropout_rng)?;
    tape.add(x, h2)
}

/// Full trunk: embeddings through every block. Returns per-position
/// hidden states of shape `[len, width]`.
pub fn trunk_forward(
    tape: &mut GradTape,
    bound: &Bound,
    config: &TransformerConfig,
    tokens: &[usize],
    causal: bool,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    check_tokens(config, tokens, "input")?;
    let mut x = embed_tokens(tape, bound, tokens)?;
    for l in 0..config.n_layers {
        x = block(tape, bound, config, x, l, causal, &mut dropout_rng)?;
    }
    Ok(x)
}

/// Applies the final layer norm and a named linear head.
pub fn head_forward(
    tape: &mut GradTape,
    bound: &Bound,
    hidden: NodeId,
    prefix: &str,
) -> Result<NodeId> {
    let normed = tape.layer_norm(hidden, bound.id("final_ln.g"), bound.id("final_ln.b"), LN_EPS)?;
    let out = tape.matmul(normed, bound.id(&format!("{prefix}.w")))?;
    tape.add(out, bound.id(&format!("{prefix}.b")))
}

/// Deterministic seeded rng for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
