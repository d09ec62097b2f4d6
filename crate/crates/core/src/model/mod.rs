//! Attention-only causal transformer.
//!
//! Token and learned position embeddings feed `L` decoder layers of masked
//! multi-head self-attention with no feed-forward sublayer and no layer
//! norm. A linear unembedding maps each position to two logits
//! (nonmatch, match).

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Alphabet, SEQ_LEN};
use crate::grad::{GradError, Matrix, Real, Tape, Var};

pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} at position {position} is outside the vocabulary of {vocab}")]
    TokenOutOfRange {
        id: usize,
        position: usize,
        vocab: usize,
    },
    #[error("expected {expected} tokens, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// How [`init_params`] scales its Gaussian draws.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Every weight has standard deviation `init_std`.
    Gaussian,
    /// Embeddings use `init_std`; every other matrix uses
    /// `init_std / sqrt(fan_in)`.
    #[default]
    FanIn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub use_residual: bool,
    pub init: InitScheme,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 1,
            n_heads: 1,
            d_model: 64,
            seq_len: SEQ_LEN,
            vocab: Alphabet::SIZE,
            use_residual: true,
            init: InitScheme::FanIn,
            init_std: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn with_shape(n_layers: usize, n_heads: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            ..Self::default()
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.n_layers == 0 || self.n_heads == 0 {
            return bad("n_layers and n_heads must be at least 1".into());
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.seq_len == 0 || self.vocab == 0 {
            return bad("seq_len and vocab must be positive".into());
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad(format!(
                "init_std {} must be finite and >= 0",
                self.init_std
            ));
        }
        Ok(())
    }
}

/// Query, key and value projections of one head, each `d_model × d_head`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<M> {
    pub w_q: M,
    pub w_k: M,
    pub w_v: M,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<M> {
    pub heads: Vec<HeadWeights<M>>,
    /// Output projection applied after head concatenation, `d_model × d_model`.
    pub w_o: M,
}

/// All trainable tensors of the model. `M` is a [`Matrix`] for concrete
/// parameters or a tape [`Var`] once they are bound to a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<M> {
    pub token_embedding: M,
    pub position_embedding: M,
    pub layers: Vec<LayerWeights<M>>,
    pub unembedding: M,
    pub unembedding_bias: M,
}

pub type ModelParams<T> = Weights<Matrix<T>>;

impl<M> Weights<M> {
    /// Tensors in canonical order, paired with stable names.
    pub fn named(&self) -> Vec<(String, &M)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("layer{l}.head{h}.w_q"), &head.w_q));
                out.push((format!("layer{l}.head{h}.w_k"), &head.w_k));
                out.push((format!("layer{l}.head{h}.w_v"), &head.w_v));
            }
            out.push((format!("layer{l}.w_o"), &layer.w_o));
        }
        out.push(("unembedding".to_string(), &self.unembedding));
        out.push(("unembedding_bias".to_string(), &self.unembedding_bias));
        out
    }

    /// Mutable tensors in the same order as [`Weights::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut M> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            for head in &mut layer.heads {
                out.push(&mut head.w_q);
                out.push(&mut head.w_k);
                out.push(&mut head.w_v);
            }
            out.push(&mut layer.w_o);
        }
        out.push(&mut self.unembedding);
        out.push(&mut self.unembedding_bias);
        out
    }

    pub fn try_map<N, E>(&self, mut f: impl FnMut(&M) -> Result<N, E>) -> Result<Weights<N>, E> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut heads = Vec::with_capacity(layer.heads.len());
            for head in &layer.heads {
                heads.push(HeadWeights {
                    w_q: f(&head.w_q)?,
                    w_k: f(&head.w_k)?,
                    w_v: f(&head.w_v)?,
                });
            }
            layers.push(LayerWeights {
                heads,
                w_o: f(&layer.w_o)?,
            });
        }
        Ok(Weights {
            token_embedding: f(&self.token_embedding)?,
            position_embedding: f(&self.position_embedding)?,
            layers,
            unembedding: f(&self.unembedding)?,
            unembedding_bias: f(&self.unembedding_bias)?,
        })
    }
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (d, dk) = (config.d_model, config.d_head());
        Weights {
            token_embedding: Matrix::zeros(config.vocab, d),
            position_embedding: Matrix::zeros(config.seq_len, d),
            layers: (0..config.n_layers)
                .map(|_| LayerWeights {
                    heads: (0..config.n_heads)
                        .map(|_| HeadWeights {
                            w_q: Matrix::zeros(d, dk),
                            w_k: Matrix::zeros(d, dk),
                            w_v: Matrix::zeros(d, dk),
                        })
                        .collect(),
                    w_o: Matrix::zeros(d, d),
                })
                .collect(),
            unembedding: Matrix::zeros(d, NUM_CLASSES),
            unembedding_bias: Matrix::zeros(1, NUM_CLASSES),
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        self.try_map(|m| Ok::<_, std::convert::Infallible>(m.cast()))
            .unwrap_or_else(|e| match e {})
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    /// Leaves every tensor on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Weights<Var>, GradError> {
        self.try_map(|m| tape.leaf(m.clone()))
    }
}

/// i.i.d. zero-mean Gaussian weights scaled per `config.init`; the
/// unembedding bias starts at zero.
pub fn init_params<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>, ModelError> {
    config.validate()?;
    let normal = Normal::new(0.0, config.init_std)
        .map_err(|e| ModelError::Config(format!("init_std: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::<T>::zeros(config);
    let mut tensors = params.tensors_mut();
    let bias = tensors.pop().expect("bias is last");
    debug_assert_eq!(bias.shape(), (1, NUM_CLASSES));
    for (k, tensor) in tensors.into_iter().enumerate() {
        // The first two tensors are the token and position embeddings.
        let scale = match config.init {
            InitScheme::FanIn if k >= 2 => 1.0 / (tensor.rows() as f64).sqrt(),
            _ => 1.0,
        };
        for x in tensor.data_mut() {
            *x = T::from_f64_lossy(scale * normal.sample(&mut rng));
        }
    }
    Ok(params)
}

/// Attention weights of one head for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord<T> {
    pub layer: usize,
    pub head: usize,
    pub matrix: Matrix<T>,
}

/// Graph nodes produced by [`forward_on_tape`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    /// Attention matrices in layer-major, head-minor order.
    pub attention: Vec<Var>,
}

fn check_tokens(config: &ModelConfig, token_ids: &[usize]) -> Result<(), ModelError> {
    if token_ids.len() != config.seq_len {
        return Err(ModelError::Length {
            expected: config.seq_len,
            actual: token_ids.len(),
        });
    }
    if let Some((position, &id)) = token_ids
        .iter()
        .enumerate()
        .find(|(_, &id)| id >= config.vocab)
    {
        return Err(ModelError::TokenOutOfRange {
            id,
            position,
            vocab: config.vocab,
        });
    }
    Ok(())
}

/// Records the forward pass for one sequence on `tape`.
pub fn forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    weights: &Weights<Var>,
    config: &ModelConfig,
    token_ids: &[usize],
) -> Result<ForwardVars, ModelError> {
    check_tokens(config, token_ids)?;
    let positions: Vec<usize> = (0..token_ids.len()).collect();
    let tok = tape.gather_rows(weights.token_embedding, token_ids)?;
    let pos = tape.gather_rows(weights.position_embedding, &positions)?;
    let mut x = tape.add(tok, pos)?;
    let inv_sqrt_dk = 1.0 / (config.d_head() as f64).sqrt();

    let mut attention = Vec::with_capacity(config.n_layers * config.n_heads);
    for layer in &weights.layers {
        let mut head_outputs = Vec::with_capacity(layer.heads.len());
        for head in &layer.heads {
            let q = tape.matmul(x, head.w_q)?;
            let k = tape.matmul(x, head.w_k)?;
            let v = tape.matmul(x, head.w_v)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, inv_sqrt_dk)?;
            let a = tape.masked_softmax_rows(scores)?;
            attention.push(a);
            head_outputs.push(tape.matmul(a, v)?);
        }
        let concat = if head_outputs.len() == 1 {
            head_outputs[0]
        } else {
            tape.concat_cols(&head_outputs)?
        };
        let out = tape.matmul(concat, layer.w_o)?;
        x = if config.use_residual {
            tape.add(x, out)?
        } else {
            out
        };
    }
    let logits = tape.matmul(x, weights.unembedding)?;
    let logits = tape.add_row_broadcast(logits, weights.unembedding_bias)?;
    Ok(ForwardVars { logits, attention })
}

/// Mean per-position cross-entropy of one sequence.
pub fn sequence_loss<T: Real>(
    tape: &mut Tape<T>,
    weights: &Weights<Var>,
    config: &ModelConfig,
    token_ids: &[usize],
    targets: &[usize],
) -> Result<(Var, ForwardVars), ModelError> {
    let fwd = forward_on_tape(tape, weights, config, token_ids)?;
    let loss = tape.cross_entropy(fwd.logits, targets)?;
    Ok((loss, fwd))
}

/// Logits (`T × 2`) and every layer/head attention matrix for one sequence.
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    token_ids: &[usize],
) -> Result<(Matrix<T>, Vec<AttentionRecord<T>>), ModelError> {
    let mut tape = Tape::new();
    let weights = params.bind(&mut tape)?;
    let fwd = forward_on_tape(&mut tape, &weights, config, token_ids)?;
    let records = fwd
        .attention
        .iter()
        .enumerate()
        .map(|(k, &a)| AttentionRecord {
            layer: k / config.n_heads,
            head: k % config.n_heads,
            matrix: tape.value(a).clone(),
        })
        .collect();
    Ok((tape.value(fwd.logits).clone(), records))
}

/// Argmax class per row; an exact tie resolves to nonmatch (0).
pub fn predict<T: Real>(logits: &Matrix<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &x) in row.iter().enumerate().skip(1) {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
