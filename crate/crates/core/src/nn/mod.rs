//! Parameterized layers: linear maps, layer normalization, feed-forward
//! blocks, and multi-head attention with residual connection and masking.

mod checkpoint;
mod params;

pub use checkpoint::{config_digest, load_checkpoint, save_checkpoint, CheckpointError};
pub use params::{ParamId, ParamStore};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{BoolMat, GradGraph, Node, Tensor, TensorError, NEG_LARGE};

/// Leaky-ReLU slope used by every nonlinearity in the model.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Epsilon for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("attention mask row {row} disables every key")]
    AllKeysMasked { row: usize },
    #[error("attention: key rows {keys} != value rows {values}")]
    KeyValueRows { keys: usize, values: usize },
}

/// Symmetric uniform init with limit sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("init shape")
}

/// Affine map `x W + b` with `W: [in, out]`, `b: [out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{prefix}.weight"), xavier_uniform(rng, in_dim, out_dim));
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(vec![out_dim]));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(
        &self,
        g: &mut GradGraph,
        store: &ParamStore,
        x: Node,
    ) -> Result<Node, TensorError> {
        let w = store.bind(g, self.weight);
        let b = store.bind(g, self.bias);
        let prod = g.matmul(x, w)?;
        g.add_row(prod, b)
    }
}

/// Row-wise layer normalization with learned gain and offset.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
    pub epsilon: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        let gain = store.add(format!("{prefix}.gain"), Tensor::filled(vec![dim], 1.0));
        let offset = store.add(format!("{prefix}.offset"), Tensor::zeros(vec![dim]));
        Self { gain, offset, epsilon: LAYER_NORM_EPS }
    }

    pub fn forward(
        &self,
        g: &mut GradGraph,
        store: &ParamStore,
        x: Node,
    ) -> Result<Node, TensorError> {
        let gain = store.bind(g, self.gain);
        let offset = store.bind(g, self.offset);
        g.layer_norm(x, gain, offset, self.epsilon)
    }
}

/// Two affine maps with a leaky-ReLU between them.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            inner: Linear::new(store, &format!("{prefix}.inner"), dim, hidden, rng),
            outer: Linear::new(store, &format!("{prefix}.outer"), hidden, dim, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut GradGraph,
        store: &ParamStore,
        x: Node,
    ) -> Result<Node, TensorError> {
        let h = self.inner.forward(g, store, x)?;
        let a = g.leaky_relu(h, LEAKY_SLOPE);
        self.outer.forward(g, store, a)
    }
}

/// Per-head query/key/value projections.
#[derive(Debug, Clone)]
pub struct AttentionHead {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

/// Multi-head scaled dot-product attention with residual connection.
///
/// Per head: `softmax(masked_fill(f_q(Xq) f_k(Xk)^T) / sqrt(d_h)) f_v(Xv)`;
/// head outputs are concatenated, mapped by `output`, and the query input is
/// added back, so the result has the query's shape.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: Vec<AttentionHead>,
    pub output: Linear,
    pub head_dim: usize,
}

/// Result of one attention application. `head_weights` are the post-softmax
/// weight matrices (one node per head); `score_entries` counts the elements
/// of the score matrix built by this call, independent of head count.
#[derive(Debug)]
pub struct AttentionOutput {
    pub out: Node,
    pub head_weights: Vec<Node>,
    pub score_entries: u64,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        model_dim: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let heads = (0..heads)
            .map(|h| AttentionHead {
                query: Linear::new(store, &format!("{prefix}.head{h}.q"), model_dim, head_dim, rng),
                key: Linear::new(store, &format!("{prefix}.head{h}.k"), model_dim, head_dim, rng),
                value: Linear::new(store, &format!("{prefix}.head{h}.v"), model_dim, head_dim, rng),
            })
            .collect::<Vec<_>>();
        let concat_dim = heads.len() * head_dim;
        let output = Linear::new(store, &format!("{prefix}.out"), concat_dim, model_dim, rng);
        Self { heads, output, head_dim }
    }

    pub fn forward(
        &self,
        g: &mut GradGraph,
        store: &ParamStore,
        xq: Node,
        xk: Node,
        xv: Node,
        mask: Option<&BoolMat>,
    ) -> Result<AttentionOutput, NnError> {
        let nq = g.value(xq).rows();
        let nk = g.value(xk).rows();
        let nv = g.value(xv).rows();
        if nk != nv {
            return Err(NnError::KeyValueRows { keys: nk, values: nv });
        }
        if let Some(m) = mask {
            if let Some(row) = m.any_row_fully_masked() {
                return Err(NnError::AllKeysMasked { row });
            }
        }
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads.len());
        let mut head_weights = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let q = head.query.forward(g, store, xq)?;
            let k = head.key.forward(g, store, xk)?;
            let v = head.value.forward(g, store, xv)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let masked = match mask {
                Some(m) => g.masked_fill(scores, m, NEG_LARGE)?,
                None => scores,
            };
            let scaled = g.scale(masked, scale);
            let weights = g.softmax_rows(scaled)?;
            head_weights.push(weights);
            head_outputs.push(g.matmul(weights, v)?);
        }
        let cat = g.concat(&head_outputs, 1)?;
        let projected = self.output.forward(g, store, cat)?;
        let out = g.add(projected, xq)?;
        Ok(AttentionOutput {
            out,
            head_weights,
            score_entries: (nq * nk) as u64,
        })
    }
}
