//! Decoder layers: spatio-temporal self-attention over the incoming stream,
//! cross-attention against the encoded observed features, and an FFN.
//!
//! The typical layer queries with the self-attended stream and uses encoded
//! features as key/value; an entry-flipped layer swaps them, so its
//! cross-attention query depends only on observed features. Every
//! cross-attention applies per-query-frame visibility: the query block of
//! frame `f` may see counterpart frames up to `f` (its own frame only, when
//! the key/value stream is step-isolated). With that discipline, decoding a
//! history prefix of length `tau - 1` and reading the last frame is exactly
//! the frame-`tau` step of a frame-wise rollout, and a single pass over the
//! full history computes every step at once (used for teacher forcing).

use rand_chacha::ChaCha8Rng;

use super::encoder::{frame_pair_mask, scope_allow, EncodeStats, SpatialMode, StAttention};
use super::{EncoderVariant, Grid, ModelError, TemporalScope};
use crate::nn::{FeedForward, LayerNorm, MultiHeadAttention, ParamStore};
use crate::tensor::{GradGraph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Typical,
    EntryFlipped,
}

/// Diagnostic capture of cross-attention internals, one entry per layer.
#[derive(Debug, Default)]
pub struct DecodeCapture {
    /// Value of the cross-attention query matrix.
    pub cross_queries: Vec<Tensor>,
    /// Post-softmax weight matrices, one per head.
    pub cross_weights: Vec<Vec<Tensor>>,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub kind: DecoderKind,
    pub self_attn: StAttention,
    pub cross: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub ffn: FeedForward,
    pub norm_ffn: LayerNorm,
}

impl DecoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        kind: DecoderKind,
        self_structure: EncoderVariant,
        dim: usize,
        heads: usize,
        head_dim: usize,
        ffn_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            kind,
            self_attn: StAttention::new(store, &format!("{prefix}.self"), self_structure, dim, heads, head_dim, rng),
            cross: MultiHeadAttention::new(store, &format!("{prefix}.cross"), dim, heads, head_dim, rng),
            norm_cross: LayerNorm::new(store, &format!("{prefix}.norm_cross"), dim),
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), dim, ffn_dim, rng),
            norm_ffn: LayerNorm::new(store, &format!("{prefix}.norm_ffn"), dim),
        }
    }

    fn forward(
        &self,
        g: &mut GradGraph,
        store: &ParamStore,
        stream: &Grid,
        x_enc: &Grid,
        all_query: bool,
        capture: Option<&mut DecodeCapture>,
    ) -> Result<Grid, ModelError> {
        let frames = stream.frames;
        let mut stats = EncodeStats::default();
        let self_attended = self.self_attn.forward(
            g,
            store,
            stream,
            &scope_allow(stream.scope),
            SpatialMode::SameFrameBlock,
            &mut stats,
        )?;

        let enc_prefix = x_enc.frames_prefix(g, frames)?;
        let (query, key_value, out_grid) = match self.kind {
            DecoderKind::Typical => {
                // Query: the self-attended stream. Keys/values: encoded
                // observed features of frames the query frame may see.
                (
                    self_attended,
                    enc_prefix,
                    Grid { node: self_attended, ..*stream },
                )
            }
            DecoderKind::EntryFlipped => {
                // Query: encoded observed features. Keys/values: the
                // self-attended stream. The produced pseudo-frames stay
                // step-isolated under the limited-query form and behave as a
                // causal sequence under the all-query form.
                let scope = if all_query { TemporalScope::Causal } else { TemporalScope::SelfOnly };
                (
                    enc_prefix,
                    self_attended,
                    Grid {
                        node: enc_prefix,
                        rows_per_frame: x_enc.rows_per_frame,
                        frames,
                        scope,
                    },
                )
            }
        };

        let (q_rows, kv_rows, kv_allow): (usize, usize, fn(usize, usize) -> bool) = match self.kind {
            DecoderKind::Typical => (stream.rows_per_frame, x_enc.rows_per_frame, |fq, fk| fk <= fq),
            DecoderKind::EntryFlipped => (
                x_enc.rows_per_frame,
                stream.rows_per_frame,
                scope_allow(stream.scope),
            ),
        };
        let mask = frame_pair_mask(frames, q_rows, frames, kv_rows, &kv_allow);
        let att = self.cross.forward(g, store, query, key_value, key_value, Some(&mask))?;
        if let Some(cap) = capture {
            cap.cross_queries.push(g.value(query).clone());
            cap.cross_weights.push(
                att.head_weights
                    .iter()
                    .map(|&w| g.value(w).clone())
                    .collect(),
            );
        }
        let crossed = self.norm_cross.forward(g, store, att.out)?;
        let ffn_out = self.ffn.forward(g, store, crossed)?;
        let resid = g.add(ffn_out, crossed)?;
        let out = self.norm_ffn.forward(g, store, resid)?;
        Ok(Grid { node: out, ..out_grid })
    }
}

/// Run the decoder stack over an embedded history grid against encoded
/// observed features. The returned grid has one frame per history frame;
/// frame `f` (1-based) holds the features from which frame `f + 1` is
/// estimated.
pub fn decode_stream(
    g: &mut GradGraph,
    store: &ParamStore,
    layers: &[DecoderLayer],
    all_query: bool,
    x_enc: &Grid,
    history: &Grid,
    mut capture: Option<&mut DecodeCapture>,
) -> Result<Grid, ModelError> {
    if history.frames == 0 {
        return Err(ModelError::Input("empty target history".into()));
    }
    if history.frames > x_enc.frames {
        return Err(ModelError::Input(format!(
            "history of {} frames exceeds encoded clip of {}",
            history.frames, x_enc.frames
        )));
    }
    let mut stream = *history;
    for layer in layers {
        stream = layer.forward(g, store, &stream, x_enc, all_query, capture.as_deref_mut())?;
    }
    Ok(stream)
}
