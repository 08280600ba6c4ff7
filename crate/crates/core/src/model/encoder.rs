//! Spatio-temporal attention blocks and the encoder stack.
//!
//! Spatial self-attention relates participants within one frame; temporal
//! self-attention relates frames of one participant. The factored variants
//! build `T` score matrices of `N^2` entries plus `N` matrices of `T^2`
//! entries per layer; the joint variant builds one `(NT)^2` matrix. Foresight
//! masking forbids attending key frames beyond `min(f_q + K, T)`.

use rand_chacha::ChaCha8Rng;

use super::{EncoderVariant, Grid, ModelError, TemporalScope};
use crate::nn::{FeedForward, LayerNorm, MultiHeadAttention, ParamStore};
use crate::tensor::{BoolMat, GradGraph, Node};

/// Instrumentation: exact count of score-matrix elements built by attention
/// calls, per attention function (head-count independent).
#[derive(Debug, Default, Clone, Copy)]
pub struct EncodeStats {
    pub score_entries: u64,
}

/// How spatial self-attention is evaluated. `PerFrame` runs one attention
/// function per frame (the factored form, counted by [`EncodeStats`]);
/// `SameFrameBlock` runs one call over all rows with a same-frame mask, which
/// produces bitwise-identical values since masked weights are exact zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialMode {
    PerFrame,
    SameFrameBlock,
}

/// Mask allowing key frame `fk` for query frame `fq` (both 1-based) iff
/// `allow(fq, fk)`. Rows/keys may carry several rows per frame.
pub(super) fn frame_pair_mask(
    frames_q: usize,
    rows_q: usize,
    frames_k: usize,
    rows_k: usize,
    allow: &dyn Fn(usize, usize) -> bool,
) -> BoolMat {
    BoolMat::from_fn(frames_q * rows_q, frames_k * rows_k, |r, c| {
        let fq = r / rows_q + 1;
        let fk = c / rows_k + 1;
        !allow(fq, fk)
    })
}

/// One spatio-temporal attention block (the self-attention part of an
/// encoder layer or of a decoder layer), with post-norm after each attention
/// function.
#[derive(Debug, Clone)]
pub enum StAttention {
    Parallel {
        spatial: MultiHeadAttention,
        temporal: MultiHeadAttention,
        norm: LayerNorm,
    },
    Sequential {
        spatial_first: bool,
        spatial: MultiHeadAttention,
        temporal: MultiHeadAttention,
        norm_first: LayerNorm,
        norm_second: LayerNorm,
    },
    Joint {
        attention: MultiHeadAttention,
        norm: LayerNorm,
    },
}

impl StAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        variant: EncoderVariant,
        dim: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        match variant {
            EncoderVariant::Parallel => StAttention::Parallel {
                spatial: MultiHeadAttention::new(store, &format!("{prefix}.spatial"), dim, heads, head_dim, rng),
                temporal: MultiHeadAttention::new(store, &format!("{prefix}.temporal"), dim, heads, head_dim, rng),
                norm: LayerNorm::new(store, &format!("{prefix}.norm"), dim),
            },
            EncoderVariant::SpatialThenTemporal | EncoderVariant::TemporalThenSpatial => {
                StAttention::Sequential {
                    spatial_first: variant == EncoderVariant::SpatialThenTemporal,
                    spatial: MultiHeadAttention::new(store, &format!("{prefix}.spatial"), dim, heads, head_dim, rng),
                    temporal: MultiHeadAttention::new(store, &format!("{prefix}.temporal"), dim, heads, head_dim, rng),
                    norm_first: LayerNorm::new(store, &format!("{prefix}.norm1"), dim),
                    norm_second: LayerNorm::new(store, &format!("{prefix}.norm2"), dim),
                }
            }
            EncoderVariant::Joint => StAttention::Joint {
                attention: MultiHeadAttention::new(store, &format!("{prefix}.joint"), dim, heads, head_dim, rng),
                norm: LayerNorm::new(store, &format!("{prefix}.norm"), dim),
            },
        }
    }

    /// Self-attend a grid. `allow` is the temporal visibility rule over
    /// 1-based frame indices; spatial attention is never masked within a
    /// frame.
    pub fn forward(
        &self,
        g: &mut GradGraph,
        store: &ParamStore,
        grid: &Grid,
        allow: &dyn Fn(usize, usize) -> bool,
        spatial_mode: SpatialMode,
        stats: &mut EncodeStats,
    ) -> Result<Node, ModelError> {
        match self {
            StAttention::Parallel { spatial, temporal, norm } => {
                let s = spatial_pass(g, store, spatial, grid, grid.node, spatial_mode, stats)?;
                let t = temporal_pass(g, store, temporal, grid, grid.node, allow, stats)?;
                let sum = g.add(s, t)?;
                Ok(norm.forward(g, store, sum)?)
            }
            StAttention::Sequential {
                spatial_first,
                spatial,
                temporal,
                norm_first,
                norm_second,
            } => {
                if *spatial_first {
                    let s = spatial_pass(g, store, spatial, grid, grid.node, spatial_mode, stats)?;
                    let s = norm_first.forward(g, store, s)?;
                    let t = temporal_pass(g, store, temporal, grid, s, allow, stats)?;
                    Ok(norm_second.forward(g, store, t)?)
                } else {
                    let t = temporal_pass(g, store, temporal, grid, grid.node, allow, stats)?;
                    let t = norm_first.forward(g, store, t)?;
                    let s = spatial_pass(g, store, spatial, grid, t, spatial_mode, stats)?;
                    Ok(norm_second.forward(g, store, s)?)
                }
            }
            StAttention::Joint { attention, norm } => {
                let mask = frame_pair_mask(
                    grid.frames,
                    grid.rows_per_frame,
                    grid.frames,
                    grid.rows_per_frame,
                    allow,
                );
                let att = attention.forward(g, store, grid.node, grid.node, grid.node, Some(&mask))?;
                stats.score_entries += att.score_entries;
                Ok(norm.forward(g, store, att.out)?)
            }
        }
    }
}

/// Spatial self-attention over the rows of each frame of `input` (a node
/// with the same layout as `grid`).
fn spatial_pass(
    g: &mut GradGraph,
    store: &ParamStore,
    attention: &MultiHeadAttention,
    grid: &Grid,
    input: Node,
    mode: SpatialMode,
    stats: &mut EncodeStats,
) -> Result<Node, ModelError> {
    let rows = grid.rows_per_frame;
    match mode {
        SpatialMode::PerFrame => {
            let mut outputs = Vec::with_capacity(grid.frames);
            for f in 0..grid.frames {
                let x = g.slice(input, 0, f * rows, (f + 1) * rows)?;
                let att = attention.forward(g, store, x, x, x, None)?;
                stats.score_entries += att.score_entries;
                outputs.push(att.out);
            }
            if outputs.len() == 1 {
                Ok(outputs[0])
            } else {
                Ok(g.concat(&outputs, 0)?)
            }
        }
        SpatialMode::SameFrameBlock => {
            let mask = frame_pair_mask(grid.frames, rows, grid.frames, rows, &|fq, fk| fq == fk);
            let att = attention.forward(g, store, input, input, input, Some(&mask))?;
            stats.score_entries += att.score_entries;
            Ok(att.out)
        }
    }
}

/// Temporal self-attention over the frames of each participant of `input`,
/// restricted by `allow`.
fn temporal_pass(
    g: &mut GradGraph,
    store: &ParamStore,
    attention: &MultiHeadAttention,
    grid: &Grid,
    input: Node,
    allow: &dyn Fn(usize, usize) -> bool,
    stats: &mut EncodeStats,
) -> Result<Node, ModelError> {
    let rows = grid.rows_per_frame;
    let frames = grid.frames;
    let mask = frame_pair_mask(frames, 1, frames, 1, allow);
    let mut per_participant = Vec::with_capacity(rows);
    for r in 0..rows {
        let indices: Vec<usize> = (0..frames).map(|f| f * rows + r).collect();
        let x = g.gather_rows(input, &indices)?;
        let att = attention.forward(g, store, x, x, x, Some(&mask))?;
        stats.score_entries += att.score_entries;
        per_participant.push(att.out);
    }
    let stacked = if per_participant.len() == 1 {
        per_participant[0]
    } else {
        g.concat(&per_participant, 0)?
    };
    // Participant-major back to frame-major.
    let mut order = Vec::with_capacity(rows * frames);
    for f in 0..frames {
        for r in 0..rows {
            order.push(r * frames + f);
        }
    }
    Ok(g.gather_rows(stacked, &order)?)
}

/// One encoder layer: spatio-temporal self-attention followed by an FFN with
/// residual connection and post-norm.
#[derive(Debug, Clone)]
pub struct StLayer {
    pub attention: StAttention,
    pub ffn: FeedForward,
    pub norm_ffn: LayerNorm,
}

impl StLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        variant: EncoderVariant,
        dim: usize,
        heads: usize,
        head_dim: usize,
        ffn_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            attention: StAttention::new(store, &format!("{prefix}.attn"), variant, dim, heads, head_dim, rng),
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), dim, ffn_dim, rng),
            norm_ffn: LayerNorm::new(store, &format!("{prefix}.norm_ffn"), dim),
        }
    }

    pub fn forward(
        &self,
        g: &mut GradGraph,
        store: &ParamStore,
        grid: &Grid,
        allow: &dyn Fn(usize, usize) -> bool,
        spatial_mode: SpatialMode,
        stats: &mut EncodeStats,
    ) -> Result<Grid, ModelError> {
        let attended = self.attention.forward(g, store, grid, allow, spatial_mode, stats)?;
        let ffn_out = self.ffn.forward(g, store, attended)?;
        let resid = g.add(ffn_out, attended)?;
        let out = self.norm_ffn.forward(g, store, resid)?;
        Ok(Grid { node: out, ..*grid })
    }
}

/// Run the encoder stack over embedded observed features with foresight `k`.
///
/// The first layer's temporal mask allows key frame `fk` for query frame
/// `fq` iff `fk <= min(fq + k, T)`; deeper layers attend causally
/// (`fk <= fq`). Applying the foresight once keeps the receptive field of
/// the whole stack at exactly `fq + k` — with the horizon in every layer it
/// would compound to `fq + layers * k` and leak future observed frames past
/// the declared foresight.
pub fn st_encode(
    g: &mut GradGraph,
    store: &ParamStore,
    layers: &[StLayer],
    grid: Grid,
    k: usize,
    stats: &mut EncodeStats,
) -> Result<Grid, ModelError> {
    let total = grid.frames;
    let foresight = move |fq: usize, fk: usize| fk <= (fq + k).min(total);
    let causal = |fq: usize, fk: usize| fk <= fq;
    let mut current = grid;
    for (index, layer) in layers.iter().enumerate() {
        let allow: &dyn Fn(usize, usize) -> bool =
            if index == 0 { &foresight } else { &causal };
        current = layer.forward(g, store, &current, allow, SpatialMode::PerFrame, stats)?;
    }
    Ok(current)
}

/// Temporal visibility rule for a decoder stream of the given scope.
pub fn scope_allow(scope: TemporalScope) -> fn(usize, usize) -> bool {
    match scope {
        TemporalScope::Causal => |fq, fk| fk <= fq,
        TemporalScope::SelfOnly => |fq, fk| fk == fq,
    }
}
