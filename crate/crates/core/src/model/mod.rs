//! The entry-flipped transformer: embedding, spatio-temporal encoder,
//! decoder variants, prediction heads, and the frame-wise rollout engine.
//!
//! Frame-wise estimation works on fixed participant sets: `n_obs` observed
//! participants stream ground truth every frame, `n_tgt` target participants
//! are known only at frame 1 and estimated for frames `2..=T`. Foresight `K`
//! controls how many future observed frames the encoder may attend
//! (`K = 0` is prediction, `K >= 1` is inference) and enters the model only
//! through the encoder's temporal masks.

mod decoder;
mod embed;
mod encoder;
mod head;
mod rollout;

pub use decoder::{decode_stream, DecodeCapture, DecoderKind, DecoderLayer};
pub use embed::{
    embed_history, embed_observed, geometric_feature, one_hot, sinusoidal_pe, EmbedParams,
    HistoryFrame,
};
pub use encoder::{st_encode, EncodeStats, SpatialMode, StAttention, StLayer};
pub use head::{decode_mode_pair, PredictionHead};
pub use rollout::{
    rollout, FrameEstimate, RolloutOptions, RolloutResult, SpikeSchedule, TargetEstimate,
};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ClipRecord, DatasetManifest, Role};
use crate::nn::{
    config_digest, load_checkpoint, save_checkpoint, CheckpointError, NnError, ParamStore,
};
use crate::tensor::{GradGraph, Node, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
}

/// Spatio-temporal encoder structures: parallel spatial+temporal attention,
/// the two sequential orders, or joint attention over all participant-frame
/// tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderVariant {
    Parallel,
    SpatialThenTemporal,
    TemporalThenSpatial,
    Joint,
}

/// Decoder structures. Entry-flipped decoders use encoded observed features
/// as the cross-attention query and self-attended target history as key and
/// value; the typical decoder keeps the standard order. Hybrids mix one layer
/// of each and require a two-layer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderVariant {
    Typical,
    EfLimitedQuery,
    EfAllQuery,
    HybridTypicalThenEf,
    HybridEfThenTypical,
}

impl EncoderVariant {
    pub const ALL: [EncoderVariant; 4] = [
        EncoderVariant::Parallel,
        EncoderVariant::SpatialThenTemporal,
        EncoderVariant::TemporalThenSpatial,
        EncoderVariant::Joint,
    ];

    pub fn cli_name(self) -> &'static str {
        match self {
            EncoderVariant::Parallel => "par",
            EncoderVariant::SpatialThenTemporal => "st",
            EncoderVariant::TemporalThenSpatial => "ts",
            EncoderVariant::Joint => "joint",
        }
    }

    pub fn from_cli_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.cli_name() == name)
    }
}

impl DecoderVariant {
    pub const ALL: [DecoderVariant; 5] = [
        DecoderVariant::Typical,
        DecoderVariant::EfLimitedQuery,
        DecoderVariant::EfAllQuery,
        DecoderVariant::HybridTypicalThenEf,
        DecoderVariant::HybridEfThenTypical,
    ];

    pub fn is_entry_flipped(self) -> bool {
        !matches!(self, DecoderVariant::Typical)
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            DecoderVariant::Typical => "typical",
            DecoderVariant::EfLimitedQuery => "ef",
            DecoderVariant::EfAllQuery => "allq",
            DecoderVariant::HybridTypicalThenEf => "hyb-te",
            DecoderVariant::HybridEfThenTypical => "hyb-et",
        }
    }

    pub fn from_cli_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.cli_name() == name)
    }
}

impl OutputMode {
    pub const ALL: [OutputMode; 3] = [OutputMode::Uv, OutputMode::CumulativeDelta, OutputMode::UvR];

    pub fn cli_name(self) -> &'static str {
        match self {
            OutputMode::Uv => "uv",
            OutputMode::CumulativeDelta => "cumdelta",
            OutputMode::UvR => "uvr",
        }
    }

    pub fn from_cli_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.cli_name() == name)
    }
}

/// Coordinate space of the trajectory head output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputMode {
    /// Absolute normalized coordinates.
    Uv,
    /// Per-frame normalized displacement, accumulated from the last estimate.
    CumulativeDelta,
    /// Normalized offset from the frame-1 position.
    UvR,
}

/// Architecture hyperparameters. The participant split (`n_obs`, `n_tgt`) and
/// the action vocabulary size are fixed per trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub geom_embed_dim: usize,
    pub action_embed_dim: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub head_hidden_dim: usize,
    pub encoder_variant: EncoderVariant,
    pub decoder_variant: DecoderVariant,
    pub output_mode: OutputMode,
    pub action_class_count: usize,
    pub n_obs: usize,
    pub n_tgt: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 8,
            geom_embed_dim: 64,
            action_embed_dim: 64,
            head_dim: 8,
            ffn_dim: 256,
            head_hidden_dim: 128,
            encoder_variant: EncoderVariant::SpatialThenTemporal,
            decoder_variant: DecoderVariant::EfLimitedQuery,
            output_mode: OutputMode::UvR,
            action_class_count: 9,
            n_obs: 3,
            n_tgt: 1,
        }
    }
}

impl ModelConfig {
    pub fn model_dim(&self) -> usize {
        self.geom_embed_dim + self.action_embed_dim
    }

    /// Row count of the feature block handed to the prediction heads.
    pub fn head_rows(&self) -> usize {
        match self.decoder_variant {
            DecoderVariant::Typical => self.n_tgt,
            _ => self.n_obs,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.layers == 0 {
            return fail("layers must be >= 1".into());
        }
        if self.heads == 0 {
            return fail("heads must be >= 1".into());
        }
        if self.geom_embed_dim == 0 || self.action_embed_dim == 0 {
            return fail("embedding dims must be positive".into());
        }
        if self.head_dim == 0 || self.ffn_dim == 0 || self.head_hidden_dim == 0 {
            return fail("layer dims must be positive".into());
        }
        if self.action_class_count == 0 {
            return fail("action_class_count must be >= 1".into());
        }
        if self.n_obs == 0 || self.n_tgt == 0 {
            return fail("n_obs and n_tgt must be >= 1".into());
        }
        if matches!(
            self.decoder_variant,
            DecoderVariant::HybridTypicalThenEf | DecoderVariant::HybridEfThenTypical
        ) && self.layers != 2
        {
            return fail(format!(
                "hybrid decoder variants require layers == 2, got {}",
                self.layers
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Digest used to pair checkpoints with their configuration.
    pub fn digest(&self) -> String {
        config_digest(&serde_json::to_string(self).expect("config serializes"))
    }
}

/// One participant's raw per-frame behavior.
#[derive(Debug, Clone)]
pub struct TrackInput {
    pub positions: Vec<(f64, f64)>,
    pub actions: Vec<usize>,
}

/// One clip prepared for the model: observed and target tracks plus scene
/// geometry.
#[derive(Debug, Clone)]
pub struct ClipInput {
    pub clip_id: String,
    pub observed: Vec<TrackInput>,
    pub targets: Vec<TrackInput>,
    pub width: f64,
    pub height: f64,
    pub frames: usize,
}

impl ClipInput {
    pub fn from_record(record: &ClipRecord, manifest: &DatasetManifest) -> Self {
        let mut observed = Vec::new();
        let mut targets = Vec::new();
        for track in &record.participants {
            let data = TrackInput {
                positions: track.positions.clone(),
                actions: track.actions.clone(),
            };
            match track.role {
                Role::Observed => observed.push(data),
                Role::Target => targets.push(data),
            }
        }
        Self {
            clip_id: record.clip_id.clone(),
            observed,
            targets,
            width: manifest.width,
            height: manifest.height,
            frames: record.frames,
        }
    }

    /// Check the clip against a model configuration.
    pub fn check_against(&self, config: &ModelConfig) -> Result<(), ModelError> {
        if self.observed.len() != config.n_obs || self.targets.len() != config.n_tgt {
            return Err(ModelError::Input(format!(
                "clip {}: participant split {}/{} does not match model {}/{}",
                self.clip_id,
                self.observed.len(),
                self.targets.len(),
                config.n_obs,
                config.n_tgt
            )));
        }
        if self.frames < 2 {
            return Err(ModelError::Input(format!(
                "clip {}: needs at least 2 frames",
                self.clip_id
            )));
        }
        for track in self.observed.iter().chain(&self.targets) {
            if track.positions.len() != self.frames || track.actions.len() != self.frames {
                return Err(ModelError::Input(format!(
                    "clip {}: track length mismatch",
                    self.clip_id
                )));
            }
            if let Some(&a) = track.actions.iter().find(|&&a| a >= config.action_class_count) {
                return Err(ModelError::Input(format!(
                    "clip {}: action id {} outside vocabulary of {}",
                    self.clip_id, a, config.action_class_count
                )));
            }
        }
        Ok(())
    }
}

/// Whether frames of a feature stream may attend earlier frames of the same
/// stream. History streams are causal; the pseudo-frame stream produced by a
/// limited-query entry-flipped layer is step-isolated, so downstream
/// attention must stay within each frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalScope {
    Causal,
    SelfOnly,
}

/// Frame-major feature grid inside a graph: the rows of frame `f`
/// (0-based) occupy row indices `f * rows_per_frame ..`.
#[derive(Debug, Clone, Copy)]
pub struct Grid {
    pub node: Node,
    pub rows_per_frame: usize,
    pub frames: usize,
    pub scope: TemporalScope,
}

impl Grid {
    pub fn total_rows(&self) -> usize {
        self.rows_per_frame * self.frames
    }

    /// Rows of one frame (0-based index).
    pub fn frame_rows(&self, g: &mut GradGraph, frame: usize) -> Result<Node, TensorError> {
        let r = self.rows_per_frame;
        g.slice(self.node, 0, frame * r, (frame + 1) * r)
    }

    /// Rows of the first `count` frames.
    pub fn frames_prefix(&self, g: &mut GradGraph, count: usize) -> Result<Node, TensorError> {
        g.slice(self.node, 0, 0, count * self.rows_per_frame)
    }

    /// Rows of participant `r` across all frames, in frame order.
    pub fn participant_rows(&self, g: &mut GradGraph, r: usize) -> Result<Node, TensorError> {
        let indices: Vec<usize> = (0..self.frames)
            .map(|f| f * self.rows_per_frame + r)
            .collect();
        g.gather_rows(self.node, &indices)
    }

    pub fn last_frame(&self, g: &mut GradGraph) -> Result<Node, TensorError> {
        self.frame_rows(g, self.frames - 1)
    }
}

/// The full model: embedding, encoder stack, decoder stack, and the two
/// prediction heads, with all parameters in one named store.
pub struct EfModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embed: EmbedParams,
    pub encoder: Vec<StLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub traj_head: PredictionHead,
    pub action_head: PredictionHead,
}

impl EfModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dim = config.model_dim();

        let embed = EmbedParams::new(&mut store, &config, &mut rng);
        let encoder = (0..config.layers)
            .map(|l| {
                StLayer::new(
                    &mut store,
                    &format!("enc{l}"),
                    config.encoder_variant,
                    dim,
                    config.heads,
                    config.head_dim,
                    config.ffn_dim,
                    &mut rng,
                )
            })
            .collect();
        let kinds: Vec<DecoderKind> = match config.decoder_variant {
            DecoderVariant::Typical => vec![DecoderKind::Typical; config.layers],
            DecoderVariant::EfLimitedQuery | DecoderVariant::EfAllQuery => {
                vec![DecoderKind::EntryFlipped; config.layers]
            }
            DecoderVariant::HybridTypicalThenEf => {
                vec![DecoderKind::Typical, DecoderKind::EntryFlipped]
            }
            DecoderVariant::HybridEfThenTypical => {
                vec![DecoderKind::EntryFlipped, DecoderKind::Typical]
            }
        };
        let decoder = kinds
            .into_iter()
            .enumerate()
            .map(|(l, kind)| {
                DecoderLayer::new(
                    &mut store,
                    &format!("dec{l}"),
                    kind,
                    config.encoder_variant,
                    dim,
                    config.heads,
                    config.head_dim,
                    config.ffn_dim,
                    &mut rng,
                )
            })
            .collect();
        let head_in = config.head_rows() * dim;
        let traj_head = PredictionHead::new(
            &mut store,
            "traj_head",
            head_in,
            config.head_hidden_dim,
            config.n_tgt * 2,
            &mut rng,
        );
        let action_head = PredictionHead::new(
            &mut store,
            "action_head",
            head_in,
            config.head_hidden_dim,
            config.n_tgt * config.action_class_count,
            &mut rng,
        );
        Ok(Self {
            config,
            store,
            embed,
            encoder,
            decoder,
            traj_head,
            action_head,
        })
    }

    /// Embed and encode the observed tracks of a clip with foresight `k`.
    pub fn encode_clip(
        &self,
        g: &mut GradGraph,
        clip: &ClipInput,
        k: usize,
    ) -> Result<(Grid, EncodeStats), ModelError> {
        let grid = embed_observed(g, &self.store, &self.embed, clip, &self.config)?;
        let mut stats = EncodeStats::default();
        let encoded = st_encode(g, &self.store, &self.encoder, grid, k, &mut stats)?;
        Ok((encoded, stats))
    }

    /// Run the decoder stack over an embedded target-history grid.
    pub fn decode_history(
        &self,
        g: &mut GradGraph,
        x_enc: &Grid,
        history: &Grid,
        capture: Option<&mut DecodeCapture>,
    ) -> Result<Grid, ModelError> {
        let all_query = matches!(self.config.decoder_variant, DecoderVariant::EfAllQuery);
        decode_stream(g, &self.store, &self.decoder, all_query, x_enc, history, capture)
    }

    /// Apply both prediction heads to the final decoder rows of each frame.
    /// Returns `(trajectory, action)` nodes of shapes
    /// `[frames, n_tgt*2]` and `[frames, n_tgt*action_class_count]`.
    pub fn predict(
        &self,
        g: &mut GradGraph,
        decoded: &Grid,
    ) -> Result<(Node, Node), ModelError> {
        let flat_dim = decoded.rows_per_frame * self.config.model_dim();
        let traj = self
            .traj_head
            .forward_flattened(g, &self.store, decoded.node, decoded.frames, flat_dim)?;
        let action = self
            .action_head
            .forward_flattened(g, &self.store, decoded.node, decoded.frames, flat_dim)?;
        Ok((traj, action))
    }

    /// Write the checkpoint plus its JSON config sidecar.
    pub fn save(&self, checkpoint: &Path, sidecar: &Path) -> Result<(), ModelError> {
        std::fs::write(sidecar, self.config.to_json())
            .map_err(|e| ModelError::Input(format!("writing {}: {e}", sidecar.display())))?;
        save_checkpoint(checkpoint, &self.store, &self.config.digest())?;
        Ok(())
    }

    /// Load a checkpoint whose header hash must match the sidecar config.
    pub fn load(checkpoint: &Path, sidecar: &Path) -> Result<Self, ModelError> {
        let raw = std::fs::read_to_string(sidecar)
            .map_err(|e| ModelError::Input(format!("reading {}: {e}", sidecar.display())))?;
        let config: ModelConfig = serde_json::from_str(&raw)
            .map_err(|e| ModelError::Config(format!("sidecar {}: {e}", sidecar.display())))?;
        let tensors = load_checkpoint(checkpoint, &config.digest())?;
        let mut model = Self::new(config, 0)?;
        if tensors.len() != model.store.len() {
            return Err(ModelError::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                model.store.len()
            )));
        }
        for (name, tensor) in tensors {
            let id = model.store.id_by_name(&name).ok_or_else(|| {
                ModelError::Config(format!("checkpoint tensor {name:?} unknown to this model"))
            })?;
            model.store.set(id, tensor)?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_dim_128() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.model_dim(), 128);
    }

    #[test]
    fn hybrid_requires_two_layers() {
        let cfg = ModelConfig {
            decoder_variant: DecoderVariant::HybridTypicalThenEf,
            layers: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn digest_changes_with_config() {
        let a = ModelConfig::default();
        let b = ModelConfig { layers: 1, ..ModelConfig::default() };
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), ModelConfig::default().digest());
    }
}
