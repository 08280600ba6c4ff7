//! Frame-wise rollout: estimate target behavior for frames `2..=T`, feeding
//! each frame's own estimates back as the history for the next frame.
//!
//! The encoder runs once per clip; its foresight masks make per-step
//! visibility correct without re-encoding. Optionally a noise spike replaces
//! the 6 non-time geometric components of chosen frames' estimates before
//! they enter subsequent history (the recorded estimates are kept as
//! produced); with `multi_task` the fed-back action labels are the argmax of
//! the model's own logits instead of ground truth.

use super::embed::{embed_history, HistoryFrame};
use super::{ClipInput, DecodeCapture, EfModel, EncodeStats, Grid, ModelError};
use crate::tensor::{GradGraph, Tensor};

/// Frames (1-based, within `[2, T-1]`) whose estimates are replaced by the
/// given 6D geometric vector `[uv, uv_delta, uv_r]` before feedback.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeSchedule {
    pub frames: Vec<usize>,
    pub vector: [f64; 6],
}

impl SpikeSchedule {
    /// The reference large-noise spike vector.
    pub const NOISE_VECTOR: [f64; 6] = [1.0, 1.0, -1.0, -1.0, -1.0, -1.0];

    pub fn at_frames(frames: Vec<usize>) -> Self {
        Self { frames, vector: Self::NOISE_VECTOR }
    }
}

#[derive(Debug, Clone)]
pub struct RolloutOptions {
    /// Foresight `K`: observed frames up to `min(t + K, T)` are visible when
    /// estimating frame `t` (0 = prediction, >= 1 = inference).
    pub foresight: usize,
    /// Feed back predicted action labels instead of ground truth.
    pub multi_task: bool,
    pub spike: Option<SpikeSchedule>,
    /// Record cross-attention weight snapshots per frame.
    pub capture_attention: bool,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self { foresight: 0, multi_task: false, spike: None, capture_attention: false }
    }
}

#[derive(Debug, Clone)]
pub struct TargetEstimate {
    /// Raw trajectory-head output in the configured coordinate mode.
    pub mode_pair: (f64, f64),
    /// Decoded absolute pixel position.
    pub abs: (f64, f64),
    pub action_logits: Vec<f64>,
    /// Argmax action (lowest index wins ties).
    pub action: usize,
}

#[derive(Debug, Clone)]
pub struct FrameEstimate {
    /// 1-based frame index in `2..=T`.
    pub frame: usize,
    pub targets: Vec<TargetEstimate>,
}

#[derive(Debug)]
pub struct RolloutResult {
    /// Ground-truth frame-1 positions of the targets.
    pub initial: Vec<(f64, f64)>,
    pub frames: Vec<FrameEstimate>,
    pub encode_stats: EncodeStats,
    /// Per estimated frame: final decoder layer cross-attention weights per
    /// head. Empty unless `capture_attention` was set.
    pub cross_attention: Vec<Vec<Tensor>>,
}

impl RolloutResult {
    /// Estimated absolute track of one target across frames `1..=T` (frame 1
    /// is the given initial state).
    pub fn estimated_track(&self, target: usize) -> Vec<(f64, f64)> {
        let mut track = Vec::with_capacity(self.frames.len() + 1);
        track.push(self.initial[target]);
        track.extend(self.frames.iter().map(|f| f.targets[target].abs));
        track
    }

    /// Estimated action labels of one target for frames `2..=T`.
    pub fn estimated_actions(&self, target: usize) -> Vec<usize> {
        self.frames.iter().map(|f| f.targets[target].action).collect()
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn rollout(
    model: &EfModel,
    clip: &ClipInput,
    opts: &RolloutOptions,
) -> Result<RolloutResult, ModelError> {
    clip.check_against(&model.config)?;
    let t_total = clip.frames;
    if opts.foresight > t_total - 1 {
        return Err(ModelError::Input(format!(
            "foresight K={} exceeds T-1={}",
            opts.foresight,
            t_total - 1
        )));
    }
    if let Some(spike) = &opts.spike {
        for &f in &spike.frames {
            if f < 2 || f > t_total - 1 {
                return Err(ModelError::Input(format!(
                    "spike frame {f} outside [2, {}]",
                    t_total - 1
                )));
            }
        }
    }

    let n_tgt = clip.targets.len();
    let (width, height) = (clip.width, clip.height);
    let mut g = GradGraph::new();
    let (x_enc, encode_stats) = model.encode_clip(&mut g, clip, opts.foresight)?;

    let first: Vec<(f64, f64)> = clip.targets.iter().map(|t| t.positions[0]).collect();
    let mut history: Vec<HistoryFrame> = vec![HistoryFrame {
        frame: 1,
        feats: clip
            .targets
            .iter()
            .map(|t| {
                super::geometric_feature(&t.positions, 1, width, height, t_total)
                    .expect("frame 1 exists")
            })
            .collect(),
        actions: clip.targets.iter().map(|t| t.actions[0]).collect(),
    }];
    // Effective positions carried into delta features; a spike overrides them.
    let mut effective: Vec<Vec<(f64, f64)>> = vec![first.clone()];

    let mut frames_out = Vec::with_capacity(t_total - 1);
    let mut cross_attention = Vec::new();

    for tau in 2..=t_total {
        let hist_grid = embed_history(&mut g, &model.store, &model.embed, &history, &model.config)?;
        let mut capture = DecodeCapture::default();
        let decoded = model.decode_history(
            &mut g,
            &x_enc,
            &hist_grid,
            opts.capture_attention.then_some(&mut capture),
        )?;
        let last = decoded.last_frame(&mut g)?;
        let single = Grid { node: last, frames: 1, ..decoded };
        let (traj, action) = model.predict(&mut g, &single)?;
        if opts.capture_attention {
            cross_attention.push(capture.cross_weights.pop().unwrap_or_default());
        }

        let traj_row = g.value(traj).row(0).to_vec();
        let action_row = g.value(action).row(0).to_vec();
        let classes = model.config.action_class_count;

        let prev = &effective[tau - 2];
        let mut targets = Vec::with_capacity(n_tgt);
        for j in 0..n_tgt {
            let pair = (traj_row[2 * j], traj_row[2 * j + 1]);
            let abs = super::decode_mode_pair(
                model.config.output_mode,
                pair,
                width,
                height,
                first[j],
                prev[j],
            );
            let logits = action_row[j * classes..(j + 1) * classes].to_vec();
            let action = argmax(&logits);
            targets.push(TargetEstimate { mode_pair: pair, abs, action_logits: logits, action });
        }

        // Build the history entry for frame tau from the estimates.
        let spiked = opts
            .spike
            .as_ref()
            .filter(|s| s.frames.contains(&tau))
            .map(|s| s.vector);
        let mut feats = Vec::with_capacity(n_tgt);
        let mut eff_frame = Vec::with_capacity(n_tgt);
        let mut fed_actions = Vec::with_capacity(n_tgt);
        for (j, est) in targets.iter().enumerate() {
            let (eff_abs, geo6) = match spiked {
                Some(v) => ((v[0] * width, v[1] * height), v),
                None => {
                    let (x, y) = est.abs;
                    let (px, py) = prev[j];
                    let (fx, fy) = first[j];
                    (
                        est.abs,
                        [
                            x / width,
                            y / height,
                            (x - px) / width,
                            (y - py) / height,
                            (x - fx) / width,
                            (y - fy) / height,
                        ],
                    )
                }
            };
            let mut feat = [0.0; 7];
            feat[..6].copy_from_slice(&geo6);
            feat[6] = tau as f64 / t_total as f64;
            feats.push(feat);
            eff_frame.push(eff_abs);
            fed_actions.push(if opts.multi_task {
                est.action
            } else {
                clip.targets[j].actions[tau - 1]
            });
        }
        history.push(HistoryFrame { frame: tau, feats, actions: fed_actions });
        effective.push(eff_frame);
        frames_out.push(FrameEstimate { frame: tau, targets });
    }

    Ok(RolloutResult {
        initial: first,
        frames: frames_out,
        encode_stats,
        cross_attention,
    })
}
