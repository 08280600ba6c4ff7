//! Feature embedding: the normalized 7D geometric feature, one-hot action
//! labels, two embedding maps, and frame-indexed sinusoidal positional
//! encoding.

use rand_chacha::ChaCha8Rng;

use super::{ClipInput, Grid, ModelConfig, ModelError, TemporalScope};
use crate::nn::{Linear, ParamStore};
use crate::tensor::{GradGraph, Node, Tensor};

/// Normalized 7D geometric feature of one track at frame `t` (1-based):
/// `[u/w, v/h, du/w, dv/h, (u-u1)/w, (v-v1)/h, t/T]`, where the delta is
/// taken against frame `t-1`. At `t = 1` the delta and relative components
/// are zero by convention.
pub fn geometric_feature(
    positions: &[(f64, f64)],
    t: usize,
    width: f64,
    height: f64,
    total_frames: usize,
) -> Result<[f64; 7], ModelError> {
    if t == 0 || t > total_frames || t > positions.len() {
        return Err(ModelError::Input(format!(
            "frame {t} out of range 1..={total_frames} (track has {} frames)",
            positions.len()
        )));
    }
    if width <= 0.0 || height <= 0.0 {
        return Err(ModelError::Input(format!(
            "scene size {width}x{height} must be positive"
        )));
    }
    let (u, v) = positions[t - 1];
    let (du, dv) = if t >= 2 {
        let (pu, pv) = positions[t - 2];
        (u - pu, v - pv)
    } else {
        (0.0, 0.0)
    };
    let (u1, v1) = positions[0];
    let (ru, rv) = if t >= 2 { (u - u1, v - v1) } else { (0.0, 0.0) };
    Ok([
        u / width,
        v / height,
        du / width,
        dv / height,
        ru / width,
        rv / height,
        t as f64 / total_frames as f64,
    ])
}

pub fn one_hot(label: usize, classes: usize) -> Result<Vec<f64>, ModelError> {
    if label >= classes {
        return Err(ModelError::Input(format!(
            "action id {label} outside vocabulary of {classes}"
        )));
    }
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    Ok(v)
}

/// Sinusoidal positional encoding indexed by frame only; every participant in
/// frame `t` receives the same vector.
pub fn sinusoidal_pe(t: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; dim];
    let mut i = 0;
    while 2 * i < dim {
        let rate = 10000f64.powf(2.0 * i as f64 / dim as f64);
        pe[2 * i] = (t as f64 / rate).sin();
        if 2 * i + 1 < dim {
            pe[2 * i + 1] = (t as f64 / rate).cos();
        }
        i += 1;
    }
    pe
}

/// The two input embedding maps: geometry (7D in) and action (one-hot in),
/// concatenated to the model dimension before positional encoding is added.
#[derive(Debug, Clone)]
pub struct EmbedParams {
    pub geometric: Linear,
    pub action: Linear,
}

impl EmbedParams {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            geometric: Linear::new(store, "embed.geometric", 7, config.geom_embed_dim, rng),
            action: Linear::new(
                store,
                "embed.action",
                config.action_class_count,
                config.action_embed_dim,
                rng,
            ),
        }
    }
}

/// Per-target features of one history frame, as fed back during rollout.
#[derive(Debug, Clone)]
pub struct HistoryFrame {
    /// 1-based frame index (drives the positional encoding).
    pub frame: usize,
    /// 7D geometric feature per target.
    pub feats: Vec<[f64; 7]>,
    /// Action label per target.
    pub actions: Vec<usize>,
}

/// Embed frame-major rows: `geo[i]` and `actions[i]` belong to the row whose
/// 1-based frame index is `frames[i]`.
fn embed_rows(
    g: &mut GradGraph,
    store: &ParamStore,
    embed: &EmbedParams,
    geo: &[[f64; 7]],
    actions: &[usize],
    frames: &[usize],
    config: &ModelConfig,
) -> Result<Node, ModelError> {
    let rows = geo.len();
    debug_assert_eq!(rows, actions.len());
    debug_assert_eq!(rows, frames.len());
    let dim = config.model_dim();

    let mut geo_data = Vec::with_capacity(rows * 7);
    for f in geo {
        geo_data.extend_from_slice(f);
    }
    let mut onehot_data = Vec::with_capacity(rows * config.action_class_count);
    for &a in actions {
        onehot_data.extend(one_hot(a, config.action_class_count)?);
    }
    let mut pe_data = Vec::with_capacity(rows * dim);
    for &t in frames {
        pe_data.extend(sinusoidal_pe(t, dim));
    }

    let geo_node = g.constant(Tensor::new(vec![rows, 7], geo_data)?);
    let onehot_node = g.constant(Tensor::new(vec![rows, config.action_class_count], onehot_data)?);
    let pe_node = g.constant(Tensor::new(vec![rows, dim], pe_data)?);

    let geo_embedded = embed.geometric.forward(g, store, geo_node)?;
    let action_embedded = embed.action.forward(g, store, onehot_node)?;
    let fused = g.concat(&[geo_embedded, action_embedded], 1)?;
    Ok(g.add(fused, pe_node)?)
}

/// Embed all observed tracks of a clip into a frame-major grid
/// `[T * n_obs, D]`.
pub fn embed_observed(
    g: &mut GradGraph,
    store: &ParamStore,
    embed: &EmbedParams,
    clip: &ClipInput,
    config: &ModelConfig,
) -> Result<Grid, ModelError> {
    let t_total = clip.frames;
    let mut geo = Vec::with_capacity(t_total * clip.observed.len());
    let mut actions = Vec::with_capacity(t_total * clip.observed.len());
    let mut frames = Vec::with_capacity(t_total * clip.observed.len());
    for t in 1..=t_total {
        for track in &clip.observed {
            geo.push(geometric_feature(
                &track.positions,
                t,
                clip.width,
                clip.height,
                t_total,
            )?);
            actions.push(track.actions[t - 1]);
            frames.push(t);
        }
    }
    let node = embed_rows(g, store, embed, &geo, &actions, &frames, config)?;
    Ok(Grid {
        node,
        rows_per_frame: clip.observed.len(),
        frames: t_total,
        scope: TemporalScope::Causal,
    })
}

/// Embed target-history frames (ground truth or fed-back estimates) into a
/// frame-major grid `[len * n_tgt, D]`.
pub fn embed_history(
    g: &mut GradGraph,
    store: &ParamStore,
    embed: &EmbedParams,
    history: &[HistoryFrame],
    config: &ModelConfig,
) -> Result<Grid, ModelError> {
    if history.is_empty() {
        return Err(ModelError::Input("empty target history".into()));
    }
    let per_frame = history[0].feats.len();
    let mut geo = Vec::with_capacity(history.len() * per_frame);
    let mut actions = Vec::with_capacity(history.len() * per_frame);
    let mut frames = Vec::with_capacity(history.len() * per_frame);
    for frame in history {
        debug_assert_eq!(frame.feats.len(), per_frame);
        debug_assert_eq!(frame.actions.len(), per_frame);
        for (f, &a) in frame.feats.iter().zip(&frame.actions) {
            geo.push(*f);
            actions.push(a);
            frames.push(frame.frame);
        }
    }
    let node = embed_rows(g, store, embed, &geo, &actions, &frames, config)?;
    Ok(Grid {
        node,
        rows_per_frame: per_frame,
        frames: history.len(),
        scope: TemporalScope::Causal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TrackInput;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn geometric_feature_direct_substitution() {
        let positions = vec![(128.0, 96.0), (256.0, 192.0), (320.0, 240.0)];
        // Frame 3 here plays the "t=2 with prev/first" example role: current
        // (320,240), previous (256,192), first (128,96).
        let f = geometric_feature(&positions, 3, 640.0, 480.0, 10).unwrap();
        let expected = [0.5, 0.5, 0.1, 0.1, 0.3, 0.3, 0.3];
        for (a, e) in f.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "{f:?}");
        }

        // And the curated case: t=2 with T=10 gives time component 0.2.
        let two = vec![(256.0, 192.0), (320.0, 240.0)];
        let f2 = geometric_feature(&two, 2, 640.0, 480.0, 10).unwrap();
        assert!((f2[6] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn frame_one_has_zero_delta_and_relative_parts() {
        let positions = vec![(100.0, 50.0), (120.0, 60.0)];
        let f = geometric_feature(&positions, 1, 640.0, 480.0, 2).unwrap();
        assert_eq!(&f[2..6], &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn stationary_track_has_zero_motion_components() {
        let positions = vec![(10.0, 20.0); 5];
        for t in 1..=5 {
            let f = geometric_feature(&positions, t, 100.0, 100.0, 5).unwrap();
            assert_eq!(&f[2..6], &[0.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn out_of_range_frame_rejected() {
        let positions = vec![(0.0, 0.0)];
        assert!(geometric_feature(&positions, 0, 10.0, 10.0, 1).is_err());
        assert!(geometric_feature(&positions, 2, 10.0, 10.0, 1).is_err());
    }

    #[test]
    fn pe_is_participant_independent_and_zero_embeds_reduce_to_pe() {
        let config = ModelConfig {
            geom_embed_dim: 4,
            action_embed_dim: 4,
            action_class_count: 3,
            n_obs: 2,
            n_tgt: 1,
            ..ModelConfig::default()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let embed = EmbedParams::new(&mut store, &config, &mut rng);
        // Zero both embedding maps; features must equal the PE alone.
        store.set(embed.geometric.weight, Tensor::zeros(vec![7, 4])).unwrap();
        store.set(embed.action.weight, Tensor::zeros(vec![3, 4])).unwrap();

        let clip = ClipInput {
            clip_id: "c".into(),
            observed: vec![
                TrackInput { positions: vec![(1.0, 2.0), (3.0, 4.0)], actions: vec![0, 1] },
                TrackInput { positions: vec![(5.0, 6.0), (7.0, 8.0)], actions: vec![2, 0] },
            ],
            targets: vec![TrackInput { positions: vec![(0.0, 0.0); 2], actions: vec![0, 0] }],
            width: 10.0,
            height: 10.0,
            frames: 2,
        };
        let mut g = GradGraph::new();
        let grid = embed_observed(&mut g, &store, &embed, &clip, &config).unwrap();
        assert_eq!(g.value(grid.node).shape(), &[4, 8]);
        for t in 1..=2usize {
            let pe = sinusoidal_pe(t, 8);
            for participant in 0..2 {
                let row = g.value(grid.node).row((t - 1) * 2 + participant).to_vec();
                assert_eq!(row, pe, "frame {t} participant {participant}");
            }
        }
    }

    #[test]
    fn default_pipeline_shape_is_n_by_t_by_128() {
        let config = ModelConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let embed = EmbedParams::new(&mut store, &config, &mut rng);
        let track = TrackInput {
            positions: (0..10).map(|i| (i as f64, i as f64)).collect(),
            actions: vec![0; 10],
        };
        let clip = ClipInput {
            clip_id: "c".into(),
            observed: vec![track.clone(), track.clone(), track.clone()],
            targets: vec![track],
            width: 640.0,
            height: 480.0,
            frames: 10,
        };
        let mut g = GradGraph::new();
        let grid = embed_observed(&mut g, &store, &embed, &clip, &config).unwrap();
        assert_eq!(g.value(grid.node).shape(), &[30, 128]);
    }
}
