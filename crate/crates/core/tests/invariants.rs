//! Cross-module structural and property tests: attention against a
//! straight-line oracle, entry-flip query provenance, visibility contracts of
//! the frame-wise rollout, and the equivalence of batched teacher-forced
//! decoding with per-step decoding.

use efformer::model::{
    decode_stream, embed_history, geometric_feature, rollout, ClipInput, DecodeCapture,
    DecoderVariant, EfModel, EncoderVariant, HistoryFrame, ModelConfig, OutputMode,
    RolloutOptions, SpikeSchedule, TrackInput,
};
use efformer::nn::{MultiHeadAttention, ParamStore};
use efformer::tensor::{BoolMat, GradGraph, Tensor};
use efformer::train::{clip_loss, LossParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(decoder: DecoderVariant) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        geom_embed_dim: 6,
        action_embed_dim: 6,
        head_dim: 4,
        ffn_dim: 16,
        head_hidden_dim: 16,
        encoder_variant: EncoderVariant::SpatialThenTemporal,
        decoder_variant: decoder,
        output_mode: OutputMode::UvR,
        action_class_count: 4,
        n_obs: 3,
        n_tgt: 2,
    }
}

fn random_clip(rng: &mut ChaCha8Rng, n_obs: usize, n_tgt: usize, frames: usize) -> ClipInput {
    let mut track = |rng: &mut ChaCha8Rng| TrackInput {
        positions: (0..frames)
            .map(|_| (rng.random_range(50.0..590.0), rng.random_range(50.0..430.0)))
            .collect(),
        actions: (0..frames).map(|_| rng.random_range(0..4)).collect(),
    };
    ClipInput {
        clip_id: "clip".into(),
        observed: (0..n_obs).map(|_| track(rng)).collect(),
        targets: (0..n_tgt).map(|_| track(rng)).collect(),
        width: 640.0,
        height: 480.0,
        frames,
    }
}

// ── Attention against a straight-line evaluation ───────────────────────────

/// Independent brute-force multi-head attention: explicit loops, no shared
/// code with the graph implementation. `logit_shift` adds a constant to every
/// score row before the softmax.
fn oracle_attention(
    store: &ParamStore,
    mha: &MultiHeadAttention,
    xq: &Tensor,
    xk: &Tensor,
    xv: &Tensor,
    logit_shift: f64,
) -> Vec<Vec<f64>> {
    let apply_linear = |w: &Tensor, b: &Tensor, x: &Tensor| -> Vec<Vec<f64>> {
        let (rows, in_dim, out_dim) = (x.rows(), w.rows(), w.cols());
        let mut out = vec![vec![0.0; out_dim]; rows];
        for r in 0..rows {
            for o in 0..out_dim {
                let mut acc = b.data()[o];
                for i in 0..in_dim {
                    acc += x.at2(r, i) * w.at2(i, o);
                }
                out[r][o] = acc;
            }
        }
        out
    };
    let nq = xq.rows();
    let nk = xk.rows();
    let dh = mha.head_dim;
    let mut concat = vec![Vec::new(); nq];
    for head in &mha.heads {
        let q = apply_linear(store.get(head.query.weight), store.get(head.query.bias), xq);
        let k = apply_linear(store.get(head.key.weight), store.get(head.key.bias), xk);
        let v = apply_linear(store.get(head.value.weight), store.get(head.value.bias), xv);
        for r in 0..nq {
            // Scores, shifted, scaled, softmaxed.
            let mut scores = vec![0.0; nk];
            for c in 0..nk {
                let mut s = 0.0;
                for d in 0..dh {
                    s += q[r][d] * k[c][d];
                }
                scores[c] = (s + logit_shift) / (dh as f64).sqrt();
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let mut out_row = vec![0.0; dh];
            for c in 0..nk {
                let w = exps[c] / total;
                for d in 0..dh {
                    out_row[d] += w * v[c][d];
                }
            }
            concat[r].extend(out_row);
        }
    }
    let w_o = store.get(mha.output.weight);
    let b_o = store.get(mha.output.bias);
    let mut out = vec![vec![0.0; w_o.cols()]; nq];
    for r in 0..nq {
        for o in 0..w_o.cols() {
            let mut acc = b_o.data()[o];
            for (i, c) in concat[r].iter().enumerate() {
                acc += c * w_o.at2(i, o);
            }
            out[r][o] = acc + xq.at2(r, o);
        }
    }
    out
}

#[test]
fn attention_matches_straight_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "attn", 4, 2, 3, &mut rng);
    let rand_mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
        Tensor::new(
            vec![r, c],
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    };
    let xq = rand_mat(&mut rng, 2, 4);
    let xk = rand_mat(&mut rng, 3, 4);
    let xv = rand_mat(&mut rng, 3, 4);

    let mut g = GradGraph::new();
    let nq = g.constant(xq.clone());
    let nk = g.constant(xk.clone());
    let nv = g.constant(xv.clone());
    let att = mha.forward(&mut g, &store, nq, nk, nv, None).unwrap();
    let expected = oracle_attention(&store, &mha, &xq, &xk, &xv, 0.0);
    for r in 0..2 {
        for c in 0..4 {
            assert!(
                (g.value(att.out).at2(r, c) - expected[r][c]).abs() < 1e-10,
                "row {r} col {c}"
            );
        }
    }
}

#[test]
fn residual_is_invariant_to_per_row_logit_shifts() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "attn", 4, 2, 3, &mut rng);
    let rand_mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
        Tensor::new(
            vec![r, c],
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    };
    let xq = rand_mat(&mut rng, 2, 4);
    let xk = rand_mat(&mut rng, 3, 4);
    let xv = rand_mat(&mut rng, 3, 4);
    let base = oracle_attention(&store, &mha, &xq, &xk, &xv, 0.0);
    for shift in [-5.0, 3.7, 120.0] {
        let shifted = oracle_attention(&store, &mha, &xq, &xk, &xv, shift);
        for r in 0..2 {
            for c in 0..4 {
                assert!((base[r][c] - shifted[r][c]).abs() < 1e-10, "shift {shift}");
            }
        }
    }
}

#[test]
fn key_value_permutation_leaves_output_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "attn", 4, 2, 2, &mut rng);
    let rows: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let keys = Tensor::from_rows(&rows).unwrap();
    let perm_rows: Vec<Vec<f64>> = [2usize, 0, 3, 1].iter().map(|&i| rows[i].clone()).collect();
    let keys_perm = Tensor::from_rows(&perm_rows).unwrap();
    let xq = Tensor::from_rows(&[vec![0.3, -0.2, 0.9, 0.1], vec![1.0, 0.0, -1.0, 0.4]]).unwrap();

    let mut g = GradGraph::new();
    let q = g.constant(xq.clone());
    let k1 = g.constant(keys.clone());
    let k2 = g.constant(keys_perm.clone());
    let out1 = mha.forward(&mut g, &store, q, k1, k1, None).unwrap();
    let out2 = mha.forward(&mut g, &store, q, k2, k2, None).unwrap();
    for i in 0..8 {
        assert!(
            (g.value(out1.out).data()[i] - g.value(out2.out).data()[i]).abs() < 1e-12
        );
    }

    // Permuting the queries permutes the output rows identically.
    let xq_perm = Tensor::from_rows(&[vec![1.0, 0.0, -1.0, 0.4], vec![0.3, -0.2, 0.9, 0.1]]).unwrap();
    let qp = g.constant(xq_perm);
    let out3 = mha.forward(&mut g, &store, qp, k1, k1, None).unwrap();
    assert_eq!(g.value(out3.out).row(0), g.value(out1.out).row(1));
    assert_eq!(g.value(out3.out).row(1), g.value(out1.out).row(0));
}

#[test]
fn fully_masked_key_cannot_leak_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "attn", 4, 2, 2, &mut rng);
    let xq = Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4]]).unwrap();
    let make_kv = |third_row: Vec<f64>| {
        Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0], third_row])
            .unwrap()
    };
    // Key 2 is forbidden for every query.
    let mask = BoolMat::from_fn(1, 3, |_, c| c == 2);
    let mut g = GradGraph::new();
    let q = g.constant(xq);
    let kv_a = g.constant(make_kv(vec![5.0, -3.0, 2.0, 7.0]));
    let kv_b = g.constant(make_kv(vec![-100.0, 55.0, 0.5, 1e6]));
    let out_a = mha.forward(&mut g, &store, q, kv_a, kv_a, Some(&mask)).unwrap();
    let out_b = mha.forward(&mut g, &store, q, kv_b, kv_b, Some(&mask)).unwrap();
    assert_eq!(g.value(out_a.out).data(), g.value(out_b.out).data());
}

// ── Entry-flip structure ───────────────────────────────────────────────────

fn capture_cross_queries(model: &EfModel, clip: &ClipInput, scramble_history: bool) -> Vec<Tensor> {
    let mut g = GradGraph::new();
    let (x_enc, _) = model.encode_clip(&mut g, clip, 1).unwrap();
    let t_total = clip.frames;
    let mut history: Vec<HistoryFrame> = (1..t_total)
        .map(|t| HistoryFrame {
            frame: t,
            feats: clip
                .targets
                .iter()
                .map(|track| {
                    geometric_feature(&track.positions, t, clip.width, clip.height, t_total)
                        .unwrap()
                })
                .collect(),
            actions: clip.targets.iter().map(|track| track.actions[t - 1]).collect(),
        })
        .collect();
    if scramble_history {
        for (i, frame) in history.iter_mut().enumerate() {
            for (j, feat) in frame.feats.iter_mut().enumerate() {
                for (k, value) in feat.iter_mut().take(6).enumerate() {
                    *value += 17.0 + (i + 2 * j + 3 * k) as f64;
                }
            }
            for action in frame.actions.iter_mut() {
                *action = (*action + 1) % 4;
            }
        }
    }
    let grid = embed_history(&mut g, &model.store, &model.embed, &history, &model.config).unwrap();
    let mut capture = DecodeCapture::default();
    let all_query = matches!(model.config.decoder_variant, DecoderVariant::EfAllQuery);
    decode_stream(
        &mut g,
        &model.store,
        &model.decoder,
        all_query,
        &x_enc,
        &grid,
        Some(&mut capture),
    )
    .unwrap();
    capture.cross_queries
}

#[test]
fn entry_flipped_query_ignores_target_history_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let clip = random_clip(&mut rng, 3, 2, 8);
    for variant in [DecoderVariant::EfLimitedQuery, DecoderVariant::EfAllQuery] {
        let model = EfModel::new(small_config(variant), 51).unwrap();
        let clean = capture_cross_queries(&model, &clip, false);
        let scrambled = capture_cross_queries(&model, &clip, true);
        for (layer, (a, b)) in clean.iter().zip(&scrambled).enumerate() {
            assert_eq!(a.data(), b.data(), "{variant:?} layer {layer} query moved");
        }
    }
}

#[test]
fn typical_query_depends_on_target_history() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let clip = random_clip(&mut rng, 3, 2, 8);
    let model = EfModel::new(small_config(DecoderVariant::Typical), 53).unwrap();
    let clean = capture_cross_queries(&model, &clip, false);
    let scrambled = capture_cross_queries(&model, &clip, true);
    assert_ne!(clean[0].data(), scrambled[0].data());
}

// ── Rollout visibility contracts ───────────────────────────────────────────

#[test]
fn estimates_never_see_observed_frames_beyond_the_horizon() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    for decoder in [
        DecoderVariant::EfLimitedQuery,
        DecoderVariant::EfAllQuery,
        DecoderVariant::Typical,
        DecoderVariant::HybridTypicalThenEf,
    ] {
        let config = ModelConfig { n_obs: 3, n_tgt: 1, ..small_config(decoder) };
        let model = EfModel::new(config, 61).unwrap();
        let clip = random_clip(&mut rng, 3, 1, 10);
        for k in [0usize, 1, 3] {
            let opts = RolloutOptions { foresight: k, ..RolloutOptions::default() };
            let base = rollout(&model, &clip, &opts).unwrap();
            for tau in 2..=10usize {
                let horizon = (tau - 1 + k).min(10);
                if horizon == 10 {
                    continue;
                }
                let mut perturbed = clip.clone();
                for track in &mut perturbed.observed {
                    for t in horizon..10 {
                        track.positions[t].0 += 77.0;
                        track.positions[t].1 += 13.0;
                        track.actions[t] = (track.actions[t] + 1) % 4;
                    }
                }
                let moved = rollout(&model, &perturbed, &opts).unwrap();
                let (a, b) = (
                    &base.frames[tau - 2].targets[0],
                    &moved.frames[tau - 2].targets[0],
                );
                assert_eq!(a.abs, b.abs, "{decoder:?} k={k} tau={tau}");
                assert_eq!(a.action_logits, b.action_logits, "{decoder:?} k={k} tau={tau}");
            }
        }
    }
}

#[test]
fn estimates_ignore_target_ground_truth_after_frame_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let config = ModelConfig { n_obs: 3, n_tgt: 1, ..small_config(DecoderVariant::EfLimitedQuery) };
    let model = EfModel::new(config, 63).unwrap();
    let clip = random_clip(&mut rng, 3, 1, 8);

    // Trajectory task: positions after frame 1 must not matter (actions are
    // ground truth by design).
    let opts = RolloutOptions { foresight: 1, ..RolloutOptions::default() };
    let base = rollout(&model, &clip, &opts).unwrap();
    let mut moved = clip.clone();
    for track in &mut moved.targets {
        for t in 1..track.positions.len() {
            track.positions[t].0 += 200.0;
            track.positions[t].1 -= 50.0;
        }
    }
    let out = rollout(&model, &moved, &opts).unwrap();
    for (a, b) in base.frames.iter().zip(&out.frames) {
        assert_eq!(a.targets[0].abs, b.targets[0].abs);
    }

    // Multi-task: even the target actions after frame 1 are the model's own.
    let mt = RolloutOptions { foresight: 1, multi_task: true, ..RolloutOptions::default() };
    let base_mt = rollout(&model, &clip, &mt).unwrap();
    let mut scrambled = moved.clone();
    for track in &mut scrambled.targets {
        for t in 1..track.actions.len() {
            track.actions[t] = (track.actions[t] + 2) % 4;
        }
    }
    let out_mt = rollout(&model, &scrambled, &mt).unwrap();
    for (a, b) in base_mt.frames.iter().zip(&out_mt.frames) {
        assert_eq!(a.targets[0].abs, b.targets[0].abs);
        assert_eq!(a.targets[0].action, b.targets[0].action);
    }
}

#[test]
fn every_decoder_variant_produces_full_rollouts() {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let clip = random_clip(&mut rng, 3, 2, 6);
    for decoder in DecoderVariant::ALL {
        let model = EfModel::new(small_config(decoder), 65).unwrap();
        let opts = RolloutOptions { foresight: 1, ..RolloutOptions::default() };
        let result = rollout(&model, &clip, &opts).unwrap();
        assert_eq!(result.frames.len(), 5, "{decoder:?}");
        for frame in &result.frames {
            assert_eq!(frame.targets.len(), 2);
            for t in &frame.targets {
                assert!(t.abs.0.is_finite() && t.abs.1.is_finite());
                assert_eq!(t.action_logits.len(), 4);
            }
        }
    }
}

#[test]
fn rollout_argument_validation() {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let clip = random_clip(&mut rng, 3, 2, 6);
    let model = EfModel::new(small_config(DecoderVariant::EfLimitedQuery), 67).unwrap();
    // K > T - 1.
    let too_far = RolloutOptions { foresight: 6, ..RolloutOptions::default() };
    assert!(rollout(&model, &clip, &too_far).is_err());
    // Spike frames outside [2, T-1].
    for bad in [1usize, 6] {
        let opts = RolloutOptions {
            foresight: 1,
            spike: Some(SpikeSchedule::at_frames(vec![bad])),
            ..RolloutOptions::default()
        };
        assert!(rollout(&model, &clip, &opts).is_err(), "frame {bad}");
    }
}

#[test]
fn spike_enters_history_but_not_the_recorded_estimate() {
    let mut rng = ChaCha8Rng::seed_from_u64(68);
    let clip = random_clip(&mut rng, 3, 1, 8);
    let model = EfModel::new(
        ModelConfig { n_obs: 3, n_tgt: 1, ..small_config(DecoderVariant::EfLimitedQuery) },
        69,
    )
    .unwrap();
    let clean_opts = RolloutOptions { foresight: 1, ..RolloutOptions::default() };
    let spiked_opts = RolloutOptions {
        foresight: 1,
        spike: Some(SpikeSchedule::at_frames(vec![4])),
        ..RolloutOptions::default()
    };
    let clean = rollout(&model, &clip, &clean_opts).unwrap();
    let spiked = rollout(&model, &clip, &spiked_opts).unwrap();
    // Estimates up to and including the spike frame are identical (the spike
    // replaces the prediction only after it is recorded)...
    for tau in 2..=4usize {
        assert_eq!(
            clean.frames[tau - 2].targets[0].abs,
            spiked.frames[tau - 2].targets[0].abs
        );
    }
    // ...and the frames after it move.
    assert_ne!(
        clean.frames[4 - 2 + 1].targets[0].abs,
        spiked.frames[4 - 2 + 1].targets[0].abs
    );
}

#[test]
fn zero_trajectory_head_in_uvr_mode_copies_frame_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let clip = random_clip(&mut rng, 3, 1, 7);
    let mut model = EfModel::new(
        ModelConfig { n_obs: 3, n_tgt: 1, ..small_config(DecoderVariant::EfLimitedQuery) },
        71,
    )
    .unwrap();
    let fc3 = model.traj_head.fc3.clone();
    let zero_w = Tensor::zeros(model.store.get(fc3.weight).shape().to_vec());
    let zero_b = Tensor::zeros(model.store.get(fc3.bias).shape().to_vec());
    model.store.set(fc3.weight, zero_w).unwrap();
    model.store.set(fc3.bias, zero_b).unwrap();

    let opts = RolloutOptions { foresight: 1, ..RolloutOptions::default() };
    let result = rollout(&model, &clip, &opts).unwrap();
    let first = clip.targets[0].positions[0];
    for frame in &result.frames {
        assert_eq!(frame.targets[0].abs, first);
    }
    // MAD then equals the mean ground-truth displacement from frame 1.
    let est = result.estimated_track(0);
    let gt = &clip.targets[0].positions;
    let mad = efformer::metrics::mad(&est, gt).unwrap();
    let expected: f64 = gt[1..]
        .iter()
        .map(|&(x, y)| ((x - first.0).powi(2) + (y - first.1).powi(2)).sqrt())
        .sum::<f64>()
        / (gt.len() - 1) as f64;
    assert!((mad - expected).abs() < 1e-9);
}

#[test]
fn foresight_one_on_two_frame_clip_sees_both_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    let clip = random_clip(&mut rng, 3, 1, 2);
    let model = EfModel::new(
        ModelConfig { n_obs: 3, n_tgt: 1, ..small_config(DecoderVariant::EfLimitedQuery) },
        73,
    )
    .unwrap();
    // With K = 1 the single estimate (frame 2) may see observed frame 2:
    // perturbing it changes the estimate.
    let opts = RolloutOptions { foresight: 1, ..RolloutOptions::default() };
    let base = rollout(&model, &clip, &opts).unwrap();
    let mut moved = clip.clone();
    moved.observed[0].positions[1].0 += 50.0;
    let out = rollout(&model, &moved, &opts).unwrap();
    assert_ne!(base.frames[0].targets[0].abs, out.frames[0].targets[0].abs);

    // With K = 0 it must not.
    let opts0 = RolloutOptions { foresight: 0, ..RolloutOptions::default() };
    let base0 = rollout(&model, &clip, &opts0).unwrap();
    let out0 = rollout(&model, &moved, &opts0).unwrap();
    assert_eq!(base0.frames[0].targets[0].abs, out0.frames[0].targets[0].abs);
}

// ── Teacher-forced loss structure ──────────────────────────────────────────

/// Per-step teacher-forced loss: decode each history prefix separately and
/// sum the per-frame terms. Must match the single batched pass.
fn per_step_loss(model: &EfModel, clip: &ClipInput, k: usize, params: &LossParams) -> f64 {
    use efformer::model::Grid;
    let t_total = clip.frames;
    let mut total = 0.0;
    for tau in 2..=t_total {
        let mut g = GradGraph::new();
        let (x_enc, _) = model.encode_clip(&mut g, clip, k).unwrap();
        let history: Vec<HistoryFrame> = (1..tau)
            .map(|t| HistoryFrame {
                frame: t,
                feats: clip
                    .targets
                    .iter()
                    .map(|track| {
                        geometric_feature(&track.positions, t, clip.width, clip.height, t_total)
                            .unwrap()
                    })
                    .collect(),
                actions: clip.targets.iter().map(|track| track.actions[t - 1]).collect(),
            })
            .collect();
        let grid =
            embed_history(&mut g, &model.store, &model.embed, &history, &model.config).unwrap();
        let decoded = model.decode_history(&mut g, &x_enc, &grid, None).unwrap();
        let last = decoded.last_frame(&mut g).unwrap();
        let single = Grid { node: last, frames: 1, ..decoded };
        let (traj, action) = model.predict(&mut g, &single).unwrap();

        let n = clip.targets.len();
        let classes = model.config.action_class_count;
        let traj_rows = g.reshape(traj, vec![n, 2]).unwrap();
        let action_rows = g.reshape(action, vec![n, classes]).unwrap();
        let mut gt6 = Vec::new();
        let mut uv1 = Vec::new();
        let mut uv_prev = Vec::new();
        let mut onehot = Vec::new();
        for track in &clip.targets {
            let f = geometric_feature(&track.positions, tau, clip.width, clip.height, t_total)
                .unwrap();
            gt6.extend_from_slice(&f[..6]);
            uv1.extend_from_slice(&[track.positions[0].0 / clip.width, track.positions[0].1 / clip.height]);
            uv_prev.extend_from_slice(&[
                track.positions[tau - 2].0 / clip.width,
                track.positions[tau - 2].1 / clip.height,
            ]);
            let mut oh = vec![0.0; classes];
            oh[track.actions[tau - 1]] = 1.0;
            onehot.extend(oh);
        }
        let loss = efformer::train::trajectory_action_loss(
            &mut g,
            model.config.output_mode,
            traj_rows,
            &Tensor::new(vec![n, 6], gt6).unwrap(),
            &Tensor::new(vec![n, 2], uv1).unwrap(),
            &Tensor::new(vec![n, 2], uv_prev).unwrap(),
            Some((action_rows, &Tensor::new(vec![n, classes], onehot).unwrap())),
            params,
        )
        .unwrap();
        total += g.value(loss).scalar_value();
    }
    total
}

#[test]
fn batched_loss_equals_per_step_decoding_for_every_variant() {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let clip = random_clip(&mut rng, 3, 2, 7);
    let params = LossParams { lambda_action: 0.1, squared_error: false };
    for decoder in DecoderVariant::ALL {
        for mode in OutputMode::ALL {
            let config = ModelConfig { output_mode: mode, ..small_config(decoder) };
            let model = EfModel::new(config, 81).unwrap();
            let mut g = GradGraph::new();
            let batched = clip_loss(&mut g, &model, &clip, 1, &params).unwrap();
            let batched_value = g.value(batched).scalar_value();
            let stepped = per_step_loss(&model, &clip, 1, &params);
            let scale = batched_value.abs().max(1.0);
            assert!(
                (batched_value - stepped).abs() / scale < 1e-12,
                "{decoder:?}/{mode:?}: batched {batched_value} vs stepped {stepped}"
            );
        }
    }
}

#[test]
fn loss_is_invariant_under_target_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(82);
    let clip = random_clip(&mut rng, 3, 2, 6);
    let mut swapped = clip.clone();
    swapped.targets.swap(0, 1);
    // Permuting targets permutes head outputs only through the flatten
    // order, so compare a permutation-symmetric model state: the loss's
    // frame additivity and target sum make the ground-truth side symmetric.
    // Use a zeroed head so predictions are target-independent.
    let mut model = EfModel::new(small_config(DecoderVariant::EfLimitedQuery), 83).unwrap();
    for head in [&model.traj_head.fc3.clone(), &model.action_head.fc3.clone()] {
        let w = Tensor::zeros(model.store.get(head.weight).shape().to_vec());
        let b = Tensor::zeros(model.store.get(head.bias).shape().to_vec());
        model.store.set(head.weight, w).unwrap();
        model.store.set(head.bias, b).unwrap();
    }
    let params = LossParams { lambda_action: 0.1, squared_error: false };
    let value = |clip: &ClipInput| {
        let mut g = GradGraph::new();
        let l = clip_loss(&mut g, &model, clip, 1, &params).unwrap();
        g.value(l).scalar_value()
    };
    let a = value(&clip);
    let b = value(&swapped);
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

#[test]
fn zero_lambda_leaves_action_head_without_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(84);
    let clip = random_clip(&mut rng, 3, 2, 5);
    let model = EfModel::new(small_config(DecoderVariant::EfLimitedQuery), 85).unwrap();
    let mut g = GradGraph::new();
    let loss = clip_loss(
        &mut g,
        &model,
        &clip,
        1,
        &LossParams { lambda_action: 0.0, squared_error: false },
    )
    .unwrap();
    g.backward(loss).unwrap();
    for fc in [&model.action_head.fc1, &model.action_head.fc2, &model.action_head.fc3] {
        assert!(g.bound_grad(fc.weight.index()).is_none());
        assert!(g.bound_grad(fc.bias.index()).is_none());
    }
    // Trajectory head still learns.
    assert!(g.bound_grad(model.traj_head.fc3.weight.index()).is_some());
}

// ── Checkpoint round trip through the model ────────────────────────────────

#[test]
fn model_checkpoint_roundtrip_preserves_behavior() {
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let clip = random_clip(&mut rng, 3, 2, 6);
    let model = EfModel::new(small_config(DecoderVariant::EfLimitedQuery), 91).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.eft");
    let sidecar = dir.path().join("model.config.json");
    model.save(&ckpt, &sidecar).unwrap();
    let loaded = EfModel::load(&ckpt, &sidecar).unwrap();
    assert_eq!(loaded.config, model.config);

    // After an f32 round trip both stores are f32-identical, so the loaded
    // model must agree with a quantized copy of the original bitwise.
    let mut quantized = EfModel::new(small_config(DecoderVariant::EfLimitedQuery), 91).unwrap();
    for (id, _, value) in model.store.iter() {
        let q = Tensor::new(
            value.shape().to_vec(),
            value.data().iter().map(|&v| v as f32 as f64).collect(),
        )
        .unwrap();
        quantized.store.set(id, q).unwrap();
    }
    let opts = RolloutOptions { foresight: 1, ..RolloutOptions::default() };
    let a = rollout(&loaded, &clip, &opts).unwrap();
    let b = rollout(&quantized, &clip, &opts).unwrap();
    for (fa, fb) in a.frames.iter().zip(&b.frames) {
        assert_eq!(fa.targets[0].abs, fb.targets[0].abs);
    }

    // A sidecar that does not match the checkpoint is refused.
    let other = ModelConfig { layers: 1, ..small_config(DecoderVariant::EfLimitedQuery) };
    std::fs::write(&sidecar, other.to_json()).unwrap();
    assert!(EfModel::load(&ckpt, &sidecar).is_err());
}
