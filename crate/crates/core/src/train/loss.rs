//! The loss: per target and per estimated frame, the Euclidean norm of the
//! error on the 6 non-time geometric components plus `lambda` times the
//! Euclidean norm of the action error (one-hot ground truth against raw
//! logits). Norms are not squared unless `squared_error` is set.

use super::TrainError;
use crate::model::{
    embed_history, geometric_feature, one_hot, ClipInput, EfModel, HistoryFrame, OutputMode,
};
use crate::tensor::{GradGraph, Node, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct LossParams {
    pub lambda_action: f64,
    pub squared_error: bool,
}

/// Assemble the predicted 6D geometric feature from trajectory-head output
/// and reduce it against ground truth.
///
/// `traj` holds one `(u, v)` pair per row in the configured mode. The
/// derived components are affine in the head output:
/// `x6 = [traj + base_uv, traj + base_delta, traj + base_r]`, with the bases
/// chosen per mode from the frame-1 position `uv1` and the previous position
/// `uv_prev` (both normalized). `gt6` is the ground-truth `[uv, uv_d, uv_r]`
/// block. The action term compares raw logits to one-hot labels.
pub fn trajectory_action_loss(
    g: &mut GradGraph,
    mode: OutputMode,
    traj: Node,
    gt6: &Tensor,
    uv1: &Tensor,
    uv_prev: &Tensor,
    action: Option<(Node, &Tensor)>,
    params: &LossParams,
) -> Result<Node, TrainError> {
    let rows = gt6.rows();
    let zero = Tensor::zeros(vec![rows, 2]);
    let minus = |a: &Tensor, b: &Tensor| {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        Tensor::new(vec![rows, 2], data).expect("matching shapes")
    };
    // Bases so that uv = traj + base_uv, etc., given what the head predicts.
    let (base_uv, base_delta, base_r) = match mode {
        OutputMode::Uv => (zero.clone(), minus(&zero, uv_prev), minus(&zero, uv1)),
        OutputMode::CumulativeDelta => (uv_prev.clone(), zero.clone(), minus(uv_prev, uv1)),
        OutputMode::UvR => (uv1.clone(), minus(uv1, uv_prev), zero.clone()),
    };

    let c_uv = g.constant(base_uv);
    let c_delta = g.constant(base_delta);
    let c_r = g.constant(base_r);
    let p_uv = g.add(traj, c_uv)?;
    let p_delta = g.add(traj, c_delta)?;
    let p_r = g.add(traj, c_r)?;
    let predicted6 = g.concat(&[p_uv, p_delta, p_r], 1)?;

    let gt_node = g.constant(gt6.clone());
    let diff = g.sub(predicted6, gt_node)?;
    let norms = g.l2_norm_rows(diff)?;
    let norms = if params.squared_error { g.square(norms) } else { norms };
    let mut total = g.sum(norms);

    if let (Some((logits, onehot)), true) = (action, params.lambda_action > 0.0) {
        let oh = g.constant(onehot.clone());
        let adiff = g.sub(logits, oh)?;
        let anorms = g.l2_norm_rows(adiff)?;
        let anorms = if params.squared_error { g.square(anorms) } else { anorms };
        let asum = g.sum(anorms);
        let weighted = g.scale(asum, params.lambda_action);
        total = g.add(total, weighted)?;
    }
    Ok(total)
}

/// Ground-truth constants for the estimated frames `2..=T` of a clip,
/// frame-major over `(frame, target)` rows.
struct ClipTargets {
    gt6: Tensor,
    uv1: Tensor,
    uv_prev: Tensor,
    onehot: Tensor,
}

fn clip_targets(clip: &ClipInput, classes: usize) -> Result<ClipTargets, TrainError> {
    let t_total = clip.frames;
    let n = clip.targets.len();
    let rows = (t_total - 1) * n;
    let (w, h) = (clip.width, clip.height);
    let mut gt6 = Vec::with_capacity(rows * 6);
    let mut uv1 = Vec::with_capacity(rows * 2);
    let mut uv_prev = Vec::with_capacity(rows * 2);
    let mut onehot = Vec::with_capacity(rows * classes);
    for tau in 2..=t_total {
        for track in &clip.targets {
            let feat = geometric_feature(&track.positions, tau, w, h, t_total)
                .map_err(TrainError::Model)?;
            gt6.extend_from_slice(&feat[..6]);
            let (u1, v1) = track.positions[0];
            uv1.extend_from_slice(&[u1 / w, v1 / h]);
            let (pu, pv) = track.positions[tau - 2];
            uv_prev.extend_from_slice(&[pu / w, pv / h]);
            onehot.extend(one_hot(track.actions[tau - 1], classes).map_err(TrainError::Model)?);
        }
    }
    Ok(ClipTargets {
        gt6: Tensor::new(vec![rows, 6], gt6).map_err(TrainError::Tensor)?,
        uv1: Tensor::new(vec![rows, 2], uv1).map_err(TrainError::Tensor)?,
        uv_prev: Tensor::new(vec![rows, 2], uv_prev).map_err(TrainError::Tensor)?,
        onehot: Tensor::new(vec![rows, classes], onehot).map_err(TrainError::Tensor)?,
    })
}

/// Teacher-forced loss of one clip: encode once, decode the full ground-truth
/// history in one pass (exactly equivalent to the per-frame steps), apply the
/// heads to every frame, and reduce. Returns the scalar loss node.
pub fn clip_loss(
    g: &mut GradGraph,
    model: &EfModel,
    clip: &ClipInput,
    foresight: usize,
    params: &LossParams,
) -> Result<Node, TrainError> {
    clip.check_against(&model.config)?;
    let t_total = clip.frames;
    let classes = model.config.action_class_count;
    let (x_enc, _) = model.encode_clip(g, clip, foresight)?;

    // Ground-truth history for frames 1..=T-1.
    let history: Vec<HistoryFrame> = (1..t_total)
        .map(|t| {
            Ok(HistoryFrame {
                frame: t,
                feats: clip
                    .targets
                    .iter()
                    .map(|track| {
                        geometric_feature(&track.positions, t, clip.width, clip.height, t_total)
                    })
                    .collect::<Result<_, _>>()?,
                actions: clip.targets.iter().map(|track| track.actions[t - 1]).collect(),
            })
        })
        .collect::<Result<_, TrainError>>()?;
    let hist_grid = embed_history(g, &model.store, &model.embed, &history, &model.config)?;
    let decoded = model.decode_history(g, &x_enc, &hist_grid, None)?;
    let (traj, action) = model.predict(g, &decoded)?;

    // [T-1, n*2] -> [(T-1)*n, 2]; same for logits.
    let n = clip.targets.len();
    let traj_rows = g.reshape(traj, vec![(t_total - 1) * n, 2])?;
    let action_rows = g.reshape(action, vec![(t_total - 1) * n, classes])?;

    let targets = clip_targets(clip, classes)?;
    trajectory_action_loss(
        g,
        model.config.output_mode,
        traj_rows,
        &targets.gt6,
        &targets.uv1,
        &targets.uv_prev,
        Some((action_rows, &targets.onehot)),
        params,
    )
}

/// Free-running loss: decode step by step, feeding detached estimates back as
/// history (gradients flow through each step's own prediction only).
pub fn free_running_clip_loss(
    g: &mut GradGraph,
    model: &EfModel,
    clip: &ClipInput,
    foresight: usize,
    params: &LossParams,
) -> Result<Node, TrainError> {
    clip.check_against(&model.config)?;
    let t_total = clip.frames;
    let classes = model.config.action_class_count;
    let (w, h) = (clip.width, clip.height);
    let (x_enc, _) = model.encode_clip(g, clip, foresight)?;

    let first: Vec<(f64, f64)> = clip.targets.iter().map(|t| t.positions[0]).collect();
    let mut history = vec![HistoryFrame {
        frame: 1,
        feats: clip
            .targets
            .iter()
            .map(|t| geometric_feature(&t.positions, 1, w, h, t_total))
            .collect::<Result<_, _>>()?,
        actions: clip.targets.iter().map(|t| t.actions[0]).collect(),
    }];
    let mut prev_abs = first.clone();
    let mut total: Option<Node> = None;

    for tau in 2..=t_total {
        let hist_grid = embed_history(g, &model.store, &model.embed, &history, &model.config)?;
        let decoded = model.decode_history(g, &x_enc, &hist_grid, None)?;
        let last = decoded.last_frame(g)?;
        let single = crate::model::Grid { node: last, frames: 1, ..decoded };
        let (traj, action) = model.predict(g, &single)?;
        let n = clip.targets.len();
        let traj_rows = g.reshape(traj, vec![n, 2])?;
        let action_rows = g.reshape(action, vec![n, classes])?;

        // Per-step ground truth with the *estimated* previous position as
        // the delta base.
        let mut gt6 = Vec::with_capacity(n * 6);
        let mut uv1 = Vec::with_capacity(n * 2);
        let mut uv_prev = Vec::with_capacity(n * 2);
        let mut onehot = Vec::with_capacity(n * classes);
        for (j, track) in clip.targets.iter().enumerate() {
            let feat = geometric_feature(&track.positions, tau, w, h, t_total)?;
            gt6.extend_from_slice(&feat[..6]);
            uv1.extend_from_slice(&[first[j].0 / w, first[j].1 / h]);
            uv_prev.extend_from_slice(&[prev_abs[j].0 / w, prev_abs[j].1 / h]);
            onehot.extend(one_hot(track.actions[tau - 1], classes)?);
        }
        let step_loss = trajectory_action_loss(
            g,
            model.config.output_mode,
            traj_rows,
            &Tensor::new(vec![n, 6], gt6)?,
            &Tensor::new(vec![n, 2], uv1)?,
            &Tensor::new(vec![n, 2], uv_prev)?,
            Some((action_rows, &Tensor::new(vec![n, classes], onehot)?)),
            params,
        )?;
        total = Some(match total {
            Some(t) => g.add(t, step_loss)?,
            None => step_loss,
        });

        // Detached feedback: estimates enter history as constants.
        let traj_vals = g.value(traj_rows).clone();
        let mut feats = Vec::with_capacity(n);
        let mut eff = Vec::with_capacity(n);
        for j in 0..n {
            let pair = (traj_vals.at2(j, 0), traj_vals.at2(j, 1));
            let abs = crate::model::decode_mode_pair(
                model.config.output_mode,
                pair,
                w,
                h,
                first[j],
                prev_abs[j],
            );
            let mut feat = [0.0; 7];
            feat[0] = abs.0 / w;
            feat[1] = abs.1 / h;
            feat[2] = (abs.0 - prev_abs[j].0) / w;
            feat[3] = (abs.1 - prev_abs[j].1) / h;
            feat[4] = (abs.0 - first[j].0) / w;
            feat[5] = (abs.1 - first[j].1) / h;
            feat[6] = tau as f64 / t_total as f64;
            feats.push(feat);
            eff.push(abs);
        }
        history.push(HistoryFrame {
            frame: tau,
            feats,
            actions: clip.targets.iter().map(|t| t.actions[tau - 1]).collect(),
        });
        prev_abs = eff;
    }
    Ok(total.expect("at least one estimated frame"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn euclidean_norm_example() {
        // Single row with geometric error (0.3, 0.4, 0, 0, 0, 0) and exact
        // actions: loss is 0.5.
        let mut g = GradGraph::new();
        let traj = g.leaf(Tensor::from_rows(&[vec![0.3, 0.4]]).unwrap(), true);
        let gt6 = Tensor::from_rows(&[vec![0.0; 6]]).unwrap();
        let zero2 = Tensor::zeros(vec![1, 2]);
        let logits = g.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap());
        let onehot = Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let loss = trajectory_action_loss(
            &mut g,
            OutputMode::Uv,
            traj,
            &gt6,
            &zero2,
            &zero2,
            Some((logits, &onehot)),
            &LossParams { lambda_action: 0.1, squared_error: false },
        )
        .unwrap();
        // uv error (0.3, 0.4); delta and relative errors are the same pair
        // here (bases zero), so the row norm is |(.3,.4,.3,.4,.3,.4)|.
        let expected = (3.0f64 * 0.25).sqrt();
        assert!((g.value(loss).scalar_value() - expected).abs() < 1e-12);

        // Isolate the single-component case: gt matches on delta/relative.
        let mut g2 = GradGraph::new();
        let traj2 = g2.leaf(Tensor::from_rows(&[vec![0.3, 0.4]]).unwrap(), true);
        let gt = Tensor::from_rows(&[vec![0.0, 0.0, 0.3, 0.4, 0.3, 0.4]]).unwrap();
        let logits2 = g2.constant(Tensor::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap());
        let onehot2 = Tensor::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
        let loss2 = trajectory_action_loss(
            &mut g2,
            OutputMode::Uv,
            traj2,
            &gt,
            &zero2,
            &zero2,
            Some((logits2, &onehot2)),
            &LossParams { lambda_action: 0.1, squared_error: false },
        )
        .unwrap();
        assert!((g2.value(loss2).scalar_value() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_gives_zero() {
        let mut g = GradGraph::new();
        let traj = g.leaf(Tensor::from_rows(&[vec![0.1, 0.2]]).unwrap(), true);
        let gt6 = Tensor::from_rows(&[vec![0.1, 0.2, 0.1, 0.2, 0.1, 0.2]]).unwrap();
        let zero2 = Tensor::zeros(vec![1, 2]);
        let loss = trajectory_action_loss(
            &mut g,
            OutputMode::Uv,
            traj,
            &gt6,
            &zero2,
            &zero2,
            None,
            &LossParams { lambda_action: 0.1, squared_error: false },
        )
        .unwrap();
        assert_eq!(g.value(loss).scalar_value(), 0.0);
    }

    #[test]
    fn zero_lambda_ignores_action_term() {
        let gt6 = Tensor::from_rows(&[vec![0.0; 6]]).unwrap();
        let zero2 = Tensor::zeros(vec![1, 2]);
        let onehot = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let run = |action_logits: Vec<f64>| {
            let mut g = GradGraph::new();
            let traj = g.leaf(Tensor::from_rows(&[vec![0.3, 0.4]]).unwrap(), true);
            let logits = g.constant(Tensor::from_rows(&[action_logits]).unwrap());
            let loss = trajectory_action_loss(
                &mut g,
                OutputMode::Uv,
                traj,
                &gt6,
                &zero2,
                &zero2,
                Some((logits, &onehot)),
                &LossParams { lambda_action: 0.0, squared_error: false },
            )
            .unwrap();
            g.value(loss).scalar_value()
        };
        assert_eq!(run(vec![5.0, -3.0]), run(vec![0.0, 100.0]));
    }
}
