//! Epoch loop: shuffled mini-batches, mean-of-clip losses per batch, one Adam
//! step per batch. Deterministic for a fixed seed.

use rand::prelude::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{clip_loss, free_running_clip_loss};
use super::{Adam, LossParams, TrainConfig, TrainError};
use crate::model::{ClipInput, EfModel};
use crate::nn::ParamId;
use crate::tensor::{GradGraph, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// Train in place. `foresight` must match the evaluation task.
pub fn train(
    model: &mut EfModel,
    clips: &[ClipInput],
    foresight: usize,
    config: &TrainConfig,
) -> Result<TrainLog, TrainError> {
    config.validate()?;
    if clips.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for clip in clips {
        clip.check_against(&model.config)?;
    }
    let params = LossParams {
        lambda_action: config.lambda_action,
        squared_error: config.squared_error,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config, model.store.len());
    let mut log = TrainLog::default();

    let mut order: Vec<usize> = (0..clips.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut accum: Vec<Option<(ParamId, Tensor)>> = vec![None; model.store.len()];
            for &clip_index in batch {
                let clip = &clips[clip_index];
                let mut g = GradGraph::new();
                let loss = if config.teacher_forcing {
                    clip_loss(&mut g, model, clip, foresight, &params)?
                } else {
                    free_running_clip_loss(&mut g, model, clip, foresight, &params)?
                };
                let value = g.value(loss).scalar_value();
                if !value.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        clip: clip.clip_id.clone(),
                        value,
                    });
                }
                epoch_loss += value;
                g.backward(loss)?;
                for (id, grad) in model.store.grads_from(&g) {
                    match &mut accum[id.index()] {
                        Some((_, existing)) => {
                            for (dst, src) in existing.data_mut().iter_mut().zip(grad.data()) {
                                *dst += src;
                            }
                        }
                        slot => *slot = Some((id, grad)),
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let grads: Vec<(ParamId, Tensor)> = accum
                .into_iter()
                .flatten()
                .map(|(id, mut grad)| {
                    grad.data_mut().iter_mut().for_each(|v| *v *= scale);
                    (id, grad)
                })
                .collect();
            adam.step(&mut model.store, &grads);
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / clips.len() as f64,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DecoderVariant, EncoderVariant, ModelConfig, OutputMode, TrackInput};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            geom_embed_dim: 4,
            action_embed_dim: 4,
            head_dim: 4,
            ffn_dim: 8,
            head_hidden_dim: 8,
            encoder_variant: EncoderVariant::SpatialThenTemporal,
            decoder_variant: DecoderVariant::EfLimitedQuery,
            output_mode: OutputMode::UvR,
            action_class_count: 3,
            n_obs: 2,
            n_tgt: 1,
        }
    }

    fn tiny_clip(id: &str, offset: f64) -> ClipInput {
        let track = |base: f64| TrackInput {
            positions: (0..4).map(|t| (base + 10.0 * t as f64, 40.0 + offset + t as f64)).collect(),
            actions: vec![0, 1, 2, 1],
        };
        ClipInput {
            clip_id: id.into(),
            observed: vec![track(10.0), track(30.0)],
            targets: vec![track(20.0)],
            width: 100.0,
            height: 100.0,
            frames: 4,
        }
    }

    #[test]
    fn single_step_decreases_clip_loss() {
        let mut model = EfModel::new(tiny_config(), 5).unwrap();
        let clip = tiny_clip("c", 0.0);
        let params = LossParams { lambda_action: 0.1, squared_error: false };
        let loss_value = |model: &EfModel| {
            let mut g = GradGraph::new();
            let l = clip_loss(&mut g, model, &clip, 1, &params).unwrap();
            g.value(l).scalar_value()
        };
        let before = loss_value(&model);
        let config = TrainConfig {
            learning_rate: 1e-4,
            epochs: 1,
            batch_size: 1,
            seed: 7,
            ..TrainConfig::default()
        };
        train(&mut model, &[clip.clone()], 1, &config).unwrap();
        let after = loss_value(&model);
        assert!(after < before, "loss {before} -> {after}");
    }

    #[test]
    fn fixed_seed_training_is_bitwise_reproducible() {
        let run = || {
            let mut model = EfModel::new(tiny_config(), 11).unwrap();
            let clips: Vec<ClipInput> =
                (0..5).map(|i| tiny_clip(&format!("c{i}"), i as f64)).collect();
            let config = TrainConfig {
                epochs: 3,
                batch_size: 2,
                seed: 123,
                ..TrainConfig::default()
            };
            let log = train(&mut model, &clips, 0, &config).unwrap();
            let params: Vec<f64> = model
                .store
                .iter()
                .flat_map(|(_, _, t)| t.data().to_vec())
                .collect();
            (log.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>(), params)
        };
        let (losses_a, params_a) = run();
        let (losses_b, params_b) = run();
        assert_eq!(losses_a, losses_b);
        assert_eq!(params_a, params_b);
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut model = EfModel::new(tiny_config(), 5).unwrap();
        let err = train(&mut model, &[], 0, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::EmptyDataset));
    }

    #[test]
    fn smoke_training_reduces_loss_overall() {
        let mut model = EfModel::new(tiny_config(), 17).unwrap();
        let clips: Vec<ClipInput> = (0..8).map(|i| tiny_clip(&format!("c{i}"), i as f64 * 0.5)).collect();
        let config = TrainConfig {
            epochs: 20,
            batch_size: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        let log = train(&mut model, &clips, 1, &config).unwrap();
        let first = log.epochs.first().unwrap().train_loss;
        let last = log.final_loss().unwrap();
        assert!(last < first, "loss {first} -> {last}");
    }

    #[test]
    fn free_running_training_runs() {
        let mut model = EfModel::new(tiny_config(), 23).unwrap();
        let clips: Vec<ClipInput> = (0..3).map(|i| tiny_clip(&format!("c{i}"), i as f64)).collect();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 2,
            seed: 9,
            teacher_forcing: false,
            ..TrainConfig::default()
        };
        train(&mut model, &clips, 0, &config).unwrap();
    }
}
