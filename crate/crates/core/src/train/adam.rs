//! Adam with bias correction. Parameters without a gradient this step are
//! treated as having a zero gradient, so their moments decay consistently.

use super::TrainConfig;
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Adam {
    pub fn new(config: &TrainConfig, param_count: usize) -> Self {
        Self {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            step: 0,
            moments: (0..param_count).map(|_| None).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads` is sparse (ordered by parameter id); missing
    /// entries count as zero gradients.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let mut grad_iter = grads.iter().peekable();
        for index in 0..store.len() {
            let id = ParamId(index);
            let grad = match grad_iter.peek() {
                Some((gid, g)) if gid.index() == index => {
                    let g = Some(g);
                    grad_iter.next();
                    g
                }
                _ => None,
            };
            let shape = store.get(id).shape().to_vec();
            let (m, v) = self.moments[index]
                .get_or_insert_with(|| (Tensor::zeros(shape.clone()), Tensor::zeros(shape)));
            let zero = [];
            let grad_data: &[f64] = grad.map_or(&zero[..], |g| g.data());
            let values = store.get_mut(id).data_mut();
            for i in 0..values.len() {
                let gi = grad_data.get(i).copied().unwrap_or(0.0);
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                values[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(lr: f64) -> TrainConfig {
        TrainConfig { learning_rate: lr, ..TrainConfig::default() }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap());
        let mut adam = Adam::new(&config(0.01), store.len());
        adam.step(&mut store, &[(id, Tensor::zeros(vec![1, 2]))]);
        adam.step(&mut store, &[]);
        assert_eq!(store.get(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // For a scalar parameter with gradient g at step 1:
        //   m_hat = g, v_hat = g^2, update = -lr * g / (|g| + eps).
        let lr = 0.001;
        let g = 0.5;
        let eps = 1e-8;
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(2.0));
        let mut adam = Adam::new(&config(lr), store.len());
        adam.step(&mut store, &[(id, Tensor::scalar(g))]);
        let expected = 2.0 - lr * g / (g.abs() + eps);
        assert!((store.get(id).scalar_value() - expected).abs() < 1e-15);
        // Magnitude is close to lr (sign-like behavior).
        assert!((2.0 - store.get(id).scalar_value() - lr).abs() < 1e-6);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut store = ParamStore::new();
            let a = store.add("a", Tensor::from_rows(&[vec![0.3, -0.7], vec![1.1, 0.0]]).unwrap());
            let mut adam = Adam::new(&config(0.01), store.len());
            for step in 0..25 {
                let g = Tensor::from_rows(&[
                    vec![0.1 * step as f64, -0.2],
                    vec![0.05, 0.3 / (step + 1) as f64],
                ])
                .unwrap();
                adam.step(&mut store, &[(a, g)]);
            }
            store.get(a).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
