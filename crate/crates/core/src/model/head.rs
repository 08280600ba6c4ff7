//! Prediction heads and output-mode decoding.
//!
//! A head flattens the decoder rows of each frame into one vector and applies
//! three affine layers with leaky ReLU after the first two. The trajectory
//! head emits 2 values per target in the configured coordinate mode; the
//! action head emits one logit per action class per target.

use rand_chacha::ChaCha8Rng;

use super::{ModelError, OutputMode};
use crate::nn::{Linear, ParamStore, LEAKY_SLOPE};
use crate::tensor::{GradGraph, Node};

#[derive(Debug, Clone)]
pub struct PredictionHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
}

impl PredictionHead {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), in_dim, hidden, rng),
            fc2: Linear::new(store, &format!("{prefix}.fc2"), hidden, hidden, rng),
            fc3: Linear::new(store, &format!("{prefix}.fc3"), hidden, out_dim, rng),
        }
    }

    /// Treat each consecutive block of `flat_dim / D` rows of `x` as one
    /// item, flatten it, and map `[items, flat_dim] -> [items, out]`.
    pub fn forward_flattened(
        &self,
        g: &mut GradGraph,
        store: &ParamStore,
        x: Node,
        items: usize,
        flat_dim: usize,
    ) -> Result<Node, ModelError> {
        let flat = g.reshape(x, vec![items, flat_dim])?;
        let h1 = self.fc1.forward(g, store, flat)?;
        let a1 = g.leaky_relu(h1, LEAKY_SLOPE);
        let h2 = self.fc2.forward(g, store, a1)?;
        let a2 = g.leaky_relu(h2, LEAKY_SLOPE);
        Ok(self.fc3.forward(g, store, a2)?)
    }
}

/// Decode one trajectory-head pair into absolute pixels.
///
/// - `Uv`: the pair is the absolute position, normalized by scene size.
/// - `CumulativeDelta`: the pair is the displacement from the previous
///   estimate (the last observed target position at the first step).
/// - `UvR`: the pair is the offset from the frame-1 position.
pub fn decode_mode_pair(
    mode: OutputMode,
    pair: (f64, f64),
    width: f64,
    height: f64,
    first: (f64, f64),
    prev: (f64, f64),
) -> (f64, f64) {
    match mode {
        OutputMode::Uv => (pair.0 * width, pair.1 * height),
        OutputMode::CumulativeDelta => (prev.0 + pair.0 * width, prev.1 + pair.1 * height),
        OutputMode::UvR => (first.0 + pair.0 * width, first.1 + pair.1 * height),
    }
}
