//! Frame-wise inference and prediction of target-participant behavior in
//! coupled group activities, built on an entry-flipped transformer.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors with reverse-mode differentiation and a
//!   finite-difference gradient oracle,
//! - [`nn`]: parameter storage, linear/norm/FFN layers, multi-head attention,
//!   and the checkpoint container,
//! - [`model`]: feature embedding, spatio-temporal encoder variants, decoder
//!   variants (typical and entry-flipped), prediction heads, and the
//!   frame-wise rollout engine,
//! - [`train`]: the trajectory+action loss, Adam, and the epoch loop,
//! - [`data`]: clip schema, CSV/JSON I/O, neighbor selection, length bins,
//!   and synthetic coupled-behavior generators,
//! - [`metrics`]: MAD/FAD, per-bin reports, macro F1,
//! - [`experiment`]: config-driven training/evaluation runs, ablations, and
//!   the noise-spike robustness protocol,
//! - [`svg`]: trajectory overlay plots.

pub mod data;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod svg;
pub mod tensor;
pub mod train;

pub use tensor::{GradGraph, Node, Tensor, TensorError};
