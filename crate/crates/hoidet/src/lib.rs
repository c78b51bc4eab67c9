//! Desk-scale human-object interaction (HOI) detection stack.
//!
//! The crate trains a two-branch set-prediction detector on synthetic scenes
//! whose ground truth is a list of (human box, object box + class, verb)
//! triplets. Scenes are generated with a controllable rate of "sibling"
//! triplets (same object, different verb, or vice versa) so the confusion
//! that debiasing objectives target is physically present in the features.
//!
//! Module map:
//! - [`tensor`]: dense f64 tensors with tape-based reverse-mode autodiff.
//! - [`taxonomy`] / [`scene`]: category space, synthetic scene generation,
//!   dataset files.
//! - [`embed`]: deterministic pseudo text embeddings for labels and prompts.
//! - [`detector`]: instance + interaction decoders, region-masked attention.
//! - [`matching`]: Hungarian matching and the set-prediction detector loss.
//! - [`c2c`]: contrastive sibling separation and calibration-query repair.
//! - [`m2s`]: superclass merge loss and candidate-split loss.
//! - [`eval`]: detection mAP protocols and bias diagnostics.
//! - [`config`] / [`train`]: run configuration, the training loop, ablation.

pub mod c2c;
pub mod config;
pub mod detector;
pub mod embed;
pub mod error;
pub mod eval;
pub mod m2s;
pub mod matching;
pub mod rng;
pub mod scene;
pub mod taxonomy;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
