//! Desk-scale toolkit for studying physically realizable attacks on X-ray
//! prohibited-item detectors.
//!
//! The pipeline mirrors the stages of an X-ray security study:
//!
//! 1. [`physics`] — fits a per-material exponential depth-to-color converter
//!    from calibration samples and evaluates it differentiably.
//! 2. [`geometry`] — triangle meshes, differentiable beam-axis thickness
//!    projection, the neighborhood-smoothness perceptual loss, OBJ/STL IO.
//! 3. [`scene`] — synthetic luggage scenes, transmittance compositing,
//!    annotations and dataset manifests (including severity levels).
//! 4. [`detector`] — a small trainable single-shot detector that exposes
//!    gradients with respect to its input pixels.
//! 5. [`placement`] — the available attack region around an item and the
//!    policy-gradient location search plus fix/random/greedy baselines.
//! 6. [`attack`] — shape optimization through the full differentiable chain
//!    and the vanilla / constant-color mesh / depth-raster baselines.
//! 7. [`metrics`] — mAP@0.5, FN counts at high confidence, TP/FP confidence
//!    histograms, placement-perturbation and transfer evaluation.
//! 8. [`defense`] — patch augmentation, adversarial-example detection, and
//!    adversarial training countermeasures.
//!
//! All stochastic entry points take explicit seeds and are deterministic,
//! independent of the worker-thread count: parallel maps preserve element
//! order and reductions run in a fixed order.

pub mod attack;
pub mod defense;
pub mod detector;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod metrics;
pub mod physics;
pub mod placement;
pub mod scene;

pub use error::{Error, Result};
