//! Desk-scale aerial-image object detection toolkit.
//!
//! The crate bundles the moving parts of a small anchor-free detector for
//! large aerial scenes, built on a self-contained `f64` tensor kernel with
//! reverse-mode gradients:
//!
//! * [`numerics`] — rank-4 tensors, conv/resize/pool kernels, a recorded
//!   graph with analytic backward passes, and a central-difference checker.
//! * [`drm`] — conditionally generated multi-scale fusion that adds an extra
//!   high-resolution pyramid level from dynamically predicted kernels.
//! * [`bvr`] — a point head plus key-feature attention that mixes corner and
//!   center evidence into the per-level box features.
//! * [`detector`] — toy backbone, feature pyramid, detection head, losses,
//!   and a micro-training loop on synthetic scenes.
//! * [`dota`] — scene tiling with overlap, per-patch annotation remapping,
//!   and detection merging back into scene coordinates.
//! * [`eval`] — axis-aligned IoU, greedy matching, average precision, and
//!   per-class reports.
//!
//! Everything is sized for deterministic CPU runs in seconds, not for
//! production training.

pub mod bvr;
pub mod detector;
pub mod dota;
pub mod drm;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod selfcheck;

pub use error::{Error, Result};
