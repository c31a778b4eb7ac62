//! Online eye-gaze auto-calibration for head-mounted displays.
//!
//! The crate maps 3D corneal-center positions (camera frame, millimeters) to
//! 2D screen gaze (pixels). It provides:
//!
//! * [`gpr`] — Gaussian process regression primitives with incremental
//!   covariance-inverse updates and data standardization.
//! * [`baseline`] — explicit 9-point calibration (bi-quadratic polynomial and
//!   GPR variants), the golden standard for evaluation.
//! * [`tracklet`] — smooth-pursuit tracklet extraction and matching of corneal
//!   motion against candidate screen-object trajectories.
//! * [`engine`] — the online controller combining a ring of local GPR models
//!   with a grid-sampled global model, variance-gated selection, and
//!   global-model disposal on headset slippage.
//! * [`sim`] — deterministic synthetic session generator (moving objects,
//!   ground-truth mapping, pursuit/saccade behavior, sensor noise presets).
//! * [`trace`] — the line-delimited session trace format.
//! * [`eval`] — angular-error metrics, fixation evaluation protocols, and
//!   comparison tables.

pub mod baseline;
pub mod engine;
pub mod eval;
pub mod gpr;
pub mod sim;
pub mod tracklet;
pub mod trace;
pub mod types;

pub use types::{CornealSample, GazePrediction, PredictionSource, ScreenPoint};
