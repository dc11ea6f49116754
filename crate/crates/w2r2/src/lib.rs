//! Desk-scale laboratory for studying 2D-semantic shortcuts in multimodal
//! 3D grounding, and the pull-push training scheme that counteracts them.
//!
//! The crate generates synthetic scenes with a controllable shortcut (2D
//! features alone often suffice to pick the referred object), trains a
//! two-encoder fusion model either conventionally or with an added
//! deterrence term that penalizes 3D-blind success, and ships the
//! diagnostics needed to see the difference: a shortcut probe, a modality
//! separation index, parameter sweeps, and SVG reports.
//!
//! Entry points: `examples/` for runnable walkthroughs of each capability,
//! [`cli`] for the `w2r2` binary surface.

pub mod autodiff;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod rng;
pub mod scenes;
pub mod trainer;

pub use autodiff::{check_gradients, Gradients, Graph, Tensor};
pub use diagnostics::{run_sweep, separation_index, shortcut_probe, ProbeReport};
pub use error::{Error, Result};
pub use geometry::{acc_at, iou3d, iou3d_grad, Box3};
pub use trainer::{evaluate, train_run, MetricsRecord, Optimizer, TrainConfig};
