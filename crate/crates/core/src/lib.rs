//! Numerical laboratory for straight conditional-transport flow matching on
//! a synthetic patch try-on task.
//!
//! The crate is organized around one fact with an exact finite description:
//! when the conditioning pins down the endpoint, the optimal-transport
//! interpolation path is straight, so one Euler step and many Euler steps
//! land in the same place. Everything here exists to state, verify, train
//! toward, or measure deviations from that fact:
//!
//! - [`flow`]: interpolation paths, Euler sampling, straightness metrics.
//! - [`analytic`]: closed-form delta and mixture velocity fields plus the
//!   exactness verification harness.
//! - [`synth`]: the deterministic try-on task with its compositing oracle.
//! - [`tape`]: reverse-mode autodiff over dense matrices.
//! - [`model`]: the dual-stream attention velocity network.
//! - [`objective`]: flow-matching, garment-preservation and self-consistency
//!   losses, timestep pairs and guidance combination.
//! - [`optim`], [`train`]: the optimizer, Stage-1 trainer and ablation grid.
//! - [`distill`]: one-step adversarial distillation.
//! - [`metrics`]: endpoint error, energy distance, straightness summaries.

pub mod analytic;
pub mod distill;
pub mod error;
pub mod flow;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod train;

pub use error::{CoreError, Result};
pub use grid::{GridShape, LatentGrid, PathTime};
