//! Quasi-periodic latent decomposition for periodic-video regression, with
//! test-time adaptation by variance minimization across augmented views.
//!
//! The pipeline: [`synthdata`] renders pulsating-ellipse videos with known
//! ejection fractions; [`qpnet`] encodes them, splits the latent sequence into
//! a helix-parameterized periodic part and a CDE-integrated aperiodic part,
//! and regresses the target; [`ttt`] adapts batch-norm parameters per test
//! video using [`augment`] views; [`analysis`] scores predictions and checks
//! the variance-to-error bound by simulation.

pub mod analysis;
pub mod augment;
pub mod cdesolver;
pub mod diffcore;
pub mod error;
mod files;
pub mod qpnet;
pub mod rng;
pub mod spline;
pub mod synthdata;
pub mod ttt;

pub use error::{Error, Result};
