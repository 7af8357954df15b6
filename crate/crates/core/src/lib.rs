//! Offline diffusion-policy locomotion on a synthetic legged plant.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`sourcepolicy`] scripted CPG gaits drive the [`plant`] to record an
//!    offline [`dataset`] of (observation, action, goal) triples.
//! 2. A transformer noise predictor ([`denoiser`]) built on the small autodiff
//!    engine in [`tensor`] is trained by [`trainer`] with the delayed-input
//!    DDPM objective from [`diffusion`].
//! 3. [`control`] deploys a checkpoint in a receding-horizon loop: each tick it
//!    samples an action chunk from delayed history and applies only the first
//!    action.
//! 4. [`bench`] runs the ablation matrix and [`report`] renders the results.

pub mod bench;
pub mod checkpoint;
pub mod control;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod plant;
pub mod report;
pub mod rng;
pub mod sourcepolicy;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Observation width: q(4) + qdot(4) + orientation(3) + angular velocity(3).
pub const STATE_DIM: usize = 14;
/// Joint PD targets, one per leg.
pub const ACTION_DIM: usize = 4;
/// (v_des, h_des, omega_des).
pub const GOAL_DIM: usize = 3;
/// Control period in seconds (50 Hz).
pub const CONTROL_DT: f64 = 0.02;
