//! Deep-ensemble headway estimation, split conformal calibration, and a
//! conformal tube MPC for adaptive cruise control.
//!
//! The pipeline runs bottom-up:
//!
//! - [`ensemble`]: mean-variance MLP members fused into a Gaussian mixture.
//! - [`conformal`]: normalized residual scores and the split conformal quantile.
//! - [`tube`]: a state box from two consecutive estimates, propagated through [`kinematics`].
//! - [`controller`]: a QP ([`qp`]) that jointly picks accelerations and the tube scale.
//! - [`simloop`]: closed-loop episodes over the synthetic sensor in [`scenario`].
//!
//! [`config`] holds the TOML run configuration shared by the command-line stages.

pub mod conformal;
pub mod config;
pub mod controller;
pub mod ensemble;
pub mod error;
pub mod kinematics;
pub mod qp;
pub mod scenario;
pub mod simloop;
pub mod stats;
pub mod tube;

pub use error::{Error, Result};
