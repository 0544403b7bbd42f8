//! Deterministic co-simulator of a federated edge-computing system,
//! coupled with a generative anomaly detector and simulated-annealing
//! task migration.
//!
//! Layering, bottom up:
//! - [`tensor`], [`autodiff`]: dense math and a double-backward tape.
//! - [`gon`]: the reconstruction network, its scoring rule, gradient
//!   ascent generation and minibatch training.
//! - [`detection`]: sliding windows, extreme-value thresholds, point
//!   adjusting and detection/diagnosis metrics.
//! - [`federation`], [`workload`], [`simulator`]: the edge fabric, the
//!   task/fault generators, and the interval-stepped system model.
//! - [`engine`]: per-broker detect/decide/migrate ticks and whole
//!   experiment runs.
//! - [`dataset`], [`report`], [`config`]: file formats and run configs.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod detection;
pub mod engine;
pub mod error;
pub mod federation;
pub mod gon;
pub mod report;
pub mod simulator;
pub mod tensor;
pub mod workload;

pub use error::{Error, Result};
