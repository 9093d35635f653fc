//! Sleep staging on single-channel EEG with a bidirectional selective
//! state-space sequence model.
//!
//! The pipeline: 30-second, 100 Hz EEG epochs pass through a
//! triple-resolution CNN front end ([`features`]), channel-wise adaptive
//! recalibration, and a bidirectional Mamba-style selective state-space
//! block ([`bimamba`]), ending in a five-class stage head (W, N1, N2, N3,
//! REM). Training ([`training`]) combats class imbalance with focal loss
//! and borderline synthetic oversampling ([`imbalance`]), and everything is
//! evaluated subject-wise ([`metrics`]).
//!
//! All numerics are `f64` on a hand-rolled tape autodiff ([`graph`],
//! [`nn`]); every analytic gradient is pinned by finite differences.

pub mod bimamba;
pub mod cli;
pub mod error;
pub mod features;
pub mod graph;
pub mod imbalance;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod signal_io;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
