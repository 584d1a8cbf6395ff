//! Deterministic cross-silo collaborative-learning benchmark.
//!
//! Compares federated optimization (FedAvg, FedProx) with consensus-based
//! label fusion (majority voting, STAPLE, uncertainty-based ensembling) on a
//! synthetic heterogeneous multi-center segmentation task, with cost,
//! robustness, client-utility and differential-privacy reporting.

pub mod config;
pub mod consensus;
pub mod error;
pub mod numcore;
pub mod privacy;
pub mod scenario;
pub mod federation;
pub mod harness;
pub mod metrics;
pub mod segmodel;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
