//! Subgroup audits for binary risk-prediction models, computed from
//! prediction files alone: AUROC gaps with DeLong tests, and strong
//! calibration via a score-based CUSUM test over an ensemble of residual
//! models, with permutation variable importance.

pub mod calibration;
pub mod cli;
pub mod data;
pub mod error;
mod linalg;
pub mod report;
pub mod residual;
pub mod rng;
pub mod roc;
pub mod study;
pub mod synth;

pub use error::{AuditError, Result};
