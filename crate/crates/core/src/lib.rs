//! Small-area estimation combining a probability sample with a linked
//! non-probability proxy source.
//!
//! The crate covers the full chain: population frame and sample loading,
//! direct estimators, working models for the proxy, domain-level model
//! calibration, bootstrap variance estimation, inverse propensity weighting,
//! log-scale Fay–Herriot and Ybarra–Lohr area models, a simulation harness
//! and report tables. [`pipeline`] drives the stages through files on disk.

// Negated comparisons such as `!(x > 0.0)` are used on purpose: they also
// reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrate;
pub mod direct;
pub mod error;
pub mod fh;
pub mod frame;
pub mod ipw;
pub mod linalg;
pub mod logistic;
pub mod pipeline;
pub mod report;
pub mod resample;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod workmodel;
pub mod ylme;

pub use calibrate::{calibrate_domain, CalibrationOptions, CalibrationResult, CalibrationStatus, McEstimator};
pub use direct::{DirectEstimator, DirectKind, DomainEstimate, Estimator, Provenance};
pub use error::{Error, Result};
pub use frame::{LinkedOverlap, PopulationFrame, ProbabilitySample, UnitRecord};
pub use report::{classify_rrmse, Quality};
pub use workmodel::{ModelSpec, Prediction, WorkingModel};
