//! Robust reliability inference for nondestructive one-shot devices tested
//! under a progressive (ramp) stress accelerated life test.
//!
//! Module map:
//!
//! - [`model`]: Log-logistic lifetimes under the tampered failure rate link,
//!   interval cell probabilities and score vectors.
//! - [`estimation`]: likelihood and exponential-polynomial divergence (EPD)
//!   objectives, estimating equations, MLE and minimum-EPD solvers.
//! - [`asymptotics`]: sandwich covariance, Wald intervals and the influence
//!   function.
//! - [`tuning`]: selection of the EPD tuning parameters (Warwick-Jones,
//!   iterative WJ, min-error criteria, concrete score matching).
//! - [`simulation`]: data generation, Monte-Carlo studies, parametric
//!   bootstrap and the goodness-of-fit test, plus the bundled light-bulb data.
//! - [`design`]: A-optimal test plans through constrained particle swarm
//!   optimization with Deb's feasibility rule.

pub mod asymptotics;
pub mod design;
pub mod error;
pub mod estimation;
pub mod format;
pub mod linalg;
pub mod model;
pub mod simulation;
pub mod tuning;

pub use error::{Error, Result};
pub use estimation::{FitResult, ObservedCounts, TuningParams};
pub use model::{GroupPlan, ModelParams, TestPlan};
