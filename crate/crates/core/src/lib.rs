//! Score-driven filtering and smoothing for state-space time series.
//!
//! The crate provides:
//!
//! * exact Kalman filtering and smoothing for linear-Gaussian systems, both in
//!   the usual innovation form and in an equivalent form driven by the score
//!   and Hessian of the predictive log-density ([`lgss`]);
//! * the same recursions applied to arbitrary twice-differentiable observation
//!   densities, which yields approximate filters, update filters and smoothers
//!   for nonlinear non-Gaussian models ([`score_engine`]);
//! * concrete observation models and simulators ([`models`]);
//! * maximum-likelihood fitting of the static parameters ([`estimation`]);
//! * confidence bands splitting filtering and parameter uncertainty
//!   ([`uncertainty`]);
//! * a bootstrap particle filter and backward-simulation smoother used as the
//!   simulation-based reference ([`particle`]).
//!
//! The crate is `no_std` and only needs an allocator. File formats, the
//! command line and the parallel experiment runner live in the `sdfilter`
//! crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod error;
pub mod estimation;
pub mod lgss;
pub mod linalg;
pub(crate) mod math;
pub mod models;
pub mod particle;
pub mod rng;
pub mod score_engine;
pub mod stats;
pub mod uncertainty;

pub use error::{Error, Result};
pub use lgss::{FilterRun, FilterStep, GaussianState, SmootherRun, SmootherStep, SystemMatrices};
pub use score_engine::{
    NormalizationScheme, ObservationModel, ScoreScaling, SdFilterRun, SdOptions, TransitionSpec,
    VarianceUpdate,
};

/// Dense column vector used for states and multivariate observations.
pub type Vector = nalgebra::DVector<f64>;
/// Dense matrix used for covariances and system matrices.
pub type Matrix = nalgebra::DMatrix<f64>;
