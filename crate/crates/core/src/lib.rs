//! Uncertain maximum entropy.
//!
//! Fits log-linear distributions `Pr(x) ∝ exp(lambda . phi(x))` over hidden
//! elements when only noisy observations `omega ~ Pr(omega | x)` are
//! available. The empirical side of the moment constraints is
//! posterior-weighted and so depends on the model being learned; the fit
//! alternates an E-step that computes those corrected expectations with an
//! M-step that solves the convex maximum-entropy dual.
//!
//! Modules:
//! - [`model`]: problem data types and the pure probability computations.
//! - [`dual`]: the maximum-entropy dual and its minimizer.
//! - [`em`]: the EM loop, likelihood and lower-bound decomposition.
//! - [`specializations`]: deterministic and latent channels reduce to
//!   standard and latent maximum entropy; checked numerically.
//! - [`classifier`]: constraints built from black-box classifier outputs,
//!   including the training-prior correction for soft outputs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod dual;
pub mod em;
pub mod error;
pub mod model;
pub mod specializations;

pub use dual::{
    dual_gradient, dual_value, minimize_dual, LineSearch, Method, SolverConfig, SolverResult, SolverStatus,
    TargetExpectations,
};
pub use em::{
    constraint_residual, e_step, e_step_for_model, em_solve, likelihood_decomposition, log_likelihood, run_em,
    ConvergenceReason, Decomposition, EmConfig, EmObjective, EmOutcome, EmRecord, EmStatus, EmTrace, InitMode,
    UMaxEntProblem, ZeroMarginalPolicy,
};
pub use error::{Axis, Error, Result};
pub use model::{
    feature_expectation, log_linear_distribution, log_partition, observation_marginal, posterior, Distribution,
    ElementSpace, EmpiricalObservations, FeatureTable, LogLinearModel, ObservationChannel, ObservationSource, Weights,
};
