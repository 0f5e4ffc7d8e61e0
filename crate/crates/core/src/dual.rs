//! The maximum-entropy dual for a fixed vector of target feature
//! expectations, and its minimizer.
//!
//! The dual is `log Z(lambda) - lambda . phi_hat`. It is convex, its gradient
//! is `E_lambda[phi] - phi_hat`, and its minimizer is the maximum-entropy
//! log-linear distribution whose feature expectations equal `phi_hat`.
//! This is both the M-step of the EM engine and, on its own, the standard
//! maximum-entropy fit.

use std::collections::VecDeque;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Axis, Error, Result};
use crate::model::{feature_expectation, log_partition, Distribution, FeatureTable, LogLinearModel, Weights};

/// Target feature expectations `phi_hat` for the moment constraints.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetExpectations(Array1<f64>);

impl TargetExpectations {
    /// Validates `phi_hat` against the per-feature range of `features`.
    ///
    /// Values outside `[min_x phi_k(x), max_x phi_k(x)]` by more than a few
    /// ulps of the range are [`Error::InfeasibleTarget`]; rounding-level
    /// excursions are clamped.
    pub fn new(values: Array1<f64>, features: &FeatureTable) -> Result<Self> {
        check_len(Axis::Features, features.num_features(), values.len())?;
        let mut values = values;
        for (feature, value) in values.iter_mut().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    what: "target expectations",
                    index: feature,
                });
            }
            let (min, max) = features.bounds(feature);
            let slack = 1e-12 * (1.0 + min.abs().max(max.abs()));
            if *value < min - slack || *value > max + slack {
                return Err(Error::InfeasibleTarget {
                    feature,
                    value: *value,
                    min,
                    max,
                });
            }
            *value = value.clamp(min, max);
        }
        Ok(Self(values))
    }

    /// The expectations of `features` under `dist`.
    pub fn from_distribution(dist: &Distribution, features: &FeatureTable) -> Result<Self> {
        Self::new(feature_expectation(dist, features)?, features)
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.to_vec()
    }
}

/// Backtracking line search parameters (Armijo sufficient decrease).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LineSearch {
    pub initial_step: f64,
    pub backtrack: f64,
    pub sufficient_decrease: f64,
    pub max_backtracks: usize,
}

impl Default for LineSearch {
    fn default() -> Self {
        Self {
            initial_step: 1.0,
            backtrack: 0.5,
            sufficient_decrease: 1e-4,
            max_backtracks: 60,
        }
    }
}

/// Search direction rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Steepest descent.
    GradientDescent,
    /// Limited-memory BFGS with the given history length.
    Lbfgs { memory: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub grad_tol: f64,
    pub max_iter: usize,
    pub line_search: LineSearch,
    pub method: Method,
    /// Iteration stops as [`SolverStatus::Diverged`] once any `|lambda_k|`
    /// exceeds this value.
    pub divergence_guard: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iter: 10_000,
            line_search: LineSearch::default(),
            method: Method::Lbfgs { memory: 10 },
            divergence_guard: 1e3,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: &str| Error::Invalid {
            what: "solver config",
            reason: reason.to_string(),
        };
        if !(self.grad_tol > 0.0) {
            return Err(invalid("grad_tol must be positive"));
        }
        if self.max_iter == 0 {
            return Err(invalid("max_iter must be at least 1"));
        }
        let ls = &self.line_search;
        if !(ls.initial_step > 0.0) || !(0.0 < ls.backtrack && ls.backtrack < 1.0) {
            return Err(invalid("line search needs initial_step > 0 and backtrack in (0, 1)"));
        }
        if !(0.0 < ls.sufficient_decrease && ls.sufficient_decrease < 1.0) {
            return Err(invalid("sufficient_decrease must lie in (0, 1)"));
        }
        if let Method::Lbfgs { memory: 0 } = self.method {
            return Err(invalid("L-BFGS memory must be at least 1"));
        }
        if !(self.divergence_guard > 0.0) {
            return Err(invalid("divergence_guard must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    Converged,
    MaxIterExceeded,
    /// Some `|lambda_k|` crossed the divergence guard; typical of targets on
    /// the boundary of (or outside) the moment polytope.
    Diverged,
    /// No step along a descent direction achieved sufficient decrease.
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverResult {
    pub weights: Weights,
    pub dual_value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub status: SolverStatus,
}

/// `log Z(lambda) - sum_k lambda_k phi_hat_k`.
pub fn dual_value(weights: &Weights, target: &TargetExpectations, features: &FeatureTable) -> Result<f64> {
    check_len(Axis::Features, features.num_features(), target.len())?;
    let log_z = log_partition(weights, features)?;
    Ok(log_z - weights.values().dot(target.values()))
}

/// `E_lambda[phi] - phi_hat`.
pub fn dual_gradient(weights: &Weights, target: &TargetExpectations, features: &FeatureTable) -> Result<Array1<f64>> {
    check_len(Axis::Features, features.num_features(), target.len())?;
    let model = LogLinearModel::new(weights.clone(), features)?;
    Ok(centered_gradient(model.distribution(), &centered(features, target)))
}

/// Feature rows shifted by their targets: `phi_k(x) - phi_hat_k`.
fn centered(features: &FeatureTable, target: &TargetExpectations) -> ndarray::Array2<f64> {
    let mut out = features.values().clone();
    for (mut row, &t) in out.rows_mut().into_iter().zip(target.values()) {
        row -= t;
    }
    out
}

fn centered_gradient(dist: &Distribution, centered: &ndarray::Array2<f64>) -> Array1<f64> {
    centered.dot(dist.probs())
}

fn sup_norm(v: &Array1<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Exact change of the dual along `direction` from the point whose model
/// distribution is `probs`:
/// `D(lambda + alpha d) - D(lambda) = log E_lambda[exp(alpha s)]`
/// with `s(x) = d . (phi(x) - phi_hat)`. Evaluated as
/// `log1p(E[expm1(alpha s)])` so that changes far below the magnitude of the
/// dual itself stay resolvable near the optimum.
fn dual_change(probs: &Array1<f64>, slopes: &Array1<f64>, alpha: f64) -> f64 {
    let inner: f64 = probs
        .iter()
        .zip(slopes)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &s)| p * (alpha * s).exp_m1())
        .sum();
    if inner.is_nan() {
        f64::INFINITY
    } else {
        inner.ln_1p()
    }
}

struct Lbfgs {
    memory: usize,
    history: VecDeque<(Array1<f64>, Array1<f64>, f64)>,
}

impl Lbfgs {
    fn new(memory: usize) -> Self {
        Self {
            memory,
            history: VecDeque::with_capacity(memory),
        }
    }

    fn direction(&self, grad: &Array1<f64>) -> Array1<f64> {
        let mut q = grad.clone();
        let mut alphas = Vec::with_capacity(self.history.len());
        for (s, y, rho) in self.history.iter().rev() {
            let a = rho * s.dot(&q);
            q.scaled_add(-a, y);
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.history.back() {
            q *= s.dot(y) / y.dot(y);
        }
        for ((s, y, rho), a) in self.history.iter().zip(alphas.into_iter().rev()) {
            let b = rho * y.dot(&q);
            q.scaled_add(a - b, s);
        }
        -q
    }

    fn push(&mut self, s: Array1<f64>, y: Array1<f64>) {
        let sy = s.dot(&y);
        if sy <= 1e-12 * s.dot(&s).sqrt() * y.dot(&y).sqrt() || sy <= 0.0 {
            return;
        }
        if self.history.len() == self.memory {
            self.history.pop_front();
        }
        self.history.push_back((s, y, 1.0 / sy));
    }

    fn reset(&mut self) {
        self.history.clear();
    }
}

/// Minimizes the dual from `init`.
///
/// Non-convergence is not an error: the best iterate comes back with
/// `converged = false` and a [`SolverStatus`] saying why.
pub fn minimize_dual(
    target: &TargetExpectations,
    features: &FeatureTable,
    init: &Weights,
    config: &SolverConfig,
) -> Result<SolverResult> {
    config.validate()?;
    check_len(Axis::Features, features.num_features(), target.len())?;
    check_len(Axis::Features, features.num_features(), init.len())?;
    let centered = centered(features, target);
    let ls = config.line_search;

    let mut weights = init.clone();
    let mut model = LogLinearModel::new(weights.clone(), features)?;
    let mut grad = centered_gradient(model.distribution(), &centered);
    let mut lbfgs = match config.method {
        Method::Lbfgs { memory } => Some(Lbfgs::new(memory)),
        Method::GradientDescent => None,
    };

    let mut iterations = 0;
    let status = loop {
        if sup_norm(&grad) <= config.grad_tol {
            break SolverStatus::Converged;
        }
        if weights.values().iter().any(|l| l.abs() > config.divergence_guard) {
            break SolverStatus::Diverged;
        }
        if iterations == config.max_iter {
            break SolverStatus::MaxIterExceeded;
        }

        let mut direction = match &lbfgs {
            Some(l) => l.direction(&grad),
            None => -&grad,
        };
        let mut slope = grad.dot(&direction);
        if !(slope < 0.0) {
            if let Some(l) = lbfgs.as_mut() {
                l.reset();
            }
            direction = -&grad;
            slope = grad.dot(&direction);
        }

        let step = match backtrack(model.distribution().probs(), &centered, &direction, slope, &ls) {
            Some(step) => step,
            None if lbfgs.as_ref().is_some_and(|l| !l.history.is_empty()) => {
                // curvature pairs gave a poor direction; retry from steepest descent
                lbfgs.as_mut().map(Lbfgs::reset);
                direction = -&grad;
                slope = grad.dot(&direction);
                match backtrack(model.distribution().probs(), &centered, &direction, slope, &ls) {
                    Some(step) => step,
                    None => break SolverStatus::Stalled,
                }
            }
            None => break SolverStatus::Stalled,
        };

        let delta = &direction * step;
        let next = Weights::new(weights.values() + &delta)?;
        let next_model = LogLinearModel::new(next.clone(), features)?;
        let next_grad = centered_gradient(next_model.distribution(), &centered);
        if let Some(l) = lbfgs.as_mut() {
            l.push(delta, &next_grad - &grad);
        }
        weights = next;
        model = next_model;
        grad = next_grad;
        iterations += 1;
    };

    let dual_value = model.log_partition() - weights.values().dot(target.values());
    Ok(SolverResult {
        weights,
        dual_value,
        grad_norm: sup_norm(&grad),
        iterations,
        converged: status == SolverStatus::Converged,
        status,
    })
}

fn backtrack(
    probs: &Array1<f64>,
    centered: &ndarray::Array2<f64>,
    direction: &Array1<f64>,
    slope: f64,
    ls: &LineSearch,
) -> Option<f64> {
    let slopes = direction.dot(centered);
    let mut step = ls.initial_step;
    for _ in 0..=ls.max_backtracks {
        let change = dual_change(probs, &slopes, step);
        if change <= ls.sufficient_decrease * step * slope {
            return Some(step);
        }
        step *= ls.backtrack;
    }
    None
}
