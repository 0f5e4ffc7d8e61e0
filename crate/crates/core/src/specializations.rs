//! Executable versions of the two reductions: a channel whose observations
//! each identify a single element recovers standard maximum entropy, and a
//! channel that observes one component `y` of `x = (y, z)` perfectly while
//! never observing `z` recovers latent maximum entropy.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::Serialize;

use crate::dual::{minimize_dual, SolverConfig, SolverResult, TargetExpectations};
use crate::em::{e_step_for_model, em_solve, sup_gap, EmConfig, UMaxEntProblem, ZeroMarginalPolicy};
use crate::error::{check_len, Axis, Error, Result};
use crate::model::{
    log_linear_distribution, observation_marginal, posterior, Distribution, ElementSpace, EmpiricalObservations,
    FeatureTable, LogLinearModel, ObservationChannel, Weights,
};

const POINT_MASS_TOL: f64 = 1e-12;

/// Splits every element into an observed part `y` and a hidden part `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFactorization {
    y_labels: Vec<String>,
    z_labels: Vec<String>,
    /// `(y, z)` for every element, indexed by element.
    components: Vec<(usize, usize)>,
}

impl LatentFactorization {
    pub fn new(y_labels: Vec<String>, z_labels: Vec<String>, components: Vec<(usize, usize)>) -> Result<Self> {
        if y_labels.is_empty() || z_labels.is_empty() || components.is_empty() {
            return Err(Error::Empty {
                what: "latent factorization",
            });
        }
        let mut seen = vec![false; y_labels.len() * z_labels.len()];
        for (x, &(y, z)) in components.iter().enumerate() {
            if y >= y_labels.len() || z >= z_labels.len() {
                return Err(Error::Invalid {
                    what: "latent factorization",
                    reason: format!("element {x} maps to out-of-range pair ({y}, {z})"),
                });
            }
            let slot = &mut seen[y * z_labels.len() + z];
            if *slot {
                return Err(Error::Invalid {
                    what: "latent factorization",
                    reason: format!("pair ({y}, {z}) is used by more than one element"),
                });
            }
            *slot = true;
        }
        Ok(Self {
            y_labels,
            z_labels,
            components,
        })
    }

    /// Every `(y, z)` pair is an element, ordered `y`-major.
    pub fn grid(ny: usize, nz: usize) -> Result<Self> {
        let components = (0..ny).flat_map(|y| (0..nz).map(move |z| (y, z))).collect();
        Self::new(
            (0..ny).map(|y| format!("y{y}")).collect(),
            (0..nz).map(|z| format!("z{z}")).collect(),
            components,
        )
    }

    pub fn num_elements(&self) -> usize {
        self.components.len()
    }

    pub fn num_y(&self) -> usize {
        self.y_labels.len()
    }

    pub fn num_z(&self) -> usize {
        self.z_labels.len()
    }

    pub fn y_labels(&self) -> &[String] {
        &self.y_labels
    }

    pub fn z_labels(&self) -> &[String] {
        &self.z_labels
    }

    pub fn components(&self) -> &[(usize, usize)] {
        &self.components
    }

    /// The element with components `(y, z)`, if that completion exists.
    pub fn embed(&self, y: usize, z: usize) -> Option<usize> {
        self.components.iter().position(|&c| c == (y, z))
    }

    /// Elements completing `y`: one per `z` in `Z_y`.
    pub fn completions(&self, y: usize) -> Vec<usize> {
        self.components
            .iter()
            .enumerate()
            .filter(|(_, &(cy, _))| cy == y)
            .map(|(x, _)| x)
            .collect()
    }

    /// `Pr(omega = y' | x) = [y(x) == y']`, with one observation per `y`.
    pub fn observed_channel(&self) -> Result<ObservationChannel> {
        let mut matrix = Array2::zeros((self.num_y(), self.num_elements()));
        for (x, &(y, _)) in self.components.iter().enumerate() {
            matrix[[y, x]] = 1.0;
        }
        ObservationChannel::new(matrix, self.y_labels.clone())
    }

    pub fn element_names(&self) -> Vec<String> {
        self.components
            .iter()
            .map(|&(y, z)| format!("{}|{}", self.y_labels[y], self.z_labels[z]))
            .collect()
    }
}

/// Channel determinism, reported both ways.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DeterminismReport {
    /// Under the given model, every posterior `Pr(. | omega)` with positive
    /// marginal is a point mass.
    pub posterior_point_masses: bool,
    /// Each observation is produced by at most one element, so posteriors
    /// are point masses under every model.
    pub disjoint_supports: bool,
}

impl DeterminismReport {
    pub fn is_deterministic(&self) -> bool {
        self.posterior_point_masses
    }
}

/// True when at most one entry of every channel row is nonzero.
pub fn has_disjoint_supports(channel: &ObservationChannel) -> bool {
    channel
        .matrix()
        .rows()
        .into_iter()
        .all(|row| row.iter().filter(|&&v| v > 0.0).count() <= 1)
}

pub fn is_deterministic_channel(channel: &ObservationChannel, model: &Distribution) -> Result<DeterminismReport> {
    let marginal = observation_marginal(model, channel)?;
    let mut point_masses = true;
    for w in 0..channel.num_observations() {
        if marginal.get(w) <= 0.0 {
            continue;
        }
        let post = posterior(model, channel, w)?;
        if post
            .probs()
            .iter()
            .any(|&p| p > POINT_MASS_TOL && p < 1.0 - POINT_MASS_TOL)
        {
            point_masses = false;
            break;
        }
    }
    Ok(DeterminismReport {
        posterior_point_masses: point_masses,
        disjoint_supports: has_disjoint_supports(channel),
    })
}

/// Standard maximum entropy on an empirical distribution over elements.
pub fn solve_standard_maxent(
    empirical_x: &Distribution,
    features: &FeatureTable,
    config: &SolverConfig,
) -> Result<SolverResult> {
    let target = TargetExpectations::from_distribution(empirical_x, features)?;
    minimize_dual(&target, features, &Weights::zeros(features.num_features()), config)
}

/// The term of the full Lagrangian gradient that the log-linear
/// approximation drops, per element:
/// `sum_k lambda_k phi_k(x) sum_omega Pr~(omega) Pr(omega|x) (Pr(omega) - Pr(omega|x) Pr(x)) / Pr(omega)^2`.
pub fn lagrangian_extra_term(problem: &UMaxEntProblem, weights: &Weights) -> Result<Array1<f64>> {
    let features = problem.features();
    let channel = problem.channel();
    let empirical = problem.empirical().dist();
    let model = log_linear_distribution(weights, features)?;
    let marginal = channel.matrix().dot(model.probs());
    let scores = features.scores(weights)?;
    let mut out = Array1::zeros(model.len());
    for (x, value) in out.iter_mut().enumerate() {
        let p_x = model.get(x);
        let mut acc = 0.0;
        for w in 0..channel.num_observations() {
            let weight = empirical.get(w);
            let c = channel.likelihood(w, x);
            if weight <= 0.0 || c == 0.0 {
                continue;
            }
            let m = marginal[w];
            if m <= 0.0 {
                return Err(Error::ZeroMarginal { observation: w });
            }
            acc += weight * c * (m - c * p_x) / (m * m);
        }
        *value = scores[x] * acc;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionKind {
    Standard,
    Latent,
}

/// Outcome of a reduction check. Fields that do not apply are `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReductionReport {
    pub reduction: ReductionKind,
    /// TV distance between the EM fit and the standard maximum-entropy fit.
    pub tv_distance: Option<f64>,
    /// Constraint residual of the EM fit.
    pub residual: f64,
    /// Sup-norm of the dropped Lagrangian gradient term at the EM fit.
    pub extra_term_norm: Option<f64>,
    /// EM iterations used.
    pub iterations: usize,
    /// Largest pointwise gap between the E-step and the latent right-hand side.
    pub identity_error: Option<f64>,
}

/// `Pr~(x) = sum of Pr~(omega)` over the observations produced by `x`.
/// Requires disjoint supports.
pub fn induced_element_distribution(problem: &UMaxEntProblem) -> Result<Distribution> {
    let channel = problem.channel();
    if !has_disjoint_supports(channel) {
        return Err(Error::PreconditionViolated(
            "channel observations are not each produced by a single element".into(),
        ));
    }
    let empirical = problem.empirical().dist();
    let mut mass = Array1::zeros(channel.num_elements());
    for w in 0..channel.num_observations() {
        let weight = empirical.get(w);
        if weight <= 0.0 {
            continue;
        }
        let x = channel
            .row(w)
            .iter()
            .position(|&v| v > 0.0)
            .ok_or(Error::ZeroMarginal { observation: w })?;
        mass[x] += weight;
    }
    Distribution::from_unnormalized(mass)
}

/// Runs EM on a deterministic-channel problem and compares it with standard
/// maximum entropy on the induced element distribution.
pub fn verify_maxent_reduction(problem: &UMaxEntProblem, config: &EmConfig) -> Result<ReductionReport> {
    let induced = induced_element_distribution(problem)?;
    let standard = solve_standard_maxent(&induced, problem.features(), &config.inner)?;
    let standard_dist = log_linear_distribution(&standard.weights, problem.features())?;
    let outcome = em_solve(problem, config)?;
    let extra = lagrangian_extra_term(problem, &outcome.weights)?;
    Ok(ReductionReport {
        reduction: ReductionKind::Standard,
        tv_distance: Some(outcome.distribution.total_variation(&standard_dist)?),
        residual: outcome.residual(),
        extra_term_norm: Some(extra.iter().fold(0.0, |m, v| m.max(v.abs()))),
        iterations: outcome.iterations(),
        identity_error: None,
    })
}

/// `sum_y Pr~(y) sum_{z in Z_y} Pr(z | y) phi_k(y, z)` with
/// `Pr(z | y) = Pr(x) / sum_{z'} Pr(embed(y, z'))` under `model`.
pub fn latent_constraint_rhs(
    fact: &LatentFactorization,
    empirical_y: &Distribution,
    model: &Distribution,
    features: &FeatureTable,
) -> Result<Array1<f64>> {
    check_len(Axis::Observations, fact.num_y(), empirical_y.len())?;
    check_len(Axis::Elements, fact.num_elements(), model.len())?;
    check_len(Axis::Elements, fact.num_elements(), features.num_elements())?;
    let mut out = Array1::zeros(features.num_features());
    for y in 0..fact.num_y() {
        let weight = empirical_y.get(y);
        if weight <= 0.0 {
            continue;
        }
        let members = fact.completions(y);
        let mass: f64 = members.iter().map(|&x| model.get(x)).sum();
        if mass <= 0.0 {
            return Err(Error::ZeroMarginal { observation: y });
        }
        for &x in &members {
            out.scaled_add(weight * model.get(x) / mass, &features.element(x));
        }
    }
    Ok(out)
}

/// The uncertain problem whose channel observes `y` exactly.
pub fn latent_problem(
    fact: &LatentFactorization,
    empirical_y: &Distribution,
    features: &FeatureTable,
) -> Result<UMaxEntProblem> {
    UMaxEntProblem::new(
        ElementSpace::new(fact.element_names())?,
        features.clone(),
        fact.observed_channel()?,
        EmpiricalObservations::exact(empirical_y.clone()),
    )
}

/// Checks the E-step of the `y`-channel problem against the latent
/// right-hand side at `checks` random strictly positive models, then runs EM.
pub fn verify_latent_reduction<R: Rng + ?Sized>(
    fact: &LatentFactorization,
    empirical_y: &Distribution,
    features: &FeatureTable,
    config: &EmConfig,
    checks: usize,
    rng: &mut R,
) -> Result<ReductionReport> {
    let problem = latent_problem(fact, empirical_y, features)?;
    let n = fact.num_elements();
    let mut identity_error: f64 = 0.0;
    for _ in 0..checks {
        let raw: Array1<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let model = Distribution::from_unnormalized(raw)?;
        let e = e_step_for_model(&problem, &model, ZeroMarginalPolicy::Error)?;
        let rhs = latent_constraint_rhs(fact, empirical_y, &model, features)?;
        identity_error = identity_error.max(sup_gap(e.values(), &rhs));
    }

    let outcome = em_solve(&problem, config)?;
    let fully_observed = (0..fact.num_y()).all(|y| fact.completions(y).len() <= 1);
    let (tv_distance, extra_term_norm) = if fully_observed {
        let induced = induced_element_distribution(&problem)?;
        let standard = solve_standard_maxent(&induced, features, &config.inner)?;
        let standard_dist = LogLinearModel::new(standard.weights, features)?.into_distribution();
        let extra = lagrangian_extra_term(&problem, &outcome.weights)?;
        (
            Some(outcome.distribution.total_variation(&standard_dist)?),
            Some(extra.iter().fold(0.0, |m: f64, v| m.max(v.abs()))),
        )
    } else {
        (None, None)
    };
    Ok(ReductionReport {
        reduction: ReductionKind::Latent,
        tv_distance,
        residual: outcome.residual(),
        extra_term_norm,
        iterations: outcome.iterations(),
        identity_error: Some(identity_error),
    })
}
