//! Expectation-maximization for uncertain maximum entropy.
//!
//! Each iteration computes posterior-corrected feature expectations under
//! the current model (E-step) and then solves the convex maximum-entropy
//! dual for those targets (M-step), warm-started from the previous weights.
//! Every iteration is recorded together with the data log-likelihood and its
//! lower-bound decomposition `L >= U* + Q + H`.

use std::io::{self, Write};

use log::warn;
use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dual::{minimize_dual, SolverConfig, TargetExpectations};
use crate::error::{check_len, Axis, Error, Result};
use crate::model::{
    bayes_posterior, feature_expectation, log_sum_exp, Distribution, ElementSpace, EmpiricalObservations, FeatureTable,
    LogLinearModel, ObservationChannel, Weights,
};

/// What to do with an observation that has empirical mass but zero
/// probability under the current model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroMarginalPolicy {
    #[default]
    Error,
    /// Drop the observation with a warning and renormalize the rest.
    Skip,
}

/// A fully specified uncertain maximum-entropy problem.
#[derive(Debug, Clone)]
pub struct UMaxEntProblem {
    space: ElementSpace,
    features: FeatureTable,
    channel: ObservationChannel,
    empirical: EmpiricalObservations,
}

impl UMaxEntProblem {
    pub fn new(
        space: ElementSpace,
        features: FeatureTable,
        channel: ObservationChannel,
        empirical: EmpiricalObservations,
    ) -> Result<Self> {
        check_len(Axis::Elements, space.len(), features.num_elements())?;
        check_len(Axis::Elements, space.len(), channel.num_elements())?;
        check_len(Axis::Observations, channel.num_observations(), empirical.len())?;
        Ok(Self {
            space,
            features,
            channel,
            empirical,
        })
    }

    pub fn space(&self) -> &ElementSpace {
        &self.space
    }

    pub fn features(&self) -> &FeatureTable {
        &self.features
    }

    pub fn channel(&self) -> &ObservationChannel {
        &self.channel
    }

    pub fn empirical(&self) -> &EmpiricalObservations {
        &self.empirical
    }

    pub(crate) fn evidence(&self) -> ChannelEvidence<'_> {
        ChannelEvidence {
            channel: &self.channel,
            empirical: self.empirical.dist(),
        }
    }
}

/// Weighted observations, each carrying a likelihood vector over elements.
///
/// Likelihoods only need to be correct up to a positive factor per
/// observation; that factor shifts the log-likelihood and `U*` by a
/// constant and leaves posteriors unchanged.
pub trait Evidence {
    fn num_elements(&self) -> usize;
    fn num_observations(&self) -> usize;
    fn weight(&self, observation: usize) -> f64;
    fn likelihood_row(&self, observation: usize) -> ArrayView1<'_, f64>;
}

/// A channel paired with an empirical distribution over its observations.
#[derive(Debug, Clone, Copy)]
pub struct ChannelEvidence<'a> {
    pub channel: &'a ObservationChannel,
    pub empirical: &'a Distribution,
}

impl Evidence for ChannelEvidence<'_> {
    fn num_elements(&self) -> usize {
        self.channel.num_elements()
    }

    fn num_observations(&self) -> usize {
        self.channel.num_observations()
    }

    fn weight(&self, observation: usize) -> f64 {
        self.empirical.get(observation)
    }

    fn likelihood_row(&self, observation: usize) -> ArrayView1<'_, f64> {
        self.channel.row(observation)
    }
}

/// Visits the Bayes posterior of every observation with positive weight.
/// Returns the total weight of the visited observations.
fn for_each_posterior<E, F>(evidence: &E, prior: &Distribution, policy: ZeroMarginalPolicy, mut visit: F) -> Result<f64>
where
    E: Evidence + ?Sized,
    F: FnMut(usize, f64, &Distribution),
{
    check_len(Axis::Elements, evidence.num_elements(), prior.len())?;
    let mut kept = 0.0;
    let mut first_skipped = None;
    for obs in 0..evidence.num_observations() {
        let weight = evidence.weight(obs);
        if weight <= 0.0 {
            continue;
        }
        match bayes_posterior(evidence.likelihood_row(obs), prior.probs()) {
            Some(post) => {
                visit(obs, weight, &post);
                kept += weight;
            }
            None => match policy {
                ZeroMarginalPolicy::Error => return Err(Error::ZeroMarginal { observation: obs }),
                ZeroMarginalPolicy::Skip => {
                    warn!("skipping observation {obs}: zero marginal under the current model");
                    first_skipped.get_or_insert(obs);
                }
            },
        }
    }
    if kept <= 0.0 {
        return Err(Error::ZeroMarginal {
            observation: first_skipped.unwrap_or(0),
        });
    }
    Ok(kept)
}

/// `a(x) = sum_omega Pr~(omega) Pr(x | omega)`: the posterior-averaged
/// empirical distribution over elements.
pub fn posterior_element_mass<E: Evidence + ?Sized>(
    evidence: &E,
    prior: &Distribution,
    policy: ZeroMarginalPolicy,
) -> Result<Distribution> {
    let mut mass = Array1::<f64>::zeros(prior.len());
    for_each_posterior(evidence, prior, policy, |_, w, post| {
        mass.scaled_add(w, post.probs());
    })?;
    Distribution::from_unnormalized(mass)
}

/// E-step over arbitrary evidence.
pub fn evidence_targets<E: Evidence + ?Sized>(
    evidence: &E,
    prior: &Distribution,
    features: &FeatureTable,
    policy: ZeroMarginalPolicy,
) -> Result<TargetExpectations> {
    check_len(Axis::Elements, features.num_elements(), prior.len())?;
    let mass = posterior_element_mass(evidence, prior, policy)?;
    TargetExpectations::from_distribution(&mass, features)
}

/// `sum_omega w(omega) log sum_x l(omega | x) Pr(x)`, from log-probabilities.
/// `-inf` when some weighted observation is impossible under the model.
pub fn evidence_log_likelihood<E: Evidence + ?Sized>(evidence: &E, log_probs: &Array1<f64>) -> f64 {
    let mut total = 0.0;
    for obs in 0..evidence.num_observations() {
        let weight = evidence.weight(obs);
        if weight <= 0.0 {
            continue;
        }
        let row = evidence.likelihood_row(obs);
        let terms: Vec<f64> = row
            .iter()
            .zip(log_probs)
            .map(|(&l, &lp)| if l > 0.0 { l.ln() + lp } else { f64::NEG_INFINITY })
            .collect();
        let log_marginal = log_sum_exp(terms.iter().copied());
        if log_marginal == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        total += weight * log_marginal;
    }
    total
}

/// The EM lower bound split into its three terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Decomposition {
    /// Expected log observation likelihood under the previous posteriors.
    pub u_star: f64,
    /// Expected complete log model term `-log Z(lambda) + lambda . phi_hat(lambda_prev)`.
    pub q: f64,
    /// Conditional entropy of the previous posteriors.
    pub h: f64,
}

impl Decomposition {
    pub fn bound(&self) -> f64 {
        self.u_star + self.q + self.h
    }
}

/// `U*(prev)`, `Q(current, prev)` and `H(prev)` over arbitrary evidence.
pub fn evidence_decomposition<E: Evidence + ?Sized>(
    evidence: &E,
    prev: &Distribution,
    current: &LogLinearModel,
    features: &FeatureTable,
    policy: ZeroMarginalPolicy,
) -> Result<Decomposition> {
    check_len(Axis::Elements, features.num_elements(), prev.len())?;
    let mut u_star = 0.0;
    let mut h = 0.0;
    let mut mass = Array1::<f64>::zeros(prev.len());
    let kept = for_each_posterior(evidence, prev, policy, |obs, w, post| {
        let row = evidence.likelihood_row(obs);
        for (x, &p) in post.probs().iter().enumerate() {
            // posterior mass is zero wherever the likelihood is zero
            if p > 0.0 {
                u_star += w * p * row[x].ln();
                h -= w * p * p.ln();
            }
        }
        mass.scaled_add(w, post.probs());
    })?;
    let phi_hat = features.values().dot(&(mass / kept));
    let q = -current.log_partition() + current.weights().values().dot(&phi_hat);
    Ok(Decomposition {
        u_star: u_star / kept,
        q,
        h: h / kept,
    })
}

/// A target for the EM loop: how to form M-step targets under a model, and
/// how to score a model.
pub trait EmObjective {
    fn features(&self) -> &FeatureTable;

    fn targets(&self, model: &Distribution, policy: ZeroMarginalPolicy) -> Result<TargetExpectations>;

    fn log_likelihood(&self, log_probs: &Array1<f64>) -> f64;

    fn decomposition(
        &self,
        prev: &Distribution,
        current: &LogLinearModel,
        policy: ZeroMarginalPolicy,
    ) -> Result<Decomposition>;

    /// `||E_model[phi] - targets(model)||_inf`.
    fn residual(&self, model: &Distribution, policy: ZeroMarginalPolicy) -> Result<f64> {
        let targets = self.targets(model, policy)?;
        let expected = feature_expectation(model, self.features())?;
        Ok(sup_gap(&expected, targets.values()))
    }
}

pub(crate) fn sup_gap(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

impl EmObjective for UMaxEntProblem {
    fn features(&self) -> &FeatureTable {
        &self.features
    }

    fn targets(&self, model: &Distribution, policy: ZeroMarginalPolicy) -> Result<TargetExpectations> {
        evidence_targets(&self.evidence(), model, &self.features, policy)
    }

    fn log_likelihood(&self, log_probs: &Array1<f64>) -> f64 {
        evidence_log_likelihood(&self.evidence(), log_probs)
    }

    fn decomposition(
        &self,
        prev: &Distribution,
        current: &LogLinearModel,
        policy: ZeroMarginalPolicy,
    ) -> Result<Decomposition> {
        evidence_decomposition(&self.evidence(), prev, current, &self.features, policy)
    }
}

/// E-step: `phi_hat_k = sum_omega Pr~(omega) sum_x Pr_lambda(x | omega) phi_k(x)`.
pub fn e_step(problem: &UMaxEntProblem, current: &Weights) -> Result<TargetExpectations> {
    e_step_with_policy(problem, current, ZeroMarginalPolicy::Error)
}

pub fn e_step_with_policy(
    problem: &UMaxEntProblem,
    current: &Weights,
    policy: ZeroMarginalPolicy,
) -> Result<TargetExpectations> {
    let model = LogLinearModel::new(current.clone(), &problem.features)?;
    problem.targets(model.distribution(), policy)
}

/// E-step under an arbitrary model distribution (not necessarily log-linear).
pub fn e_step_for_model(
    problem: &UMaxEntProblem,
    model: &Distribution,
    policy: ZeroMarginalPolicy,
) -> Result<TargetExpectations> {
    problem.targets(model, policy)
}

/// Data log-likelihood `L(lambda) = sum_omega Pr~(omega) log Pr_lambda(omega)`.
/// `-inf` flags an observation with empirical mass the model cannot produce.
pub fn log_likelihood(problem: &UMaxEntProblem, weights: &Weights) -> Result<f64> {
    let model = LogLinearModel::new(weights.clone(), &problem.features)?;
    Ok(problem.log_likelihood(model.log_probs()))
}

/// `(U*(lambda_prev), Q(lambda, lambda_prev), H(lambda_prev))`.
pub fn likelihood_decomposition(problem: &UMaxEntProblem, weights: &Weights, prev: &Weights) -> Result<Decomposition> {
    let current = LogLinearModel::new(weights.clone(), &problem.features)?;
    let prev = LogLinearModel::new(prev.clone(), &problem.features)?;
    problem.decomposition(prev.distribution(), &current, ZeroMarginalPolicy::Error)
}

/// Sup-norm gap between the model's feature expectations and the
/// posterior-corrected empirical expectations, both at `weights`.
pub fn constraint_residual(problem: &UMaxEntProblem, weights: &Weights) -> Result<f64> {
    let model = LogLinearModel::new(weights.clone(), &problem.features)?;
    problem.residual(model.distribution(), ZeroMarginalPolicy::Error)
}

/// How the first model is chosen.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum InitMode {
    /// `lambda = 0`, the uniform model.
    #[default]
    Zero,
    /// Each `lambda_k` uniform in `[-scale, scale]`.
    Random { seed: u64, scale: f64 },
    /// The first E-step uses this distribution; weights start at zero.
    Prior(Distribution),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub lambda_tol: f64,
    pub likelihood_tol: f64,
    pub max_em_iter: usize,
    pub inner: SolverConfig,
    pub init: InitMode,
    pub zero_marginal: ZeroMarginalPolicy,
    /// Number of random restarts; values above 1 require `InitMode::Random`
    /// and use seeds `seed, seed + 1, ...`. The best final likelihood wins.
    pub restarts: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            lambda_tol: 1e-6,
            likelihood_tol: 1e-10,
            max_em_iter: 500,
            inner: SolverConfig::default(),
            init: InitMode::Zero,
            zero_marginal: ZeroMarginalPolicy::Error,
            restarts: 1,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        self.inner.validate()?;
        let invalid = |reason: &str| Error::Invalid {
            what: "EM config",
            reason: reason.to_string(),
        };
        if !(self.lambda_tol > 0.0) || !(self.likelihood_tol > 0.0) {
            return Err(invalid("tolerances must be positive"));
        }
        if self.max_em_iter == 0 {
            return Err(invalid("max_em_iter must be at least 1"));
        }
        if let InitMode::Random { scale, .. } = self.init {
            if !(scale >= 0.0) || !scale.is_finite() {
                return Err(invalid("random init scale must be finite and nonnegative"));
            }
        }
        if self.restarts > 1 && !matches!(self.init, InitMode::Random { .. }) {
            return Err(invalid("restarts require random initialization"));
        }
        Ok(())
    }
}

/// One row of the convergence trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmRecord {
    pub iteration: usize,
    pub lambda: Vec<f64>,
    /// E-step targets computed under this iteration's model.
    pub phi_hat: Vec<f64>,
    pub log_likelihood: f64,
    pub q: f64,
    pub h: f64,
    pub u_star: f64,
    /// `||E_lambda[phi] - phi_hat||_inf` at this iteration's model.
    pub residual: f64,
    pub inner_iterations: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EmTrace {
    pub records: Vec<EmRecord>,
}

impl EmTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EmRecord> {
        self.records.last()
    }

    /// CSV with header `iter,loglik,Q,H,U_star,residual,lambda_0..`, reals
    /// printed with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let k = self.records.first().map_or(0, |r| r.lambda.len());
        write!(out, "iter,loglik,Q,H,U_star,residual")?;
        for i in 0..k {
            write!(out, ",lambda_{i}")?;
        }
        writeln!(out)?;
        for r in &self.records {
            write!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                r.iteration, r.log_likelihood, r.q, r.h, r.u_star, r.residual
            )?;
            for l in &r.lambda {
                write!(out, ",{l:.16e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is ASCII")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceReason {
    /// The constraint residual is within the inner gradient tolerance, so a
    /// further M-step would not move the weights.
    FixedPoint,
    LambdaChange,
    LikelihoodChange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EmStatus {
    Converged(ConvergenceReason),
    MaxEmIterExceeded,
}

#[derive(Debug, Clone)]
pub struct EmOutcome {
    pub weights: Weights,
    pub distribution: Distribution,
    pub trace: EmTrace,
    pub status: EmStatus,
}

impl EmOutcome {
    pub fn converged(&self) -> bool {
        matches!(self.status, EmStatus::Converged(_))
    }

    pub fn log_likelihood(&self) -> f64 {
        self.trace.last().map_or(f64::NEG_INFINITY, |r| r.log_likelihood)
    }

    pub fn residual(&self) -> f64 {
        self.trace.last().map_or(f64::INFINITY, |r| r.residual)
    }

    /// Number of M-steps performed.
    pub fn iterations(&self) -> usize {
        self.trace.last().map_or(0, |r| r.iteration)
    }
}

/// Runs EM on an uncertain maximum-entropy problem.
pub fn em_solve(problem: &UMaxEntProblem, config: &EmConfig) -> Result<EmOutcome> {
    run_em(problem, config)
}

/// Runs EM on any objective, honoring `config.restarts`.
pub fn run_em<O: EmObjective + ?Sized>(objective: &O, config: &EmConfig) -> Result<EmOutcome> {
    config.validate()?;
    match config.init {
        InitMode::Random { seed, scale } if config.restarts > 1 => {
            let mut best: Option<EmOutcome> = None;
            for offset in 0..config.restarts as u64 {
                let run_config = EmConfig {
                    init: InitMode::Random {
                        seed: seed.wrapping_add(offset),
                        scale,
                    },
                    restarts: 1,
                    ..config.clone()
                };
                let outcome = run_once(objective, &run_config)?;
                if best
                    .as_ref()
                    .is_none_or(|b| outcome.log_likelihood() > b.log_likelihood())
                {
                    best = Some(outcome);
                }
            }
            Ok(best.expect("at least one restart"))
        }
        _ => run_once(objective, config),
    }
}

fn initial_weights(init: &InitMode, k: usize) -> Weights {
    match init {
        InitMode::Zero | InitMode::Prior(_) => Weights::zeros(k),
        InitMode::Random { seed, scale } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let values: Array1<f64> = (0..k)
                .map(|_| {
                    if *scale > 0.0 {
                        rng.random_range(-scale..=*scale)
                    } else {
                        0.0
                    }
                })
                .collect();
            Weights::new(values).expect("finite draws")
        }
    }
}

fn run_once<O: EmObjective + ?Sized>(objective: &O, config: &EmConfig) -> Result<EmOutcome> {
    let features = objective.features();
    let policy = config.zero_marginal;
    let prior_mode = matches!(config.init, InitMode::Prior(_));

    let mut weights = initial_weights(&config.init, features.num_features());
    let mut model = LogLinearModel::new(weights.clone(), features)?;
    // distribution driving the next E-step; the supplied prior on the first pass
    let mut prev = match &config.init {
        InitMode::Prior(prior) => {
            check_len(Axis::Elements, features.num_elements(), prior.len())?;
            prior.clone()
        }
        _ => model.distribution().clone(),
    };
    let log_probs = prev.probs().mapv(f64::ln);
    let mut log_lik = if prior_mode {
        objective.log_likelihood(&log_probs)
    } else {
        objective.log_likelihood(model.log_probs())
    };
    let mut phi_hat = objective.targets(&prev, policy)?;
    let decomposition = objective.decomposition(&prev, &model, policy)?;
    let residual = sup_gap(&feature_expectation(&prev, features)?, phi_hat.values());

    let mut trace = EmTrace::default();
    trace
        .records
        .push(record(0, &weights, &phi_hat, log_lik, decomposition, residual, 0));
    if !prior_mode && residual <= config.inner.grad_tol {
        return Ok(finish(
            weights,
            model,
            trace,
            EmStatus::Converged(ConvergenceReason::FixedPoint),
        ));
    }

    for iteration in 1..=config.max_em_iter {
        let solved = minimize_dual(&phi_hat, features, &weights, &config.inner).map_err(|e| Error::MStep {
            iteration,
            source: Box::new(e),
        })?;
        if !solved.converged {
            return Err(Error::InnerSolver {
                iteration,
                status: solved.status,
                grad_norm: solved.grad_norm,
            });
        }
        let next = LogLinearModel::new(solved.weights.clone(), features)?;
        let decomposition = objective.decomposition(&prev, &next, policy)?;
        let next_log_lik = objective.log_likelihood(next.log_probs());
        let next_phi_hat = objective.targets(next.distribution(), policy)?;
        let residual = sup_gap(
            &feature_expectation(next.distribution(), features)?,
            next_phi_hat.values(),
        );
        trace.records.push(record(
            iteration,
            &solved.weights,
            &next_phi_hat,
            next_log_lik,
            decomposition,
            residual,
            solved.iterations,
        ));

        let lambda_change = solved.weights.sup_distance(&weights);
        let likelihood_change = (next_log_lik - log_lik).abs();
        let changes_meaningful = !(prior_mode && iteration == 1);
        let certified = residual <= 10.0 * config.lambda_tol;
        let reason = if residual <= config.inner.grad_tol {
            Some(ConvergenceReason::FixedPoint)
        } else if changes_meaningful && certified && lambda_change <= config.lambda_tol {
            Some(ConvergenceReason::LambdaChange)
        } else if changes_meaningful && certified && likelihood_change <= config.likelihood_tol {
            Some(ConvergenceReason::LikelihoodChange)
        } else {
            None
        };

        weights = solved.weights;
        model = next;
        prev = model.distribution().clone();
        phi_hat = next_phi_hat;
        log_lik = next_log_lik;
        if let Some(reason) = reason {
            return Ok(finish(weights, model, trace, EmStatus::Converged(reason)));
        }
    }
    Ok(finish(weights, model, trace, EmStatus::MaxEmIterExceeded))
}

fn record(
    iteration: usize,
    weights: &Weights,
    phi_hat: &TargetExpectations,
    log_likelihood: f64,
    d: Decomposition,
    residual: f64,
    inner_iterations: usize,
) -> EmRecord {
    EmRecord {
        iteration,
        lambda: weights.to_vec(),
        phi_hat: phi_hat.to_vec(),
        log_likelihood,
        q: d.q,
        h: d.h,
        u_star: d.u_star,
        residual,
        inner_iterations,
    }
}

fn finish(weights: Weights, model: LogLinearModel, trace: EmTrace, status: EmStatus) -> EmOutcome {
    EmOutcome {
        weights,
        distribution: model.into_distribution(),
        trace,
        status,
    }
}

/// Likelihood rows stored densely, one per observation.
#[derive(Debug, Clone)]
pub struct DenseEvidence {
    pub weights: Array1<f64>,
    pub likelihoods: Array2<f64>,
}

impl Evidence for DenseEvidence {
    fn num_elements(&self) -> usize {
        self.likelihoods.ncols()
    }

    fn num_observations(&self) -> usize {
        self.likelihoods.nrows()
    }

    fn weight(&self, observation: usize) -> f64 {
        self.weights[observation]
    }

    fn likelihood_row(&self, observation: usize) -> ArrayView1<'_, f64> {
        self.likelihoods.row(observation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual::minimize_dual;
    use crate::model::{log_linear_distribution, observation_marginal};
    use rand::Rng;

    fn problem(features: &[Vec<f64>], channel: ObservationChannel, empirical: Distribution) -> UMaxEntProblem {
        let f = FeatureTable::from_rows(features).unwrap();
        UMaxEntProblem::new(
            ElementSpace::indexed(f.num_elements()).unwrap(),
            f,
            channel,
            EmpiricalObservations::exact(empirical),
        )
        .unwrap()
    }

    fn two_by_two() -> UMaxEntProblem {
        // truth [0.75, 0.25] pushed through columns [0.9, 0.1] and [0.3, 0.7]
        let channel = ObservationChannel::from_rows(&[vec![0.9, 0.3], vec![0.1, 0.7]]).unwrap();
        let truth = Distribution::from_vec(vec![0.75, 0.25]).unwrap();
        let empirical = observation_marginal(&truth, &channel).unwrap();
        problem(&[vec![1.0, 0.0]], channel, empirical)
    }

    #[test]
    fn problem_checks_dimensions() {
        let f = FeatureTable::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let err = UMaxEntProblem::new(
            ElementSpace::indexed(2).unwrap(),
            f,
            ObservationChannel::identity(2).unwrap(),
            EmpiricalObservations::exact(Distribution::uniform(3).unwrap()),
        )
        .unwrap_err();
        assert_eq!(
            err,
            Error::DimensionMismatch {
                axis: Axis::Observations,
                expected: 2,
                found: 3
            }
        );
    }

    #[test]
    fn e_step_identity_channel_gives_empirical_expectations() {
        let empirical = Distribution::from_vec(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let p = problem(
            &[vec![1.0, -1.0, 0.5, 2.0], vec![0.0, 1.0, 1.0, 0.0]],
            ObservationChannel::identity(4).unwrap(),
            empirical.clone(),
        );
        let w = Weights::from_vec(vec![0.3, -0.7]).unwrap();
        let t = e_step(&p, &w).unwrap();
        let expected = feature_expectation(&empirical, p.features()).unwrap();
        assert!(sup_gap(t.values(), &expected) < 1e-15);
    }

    #[test]
    fn e_step_uninformative_channel_reproduces_model_expectations() {
        let p = problem(
            &[vec![1.0, -1.0, 0.5], vec![0.0, 1.0, 1.0]],
            ObservationChannel::uniform(2, 3).unwrap(),
            Distribution::from_vec(vec![0.9, 0.1]).unwrap(),
        );
        let w = Weights::from_vec(vec![0.3, -0.7]).unwrap();
        let t = e_step(&p, &w).unwrap();
        let model = log_linear_distribution(&w, p.features()).unwrap();
        let own = feature_expectation(&model, p.features()).unwrap();
        assert!(sup_gap(t.values(), &own) < 1e-15);
        assert!(constraint_residual(&p, &w).unwrap() < 1e-15);
    }

    #[test]
    fn e_step_two_by_two_matches_enumeration() {
        let p = two_by_two();
        // Pr~ = [0.75, 0.25] exactly: 0.75*0.9 + 0.25*0.3 = 0.75
        assert!((p.empirical().dist().get(0) - 0.75).abs() < 1e-15);
        // model uniform: Pr(x0 | w0) = 0.9/1.2, Pr(x0 | w1) = 0.1/0.8
        let expected = 0.75 * (0.9 / 1.2) + 0.25 * (0.1 / 0.8);
        let t = e_step(&p, &Weights::zeros(1)).unwrap();
        assert!((t.values()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn log_likelihood_examples() {
        let empirical = Distribution::from_vec(vec![0.5, 0.3, 0.2]).unwrap();
        let f = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let p = problem(&f, ObservationChannel::identity(3).unwrap(), empirical.clone());
        // lambda reproducing Pr~: log(p0/p2), log(p1/p2)
        let w = Weights::from_vec(vec![(0.5f64 / 0.2).ln(), (0.3f64 / 0.2).ln()]).unwrap();
        let l = log_likelihood(&p, &w).unwrap();
        assert!((l + empirical.entropy()).abs() < 1e-14);

        let p = problem(
            &f,
            ObservationChannel::uniform(4, 3).unwrap(),
            Distribution::from_vec(vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
        );
        let l = log_likelihood(&p, &Weights::from_vec(vec![1.0, -2.0]).unwrap()).unwrap();
        assert!((l + 4f64.ln()).abs() < 1e-14);

        let p = two_by_two();
        let l = log_likelihood(&p, &Weights::zeros(1)).unwrap();
        // uniform model: Pr(w0) = 0.6, Pr(w1) = 0.4
        let expected = 0.75 * 0.6f64.ln() + 0.25 * 0.4f64.ln();
        assert!((l - expected).abs() < 1e-15);
    }

    #[test]
    fn log_likelihood_flags_impossible_observation() {
        let f = vec![vec![1.0, 0.0]];
        let channel = ObservationChannel::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = problem(&f, channel, Distribution::from_vec(vec![0.5, 0.5]).unwrap());
        // a log-linear model never puts exactly zero mass, so force it through a prior
        let l = evidence_log_likelihood(&p.evidence(), &ndarray::array![0.0, f64::NEG_INFINITY]);
        assert_eq!(l, f64::NEG_INFINITY);
    }

    #[test]
    fn decomposition_is_tight_at_equality_and_entropy_free_for_identity() {
        let p = two_by_two();
        let w = Weights::from_vec(vec![0.4]).unwrap();
        let d = likelihood_decomposition(&p, &w, &w).unwrap();
        assert!((d.bound() - log_likelihood(&p, &w).unwrap()).abs() < 1e-10);

        let p = problem(
            &[vec![1.0, -1.0, 0.5]],
            ObservationChannel::identity(3).unwrap(),
            Distribution::from_vec(vec![0.2, 0.5, 0.3]).unwrap(),
        );
        let d = likelihood_decomposition(&p, &w, &Weights::zeros(1)).unwrap();
        assert_eq!(d.h, 0.0);
        assert_eq!(d.u_star, 0.0);
    }

    #[test]
    fn decomposition_bounds_likelihood_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let channel =
            ObservationChannel::from_rows(&[vec![0.5, 0.2, 0.1], vec![0.3, 0.3, 0.2], vec![0.2, 0.5, 0.7]]).unwrap();
        let p = problem(
            &[vec![1.0, 0.0, -1.0], vec![0.5, 1.5, 0.0]],
            channel,
            Distribution::from_vec(vec![0.2, 0.3, 0.5]).unwrap(),
        );
        for _ in 0..100 {
            let a = Weights::from_vec((0..2).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let b = Weights::from_vec((0..2).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let d = likelihood_decomposition(&p, &a, &b).unwrap();
            assert!(d.bound() <= log_likelihood(&p, &a).unwrap() + 1e-10);
        }
    }

    #[test]
    fn identity_channel_solves_in_one_iteration() {
        let empirical = Distribution::from_vec(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let p = problem(
            &[vec![1.0, -1.0, 0.5, 2.0], vec![0.0, 1.0, 1.0, 0.0]],
            ObservationChannel::identity(4).unwrap(),
            empirical.clone(),
        );
        let outcome = em_solve(&p, &EmConfig::default()).unwrap();
        assert!(outcome.converged());
        assert_eq!(outcome.iterations(), 1);
        let t = TargetExpectations::from_distribution(&empirical, p.features()).unwrap();
        let direct = minimize_dual(&t, p.features(), &Weights::zeros(2), &SolverConfig::default()).unwrap();
        assert_eq!(outcome.weights, direct.weights);
    }

    #[test]
    fn uninformative_channel_stays_uniform() {
        let p = problem(
            &[vec![1.0, -1.0, 0.5], vec![0.0, 1.0, 1.0]],
            ObservationChannel::uniform(3, 3).unwrap(),
            Distribution::from_vec(vec![0.7, 0.2, 0.1]).unwrap(),
        );
        let outcome = em_solve(&p, &EmConfig::default()).unwrap();
        assert!(outcome.converged());
        assert!(outcome.iterations() <= 2);
        for &q in outcome.distribution.probs() {
            assert!((q - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn recovers_log_linear_truth_through_noisy_channel() {
        let features = vec![vec![1.0, 0.0, -1.0], vec![0.5, -1.0, 1.0]];
        let f = FeatureTable::from_rows(&features).unwrap();
        let truth_w = Weights::from_vec(vec![0.7, -0.3]).unwrap();
        let truth = log_linear_distribution(&truth_w, &f).unwrap();
        let mut matrix = Array2::<f64>::eye(3) * 0.8;
        matrix += 0.2 / 3.0;
        let channel = ObservationChannel::new(matrix, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let empirical = observation_marginal(&truth, &channel).unwrap();
        let p = problem(&features, channel, empirical);
        let outcome = em_solve(&p, &EmConfig::default()).unwrap();
        assert!(outcome.converged(), "{:?}", outcome.status);
        let got = feature_expectation(&outcome.distribution, &f).unwrap();
        let want = feature_expectation(&truth, &f).unwrap();
        assert!(sup_gap(&got, &want) < 1e-5, "{got} vs {want}");
        assert!(constraint_residual(&p, &outcome.weights).unwrap() <= 1e-5);
        for pair in outcome.trace.records.windows(2) {
            assert!(pair[1].log_likelihood >= pair[0].log_likelihood - 1e-9);
        }
    }

    #[test]
    fn runs_are_deterministic_with_seeds_and_restarts() {
        let p = two_by_two();
        let config = EmConfig {
            init: InitMode::Random { seed: 42, scale: 0.1 },
            restarts: 3,
            ..EmConfig::default()
        };
        let a = em_solve(&p, &config).unwrap();
        let b = em_solve(&p, &config).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.to_csv(), b.trace.to_csv());
    }

    #[test]
    fn restarts_need_random_init() {
        let config = EmConfig {
            restarts: 2,
            ..EmConfig::default()
        };
        assert!(matches!(em_solve(&two_by_two(), &config), Err(Error::Invalid { .. })));
    }

    #[test]
    fn prior_init_uses_prior_in_first_e_step() {
        let p = two_by_two();
        let prior = Distribution::from_vec(vec![0.9, 0.1]).unwrap();
        let config = EmConfig {
            init: InitMode::Prior(prior.clone()),
            ..EmConfig::default()
        };
        let outcome = em_solve(&p, &config).unwrap();
        let first = &outcome.trace.records[0];
        let expected = e_step_for_model(&p, &prior, ZeroMarginalPolicy::Error).unwrap();
        assert_eq!(first.phi_hat, expected.to_vec());
        assert!(outcome.converged());
        assert!((outcome.distribution.get(0) - 0.75).abs() < 1e-5);
    }

    #[test]
    fn zero_marginal_policy() {
        let channel = ObservationChannel::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = problem(
            &[vec![1.0, 0.0]],
            channel,
            Distribution::from_vec(vec![0.5, 0.5]).unwrap(),
        );
        let prior = Distribution::point_mass(2, 0).unwrap();
        assert_eq!(
            e_step_for_model(&p, &prior, ZeroMarginalPolicy::Error).unwrap_err(),
            Error::ZeroMarginal { observation: 1 }
        );
        let t = e_step_for_model(&p, &prior, ZeroMarginalPolicy::Skip).unwrap();
        assert_eq!(t.values()[0], 1.0);
    }

    #[test]
    fn trace_csv_layout() {
        let outcome = em_solve(&two_by_two(), &EmConfig::default()).unwrap();
        let csv = outcome.trace.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("iter,loglik,Q,H,U_star,residual,lambda_0"));
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first.len(), 7);
        assert_eq!(first[0], "0");
        // 17 significant digits: d.dddddddddddddddde±x
        let mantissa = first[1].trim_start_matches('-').split('e').next().unwrap();
        assert_eq!(mantissa.len(), 18);
        assert_eq!(csv.lines().count(), outcome.trace.len() + 1);
    }
}
