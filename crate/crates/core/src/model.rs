//! Problem data types and the pure probability computations over them:
//! partition function, log-linear distribution, observation marginals,
//! posteriors and feature expectations.
//!
//! Matrices are stored dense. Features are `K x |X|` (one row per feature),
//! channels are `|Omega| x |X|` with column `x` holding `Pr(. | x)`.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView1, Axis as NdAxis};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Axis, Error, Result};

/// Largest deviation of a total from 1 that constructors silently renormalize.
pub const NORMALIZATION_SLACK: f64 = 1e-9;

/// Normalization tolerance every constructed [`Distribution`] satisfies.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-12;

/// Numerically stable `log(sum(exp(v)))`. Returns `-inf` for an empty or
/// all `-inf` input.
pub fn log_sum_exp<I>(values: I) -> f64
where
    I: IntoIterator<Item = f64>,
    I::IntoIter: Clone,
{
    let iter = values.into_iter();
    let max = iter.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = iter.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

fn check_unique(names: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(names.len());
    for name in names {
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateIdentifier(name.clone()));
        }
    }
    Ok(())
}

fn indexed_names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// The finite, ordered set of hidden model elements.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ElementSpace {
    elements: Vec<String>,
}

impl ElementSpace {
    pub fn new(elements: Vec<String>) -> Result<Self> {
        if elements.is_empty() {
            return Err(Error::Empty { what: "element space" });
        }
        check_unique(&elements)?;
        Ok(Self { elements })
    }

    /// Elements named `x0 .. x{n-1}`.
    pub fn indexed(n: usize) -> Result<Self> {
        Self::new(indexed_names("x", n))
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.elements
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.elements.iter().position(|e| e == name)
    }
}

/// Real-valued features `phi_k(x)`, stored as a `K x |X|` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    values: Array2<f64>,
    names: Vec<String>,
}

impl FeatureTable {
    pub fn new(values: Array2<f64>, names: Vec<String>) -> Result<Self> {
        let (k, n) = values.dim();
        if k == 0 {
            return Err(Error::Empty { what: "feature table" });
        }
        if n == 0 {
            return Err(Error::Empty {
                what: "feature table columns",
            });
        }
        check_len(Axis::Features, k, names.len())?;
        check_unique(&names)?;
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "feature table",
                index,
            });
        }
        Ok(Self { values, names })
    }

    /// Builds a table from row vectors (one per feature), naming them `phi_k`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty { what: "feature table" });
        }
        let n = rows[0].len();
        for row in rows {
            check_len(Axis::Elements, n, row.len())?;
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((rows.len(), n), flat).map_err(|e| Error::Invalid {
            what: "feature table",
            reason: e.to_string(),
        })?;
        Self::new(values, indexed_names("phi_", rows.len()))
    }

    pub fn num_features(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_elements(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// The feature vector `phi(x)` of one element.
    pub fn element(&self, x: usize) -> ArrayView1<'_, f64> {
        self.values.column(x)
    }

    /// `(min_x phi_k(x), max_x phi_k(x))`.
    pub fn bounds(&self, k: usize) -> (f64, f64) {
        self.values
            .row(k)
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Log-potentials `sum_k lambda_k phi_k(x)` for every element.
    pub fn scores(&self, weights: &Weights) -> Result<Array1<f64>> {
        check_len(Axis::Features, self.num_features(), weights.len())?;
        Ok(weights.values().dot(&self.values))
    }
}

/// Lagrange multipliers `lambda`, one per feature.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Weights(Array1<f64>);

impl Weights {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "weights", index });
        }
        Ok(Self(values))
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        Self::new(Array1::from(values))
    }

    pub fn zeros(k: usize) -> Self {
        Self(Array1::zeros(k))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.to_vec()
    }

    /// Sup-norm distance to another weight vector of the same length.
    pub fn sup_distance(&self, other: &Weights) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A probability vector over an index set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Distribution {
    probs: Array1<f64>,
}

impl Distribution {
    /// Accepts nonnegative finite entries summing to 1 within
    /// [`NORMALIZATION_SLACK`] and renormalizes them.
    pub fn new(probs: Array1<f64>) -> Result<Self> {
        Self::with_slack(probs, NORMALIZATION_SLACK, "distribution")
    }

    pub fn from_vec(probs: Vec<f64>) -> Result<Self> {
        Self::new(Array1::from(probs))
    }

    pub(crate) fn with_slack(probs: Array1<f64>, slack: f64, what: &'static str) -> Result<Self> {
        let sum = validate_nonnegative(&probs, what)?;
        if (sum - 1.0).abs() > slack {
            return Err(Error::NotNormalized { what, sum });
        }
        Ok(Self { probs: probs / sum })
    }

    /// Normalizes arbitrary nonnegative finite weights with a positive total.
    pub fn from_unnormalized(weights: Array1<f64>) -> Result<Self> {
        let sum = validate_nonnegative(&weights, "weights")?;
        if sum <= 0.0 || !sum.is_finite() {
            return Err(Error::NotNormalized { what: "weights", sum });
        }
        Ok(Self { probs: weights / sum })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty { what: "distribution" });
        }
        Ok(Self {
            probs: Array1::from_elem(n, 1.0 / n as f64),
        })
    }

    pub fn point_mass(n: usize, at: usize) -> Result<Self> {
        if at >= n {
            return Err(Error::DimensionMismatch {
                axis: Axis::Elements,
                expected: n,
                found: at + 1,
            });
        }
        let mut probs = Array1::zeros(n);
        probs[at] = 1.0;
        Ok(Self { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &Array1<f64> {
        &self.probs
    }

    pub fn get(&self, i: usize) -> f64 {
        self.probs[i]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.probs.to_vec()
    }

    /// Shannon entropy in nats, with `0 log 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    /// Total-variation distance `0.5 * sum |p - q|`.
    pub fn total_variation(&self, other: &Distribution) -> Result<f64> {
        check_len(Axis::Elements, self.len(), other.len())?;
        Ok(0.5
            * self
                .probs
                .iter()
                .zip(other.probs.iter())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>())
    }
}

fn validate_nonnegative(values: &Array1<f64>, what: &'static str) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty { what });
    }
    for (index, &value) in values.iter().enumerate() {
        if !value.is_finite() {
            return Err(Error::NonFinite { what, index });
        }
        if value < 0.0 {
            return Err(Error::NegativeProbability { what, index, value });
        }
    }
    Ok(values.sum())
}

/// The static observation function `Pr(omega | x)` as an `|Omega| x |X|`
/// column-stochastic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationChannel {
    matrix: Array2<f64>,
    names: Vec<String>,
}

impl ObservationChannel {
    pub fn new(matrix: Array2<f64>, names: Vec<String>) -> Result<Self> {
        let (rows, cols) = matrix.dim();
        if rows == 0 || cols == 0 {
            return Err(Error::Empty {
                what: "observation channel",
            });
        }
        check_len(Axis::Observations, rows, names.len())?;
        check_unique(&names)?;
        for ((row, column), &value) in matrix.indexed_iter() {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(Error::ChannelEntry { row, column, value });
            }
        }
        let mut matrix = matrix;
        for (column, mut col) in matrix.axis_iter_mut(NdAxis(1)).enumerate() {
            let sum = col.sum();
            if (sum - 1.0).abs() > NORMALIZATION_SLACK {
                return Err(Error::ChannelColumn { column, sum });
            }
            col /= sum;
        }
        Ok(Self { matrix, names })
    }

    /// Builds a channel from row vectors, naming observations `w0 ..`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty {
                what: "observation channel",
            });
        }
        let n = rows[0].len();
        for row in rows {
            check_len(Axis::Elements, n, row.len())?;
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let matrix = Array2::from_shape_vec((rows.len(), n), flat).map_err(|e| Error::Invalid {
            what: "observation channel",
            reason: e.to_string(),
        })?;
        Self::new(matrix, indexed_names("w", rows.len()))
    }

    /// `Pr(omega | x) = [omega == x]`.
    pub fn identity(n: usize) -> Result<Self> {
        Self::new(Array2::eye(n), indexed_names("w", n))
    }

    /// `Pr(omega | x) = 1 / |Omega|` for every pair.
    pub fn uniform(observations: usize, elements: usize) -> Result<Self> {
        Self::new(
            Array2::from_elem((observations, elements), 1.0 / observations as f64),
            indexed_names("w", observations),
        )
    }

    pub fn num_observations(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn num_elements(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn likelihood(&self, observation: usize, element: usize) -> f64 {
        self.matrix[[observation, element]]
    }

    /// `Pr(omega | .)` for one observation.
    pub fn row(&self, observation: usize) -> ArrayView1<'_, f64> {
        self.matrix.row(observation)
    }
}

/// How the empirical observation distribution was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationSource {
    Counts(Vec<u64>),
    Exact,
}

/// The empirical distribution `Pr~(omega)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalObservations {
    dist: Distribution,
    source: ObservationSource,
}

impl EmpiricalObservations {
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Empty {
                what: "observation counts",
            });
        }
        let probs: Array1<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
        let dist = Distribution::from_unnormalized(probs)?;
        Ok(Self {
            dist,
            source: ObservationSource::Counts(counts),
        })
    }

    pub fn exact(dist: Distribution) -> Self {
        Self {
            dist,
            source: ObservationSource::Exact,
        }
    }

    pub fn dist(&self) -> &Distribution {
        &self.dist
    }

    pub fn source(&self) -> &ObservationSource {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.dist.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dist.is_empty()
    }
}

/// `log Z(lambda) = log sum_x exp(sum_k lambda_k phi_k(x))`.
pub fn log_partition(weights: &Weights, features: &FeatureTable) -> Result<f64> {
    let scores = features.scores(weights)?;
    Ok(log_sum_exp(scores.iter().copied()))
}

/// A log-linear model evaluated once: weights, `log Z`, log-probabilities
/// and probabilities.
#[derive(Debug, Clone)]
pub struct LogLinearModel {
    weights: Weights,
    log_partition: f64,
    log_probs: Array1<f64>,
    dist: Distribution,
}

impl LogLinearModel {
    pub fn new(weights: Weights, features: &FeatureTable) -> Result<Self> {
        let scores = features.scores(&weights)?;
        let log_partition = log_sum_exp(scores.iter().copied());
        let log_probs = scores.mapv(|s| s - log_partition);
        let probs = log_probs.mapv(f64::exp);
        // exp of normalized log-probs sums to 1 up to a few ulps
        let dist = Distribution::from_unnormalized(probs)?;
        Ok(Self {
            weights,
            log_partition,
            log_probs,
            dist,
        })
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn log_partition(&self) -> f64 {
        self.log_partition
    }

    pub fn log_probs(&self) -> &Array1<f64> {
        &self.log_probs
    }

    pub fn distribution(&self) -> &Distribution {
        &self.dist
    }

    pub fn into_distribution(self) -> Distribution {
        self.dist
    }
}

/// `Pr(x) = exp(sum_k lambda_k phi_k(x)) / Z(lambda)`.
pub fn log_linear_distribution(weights: &Weights, features: &FeatureTable) -> Result<Distribution> {
    Ok(LogLinearModel::new(weights.clone(), features)?.into_distribution())
}

/// `Pr(omega) = sum_x Pr(omega | x) Pr(x)`.
pub fn observation_marginal(model: &Distribution, channel: &ObservationChannel) -> Result<Distribution> {
    check_len(Axis::Elements, channel.num_elements(), model.len())?;
    let marginal = channel.matrix().dot(model.probs());
    Distribution::with_slack(marginal, 1e-9, "observation marginal")
}

/// Bayes posterior `Pr(x | omega)` for one observation. Errors with
/// [`Error::ZeroMarginal`] when the observation is impossible under the model.
pub fn posterior(model: &Distribution, channel: &ObservationChannel, observation: usize) -> Result<Distribution> {
    check_len(Axis::Elements, channel.num_elements(), model.len())?;
    if observation >= channel.num_observations() {
        return Err(Error::DimensionMismatch {
            axis: Axis::Observations,
            expected: channel.num_observations(),
            found: observation + 1,
        });
    }
    bayes_posterior(channel.row(observation), model.probs()).ok_or(Error::ZeroMarginal { observation })
}

/// `likelihood * prior`, normalized. `None` when the product has no mass.
pub(crate) fn bayes_posterior(likelihood: ArrayView1<'_, f64>, prior: &Array1<f64>) -> Option<Distribution> {
    let joint = &likelihood * prior;
    let max = joint.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return None;
    }
    let shifted = joint / max;
    let total = shifted.sum();
    Some(Distribution { probs: shifted / total })
}

/// `E[phi_k] = sum_x Pr(x) phi_k(x)` for every feature.
pub fn feature_expectation(dist: &Distribution, features: &FeatureTable) -> Result<Array1<f64>> {
    check_len(Axis::Elements, features.num_elements(), dist.len())?;
    Ok(features.values().dot(dist.probs()))
}
