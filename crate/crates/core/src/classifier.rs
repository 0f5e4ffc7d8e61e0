//! Constraints from black-box classifiers.
//!
//! A classifier maps raw samples to labels `xi`, each element `x` carrying
//! exactly one label `d(x)`. Hard outputs enter through a confusion matrix,
//! which lifts to an observation channel `Pr(xi_out | x) = C[d(x), xi_out]`.
//! Soft outputs `Pr_theta(xi | r)` are first corrected for the label prior
//! the classifier was trained under: the training prior is divided out, the
//! model's label marginal multiplied in, and the row renormalized.

use std::io::Read;

use log::warn;
use ndarray::{Array1, Array2};

use crate::dual::TargetExpectations;
use crate::em::{
    evidence_decomposition, evidence_log_likelihood, evidence_targets, run_em, ChannelEvidence, Decomposition,
    DenseEvidence, EmConfig, EmObjective, EmOutcome, UMaxEntProblem, ZeroMarginalPolicy,
};
use crate::error::{check_len, Axis, Error, Result};
use crate::model::{
    Distribution, ElementSpace, EmpiricalObservations, FeatureTable, LogLinearModel, ObservationChannel, Weights,
    NORMALIZATION_SLACK,
};
use crate::specializations::LatentFactorization;

/// Row-sum tolerance for classifier outputs before renormalization.
pub const BATCH_ROW_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    labels: Vec<String>,
}

impl LabelSpace {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        // same rules as an element space
        ElementSpace::new(labels.clone())?;
        Ok(Self { labels })
    }

    pub fn indexed(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| format!("xi{i}")).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.labels
    }
}

/// The deterministic label function `d(x, xi)`.
///
/// Only the case of one label per element is supported. A row-stochastic
/// `Pr(xi | x)` would slot in here by replacing `assignment` with a matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    assignment: Vec<usize>,
    labels: LabelSpace,
}

impl LabelMap {
    pub fn new(assignment: Vec<usize>, labels: LabelSpace) -> Result<Self> {
        if assignment.is_empty() {
            return Err(Error::Empty { what: "label map" });
        }
        if let Some((x, &l)) = assignment.iter().enumerate().find(|(_, &l)| l >= labels.len()) {
            return Err(Error::Invalid {
                what: "label map",
                reason: format!("element {x} maps to label {l}, but there are {} labels", labels.len()),
            });
        }
        Ok(Self { assignment, labels })
    }

    /// From a binary `|X| x |Xi|` matrix with exactly one 1 per row.
    pub fn from_matrix(matrix: &Array2<f64>, labels: LabelSpace) -> Result<Self> {
        check_len(Axis::Labels, labels.len(), matrix.ncols())?;
        let mut assignment = Vec::with_capacity(matrix.nrows());
        for (x, row) in matrix.rows().into_iter().enumerate() {
            if row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Invalid {
                    what: "label map",
                    reason: format!("row {x} has a non-binary entry"),
                });
            }
            let ones: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == 1.0)
                .map(|(l, _)| l)
                .collect();
            if ones.len() != 1 {
                return Err(Error::Invalid {
                    what: "label map",
                    reason: format!("row {x} has {} ones, expected exactly one", ones.len()),
                });
            }
            assignment.push(ones[0]);
        }
        Self::new(assignment, labels)
    }

    /// Identity map for `Xi = X`.
    pub fn identity(n: usize) -> Result<Self> {
        Self::new((0..n).collect(), LabelSpace::indexed(n)?)
    }

    pub fn num_elements(&self) -> usize {
        self.assignment.len()
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &LabelSpace {
        &self.labels
    }

    pub fn label_of(&self, x: usize) -> usize {
        self.assignment[x]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn to_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.num_elements(), self.num_labels()));
        for (x, &l) in self.assignment.iter().enumerate() {
            m[[x, l]] = 1.0;
        }
        m
    }

    /// `Pr(xi) = sum_x d(x, xi) Pr(x)`.
    pub fn label_marginal(&self, model: &Distribution) -> Result<Distribution> {
        check_len(Axis::Elements, self.num_elements(), model.len())?;
        let mut mass = Array1::zeros(self.num_labels());
        for (x, &l) in self.assignment.iter().enumerate() {
            mass[l] += model.get(x);
        }
        Distribution::from_unnormalized(mass)
    }

    /// Labels as the observed part of a latent factorization; the hidden
    /// part indexes elements within their label.
    pub fn factorization(&self) -> Result<LatentFactorization> {
        let mut counts = vec![0usize; self.num_labels()];
        let components: Vec<(usize, usize)> = self
            .assignment
            .iter()
            .map(|&l| {
                counts[l] += 1;
                (l, counts[l] - 1)
            })
            .collect();
        let nz = counts.iter().copied().max().unwrap_or(1).max(1);
        LatentFactorization::new(
            self.labels.names().to_vec(),
            (0..nz).map(|z| format!("z{z}")).collect(),
            components,
        )
    }
}

/// Held-out performance of a hard classifier as a row-stochastic confusion
/// matrix `C[true_label, output_label]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierProfile {
    confusion: Array2<f64>,
}

impl ClassifierProfile {
    pub fn new(confusion: Array2<f64>) -> Result<Self> {
        let (rows, cols) = confusion.dim();
        if rows == 0 {
            return Err(Error::Empty {
                what: "confusion matrix",
            });
        }
        check_len(Axis::Labels, rows, cols)?;
        let mut confusion = confusion;
        for (row_index, mut row) in confusion.rows_mut().into_iter().enumerate() {
            for (column, &value) in row.iter().enumerate() {
                if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                    return Err(Error::Invalid {
                        what: "confusion matrix",
                        reason: format!("entry ({row_index}, {column}) = {value} lies outside [0, 1]"),
                    });
                }
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > NORMALIZATION_SLACK {
                return Err(Error::Invalid {
                    what: "confusion matrix",
                    reason: format!("row {row_index} sums to {sum}"),
                });
            }
            row /= sum;
        }
        Ok(Self { confusion })
    }

    pub fn perfect(n: usize) -> Result<Self> {
        Self::new(Array2::eye(n))
    }

    /// Correct with probability `accuracy`, errors spread evenly.
    pub fn symmetric(n: usize, accuracy: f64) -> Result<Self> {
        if n < 2 {
            return Self::perfect(n);
        }
        let off = (1.0 - accuracy) / (n - 1) as f64;
        let mut m = Array2::from_elem((n, n), off);
        m.diag_mut().fill(accuracy);
        Self::new(m)
    }

    pub fn confusion(&self) -> &Array2<f64> {
        &self.confusion
    }

    /// `Pr(xi_out | x) = C[d(x), xi_out]` as an observation channel over labels.
    pub fn channel(&self, map: &LabelMap) -> Result<ObservationChannel> {
        check_len(Axis::Labels, self.confusion.nrows(), map.num_labels())?;
        let mut matrix = Array2::zeros((map.num_labels(), map.num_elements()));
        for x in 0..map.num_elements() {
            matrix.column_mut(x).assign(&self.confusion.row(map.label_of(x)));
        }
        ObservationChannel::new(matrix, map.labels().names().to_vec())
    }
}

/// Soft classifier outputs for a batch of raw samples, plus the label prior
/// of the classifier's training set.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftClassifierBatch {
    rows: Array2<f64>,
    training_prior: Distribution,
    sample_weights: Option<Array1<f64>>,
}

impl SoftClassifierBatch {
    /// Rows must be nonnegative and sum to 1 within [`BATCH_ROW_SLACK`];
    /// they are renormalized. The training prior must be strictly positive.
    pub fn new(rows: Array2<f64>, training_prior: Distribution) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::Empty {
                what: "classifier batch",
            });
        }
        check_len(Axis::Labels, training_prior.len(), rows.ncols())?;
        if let Some(label) = training_prior.probs().iter().position(|&p| p <= 0.0) {
            return Err(Error::ZeroTrainingPrior { label });
        }
        let mut rows = rows;
        for mut row in rows.rows_mut() {
            let dist = Distribution::with_slack(row.to_owned(), BATCH_ROW_SLACK, "classifier batch row")?;
            row.assign(dist.probs());
        }
        Ok(Self {
            rows,
            training_prior,
            sample_weights: None,
        })
    }

    /// Per-sample weights for `Pr~(r)`; defaults to uniform.
    pub fn with_weights(mut self, weights: Array1<f64>) -> Result<Self> {
        check_len(Axis::Samples, self.rows.nrows(), weights.len())?;
        let normalized = Distribution::from_unnormalized(weights)?;
        self.sample_weights = Some(normalized.probs().clone());
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn num_labels(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn training_prior(&self) -> &Distribution {
        &self.training_prior
    }

    /// `Pr~(r)` for one sample.
    pub fn weight(&self, sample: usize) -> f64 {
        match &self.sample_weights {
            Some(w) => w[sample],
            None => 1.0 / self.rows.nrows() as f64,
        }
    }

    /// Reads rows from CSV: a header naming the labels in order, then one
    /// row of label probabilities per sample.
    pub fn read_csv<R: Read>(reader: R, labels: &LabelSpace, training_prior: Distribution) -> Result<Self> {
        let read_err = |e: csv::Error| Error::Read {
            what: "classifier batch CSV",
            reason: e.to_string(),
        };
        let mut csv = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header: Vec<String> = csv.headers().map_err(read_err)?.iter().map(str::to_string).collect();
        if header != labels.names() {
            return Err(Error::Invalid {
                what: "classifier batch CSV",
                reason: format!("header {header:?} does not match labels {:?}", labels.names()),
            });
        }
        let mut flat = Vec::new();
        let mut n = 0;
        for record in csv.records() {
            let record = record.map_err(read_err)?;
            check_len(Axis::Labels, labels.len(), record.len())?;
            for field in record.iter() {
                let v: f64 = field.parse().map_err(|_| Error::Invalid {
                    what: "classifier batch CSV",
                    reason: format!("row {n}: `{field}` is not a number"),
                })?;
                flat.push(v);
            }
            n += 1;
        }
        let rows = Array2::from_shape_vec((n, labels.len()), flat).map_err(|e| Error::Invalid {
            what: "classifier batch CSV",
            reason: e.to_string(),
        })?;
        Self::new(rows, training_prior)
    }

    /// Writes the rows in the format [`read_csv`](Self::read_csv) accepts.
    pub fn write_csv<W: std::io::Write>(&self, labels: &LabelSpace, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", labels.names().join(","))?;
        for row in self.rows.rows() {
            let fields: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

/// `out(xi) ∝ row(xi) * model_prior(xi) / training_prior(xi)`.
pub fn soft_correction(
    batch_row: &Distribution,
    training_prior: &Distribution,
    model_prior: &Distribution,
) -> Result<Distribution> {
    check_len(Axis::Labels, batch_row.len(), training_prior.len())?;
    check_len(Axis::Labels, batch_row.len(), model_prior.len())?;
    corrected_row(batch_row.probs().view(), training_prior, model_prior)
}

fn corrected_row(
    row: ndarray::ArrayView1<'_, f64>,
    training_prior: &Distribution,
    model_prior: &Distribution,
) -> Result<Distribution> {
    let mut out = Array1::zeros(row.len());
    for (label, &p) in row.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        let t = training_prior.get(label);
        if t <= 0.0 {
            return Err(Error::ZeroTrainingPrior { label });
        }
        out[label] = p * model_prior.get(label) / t;
    }
    if out.sum() <= 0.0 {
        return Err(Error::DegenerateRow);
    }
    Distribution::from_unnormalized(out)
}

/// Whether soft rows get the training-prior correction. `Ablated` feeds the
/// raw classifier outputs straight into the constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Correction {
    #[default]
    Applied,
    Ablated,
}

/// E-step for hard labels: the confusion channel delegated to the general E-step.
pub fn hard_label_e_step(
    empirical_xi: &Distribution,
    profile: &ClassifierProfile,
    map: &LabelMap,
    current: &Weights,
    features: &FeatureTable,
) -> Result<TargetExpectations> {
    check_len(Axis::Elements, map.num_elements(), features.num_elements())?;
    let channel = profile.channel(map)?;
    check_len(Axis::Labels, channel.num_observations(), empirical_xi.len())?;
    let model = LogLinearModel::new(current.clone(), features)?;
    let evidence = ChannelEvidence {
        channel: &channel,
        empirical: empirical_xi,
    };
    evidence_targets(&evidence, model.distribution(), features, ZeroMarginalPolicy::Error)
}

/// E-step for soft outputs: corrected rows with the current label marginal.
pub fn soft_e_step(
    batch: &SoftClassifierBatch,
    map: &LabelMap,
    current: &Weights,
    features: &FeatureTable,
) -> Result<TargetExpectations> {
    let model = LogLinearModel::new(current.clone(), features)?;
    soft_e_step_for_model(
        batch,
        map,
        model.distribution(),
        features,
        Correction::Applied,
        ZeroMarginalPolicy::Error,
    )
}

/// `sum_r Pr~(r) sum_xi out(xi | r) sum_x Pr(x | xi) phi(x)` with
/// `Pr(x | xi) = d(x, xi) Pr(x) / Pr(xi)` under `model`.
pub fn soft_e_step_for_model(
    batch: &SoftClassifierBatch,
    map: &LabelMap,
    model: &Distribution,
    features: &FeatureTable,
    correction: Correction,
    policy: ZeroMarginalPolicy,
) -> Result<TargetExpectations> {
    check_len(Axis::Labels, map.num_labels(), batch.num_labels())?;
    check_len(Axis::Elements, map.num_elements(), features.num_elements())?;
    check_len(Axis::Elements, map.num_elements(), model.len())?;
    let label_prior = map.label_marginal(model)?;

    // E[phi | xi] under the model, None for labels the model cannot produce
    let k = features.num_features();
    let conditional: Vec<Option<Array1<f64>>> = (0..map.num_labels())
        .map(|label| {
            let mass = label_prior.get(label);
            (mass > 0.0).then(|| {
                let mut acc = Array1::zeros(k);
                for x in (0..map.num_elements()).filter(|&x| map.label_of(x) == label) {
                    acc.scaled_add(model.get(x) / mass, &features.element(x));
                }
                acc
            })
        })
        .collect();

    let mut total = Array1::<f64>::zeros(k);
    let mut used = 0.0;
    let mut skipped = 0usize;
    'rows: for (r, row) in batch.rows().rows().into_iter().enumerate() {
        let weight = batch.weight(r);
        if weight <= 0.0 {
            continue;
        }
        let corrected;
        let label_probs = match correction {
            Correction::Applied => match corrected_row(row, batch.training_prior(), &label_prior) {
                Ok(d) => {
                    corrected = d;
                    corrected.probs().view()
                }
                Err(Error::DegenerateRow) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            },
            Correction::Ablated => row,
        };
        let mut contribution = Array1::<f64>::zeros(k);
        for (label, &p) in label_probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            match &conditional[label] {
                Some(c) => contribution.scaled_add(p, c),
                None => match policy {
                    ZeroMarginalPolicy::Error => return Err(Error::ZeroMarginal { observation: label }),
                    ZeroMarginalPolicy::Skip => {
                        skipped += 1;
                        continue 'rows;
                    }
                },
            }
        }
        total.scaled_add(weight, &contribution);
        used += weight;
    }
    if skipped > 0 {
        warn!(
            "soft E-step skipped {skipped} of {} rows with no mass under the model",
            batch.len()
        );
    }
    if used <= 0.0 {
        return Err(Error::DegenerateRow);
    }
    TargetExpectations::new(total / used, features)
}

/// Hard-label problem: label frequencies observed through a confusion channel.
#[derive(Debug, Clone)]
pub struct HardLabelProblem {
    map: LabelMap,
    profile: ClassifierProfile,
    problem: UMaxEntProblem,
}

impl HardLabelProblem {
    pub fn new(
        features: FeatureTable,
        map: LabelMap,
        profile: ClassifierProfile,
        empirical_labels: EmpiricalObservations,
    ) -> Result<Self> {
        check_len(Axis::Elements, map.num_elements(), features.num_elements())?;
        let channel = profile.channel(&map)?;
        let problem = UMaxEntProblem::new(
            ElementSpace::indexed(map.num_elements())?,
            features,
            channel,
            empirical_labels,
        )?;
        Ok(Self { map, profile, problem })
    }

    pub fn map(&self) -> &LabelMap {
        &self.map
    }

    pub fn profile(&self) -> &ClassifierProfile {
        &self.profile
    }

    /// The equivalent uncertain problem over the confusion channel.
    pub fn as_problem(&self) -> &UMaxEntProblem {
        &self.problem
    }
}

/// Soft-output problem. As an EM objective its data likelihood is
/// `sum_r Pr~(r) log sum_x Pr_theta(d(x) | r) / Pr_theta(d(x)) Pr(x)`, which
/// is `log Pr(r)` up to a constant when `Pr_theta(r | xi)` is the true
/// observation model.
#[derive(Debug, Clone)]
pub struct SoftClassifierProblem {
    features: FeatureTable,
    map: LabelMap,
    batch: SoftClassifierBatch,
    correction: Correction,
    evidence: DenseEvidence,
}

impl SoftClassifierProblem {
    pub fn new(
        features: FeatureTable,
        map: LabelMap,
        batch: SoftClassifierBatch,
        correction: Correction,
    ) -> Result<Self> {
        check_len(Axis::Elements, map.num_elements(), features.num_elements())?;
        check_len(Axis::Labels, map.num_labels(), batch.num_labels())?;
        let n = map.num_elements();
        let mut likelihoods = Array2::zeros((batch.len(), n));
        let mut weights = Array1::zeros(batch.len());
        let mut dropped = 0usize;
        for (r, row) in batch.rows().rows().into_iter().enumerate() {
            let mut lik = likelihoods.row_mut(r);
            for x in 0..n {
                let label = map.label_of(x);
                lik[x] = row[label] / batch.training_prior().get(label);
            }
            if lik.iter().any(|&v| v > 0.0) {
                weights[r] = batch.weight(r);
            } else {
                dropped += 1;
            }
        }
        if dropped == batch.len() {
            return Err(Error::DegenerateRow);
        }
        if dropped > 0 {
            warn!("{dropped} classifier rows only support labels with no elements; dropped");
        }
        let evidence = DenseEvidence { weights, likelihoods };
        Ok(Self {
            features,
            map,
            batch,
            correction,
            evidence,
        })
    }

    pub fn map(&self) -> &LabelMap {
        &self.map
    }

    pub fn batch(&self) -> &SoftClassifierBatch {
        &self.batch
    }

    pub fn correction(&self) -> Correction {
        self.correction
    }

    /// Per-sample likelihood rows `Pr_theta(d(x) | r) / Pr_theta(d(x))`.
    pub fn evidence(&self) -> &DenseEvidence {
        &self.evidence
    }
}

impl EmObjective for SoftClassifierProblem {
    fn features(&self) -> &FeatureTable {
        &self.features
    }

    fn targets(&self, model: &Distribution, policy: ZeroMarginalPolicy) -> Result<TargetExpectations> {
        soft_e_step_for_model(&self.batch, &self.map, model, &self.features, self.correction, policy)
    }

    fn log_likelihood(&self, log_probs: &Array1<f64>) -> f64 {
        let total: f64 = self.evidence.weights.sum();
        evidence_log_likelihood(&self.evidence, log_probs) / total
    }

    fn decomposition(
        &self,
        prev: &Distribution,
        current: &LogLinearModel,
        policy: ZeroMarginalPolicy,
    ) -> Result<Decomposition> {
        evidence_decomposition(&self.evidence, prev, current, &self.features, policy)
    }
}

#[derive(Debug, Clone)]
pub enum ClassifierProblem {
    Hard(HardLabelProblem),
    Soft(SoftClassifierProblem),
}

/// EM with the classifier E-step in place of the channel E-step.
pub fn classifier_em_solve(problem: &ClassifierProblem, config: &EmConfig) -> Result<EmOutcome> {
    match problem {
        ClassifierProblem::Hard(p) => run_em(p.as_problem(), config),
        ClassifierProblem::Soft(p) => run_em(p, config),
    }
}

/// Constraint residual of a classifier problem at `weights`.
pub fn classifier_residual(problem: &ClassifierProblem, weights: &Weights) -> Result<f64> {
    match problem {
        ClassifierProblem::Hard(p) => crate::em::constraint_residual(p.as_problem(), weights),
        ClassifierProblem::Soft(p) => {
            let model = LogLinearModel::new(weights.clone(), &p.features)?;
            p.residual(model.distribution(), ZeroMarginalPolicy::Error)
        }
    }
}

/// Empirical label distribution of the rows' argmax labels (ties to the
/// lowest index); the hard-label view of a soft batch.
pub fn argmax_label_counts(batch: &SoftClassifierBatch) -> Vec<u64> {
    let mut counts = vec![0u64; batch.num_labels()];
    for row in batch.rows().rows() {
        let best = row.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
        );
        counts[best.0] += 1;
    }
    counts
}
