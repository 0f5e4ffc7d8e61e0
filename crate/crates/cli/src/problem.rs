//! Problem files: JSON with explicit dimensions and row-major matrices.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use umaxent::classifier::{
    ClassifierProblem, ClassifierProfile, Correction, HardLabelProblem, LabelMap, LabelSpace, SoftClassifierBatch,
    SoftClassifierProblem,
};
use umaxent::specializations::LatentFactorization;
use umaxent::{
    Distribution, ElementSpace, EmConfig, EmpiricalObservations, FeatureTable, Method, ObservationChannel,
    SolverConfig, UMaxEntProblem, ZeroMarginalPolicy,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub elements: usize,
    pub features: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observations: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesSpec {
    pub names: Vec<String>,
    /// `features x elements`
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub observations: Vec<String>,
    /// `observations x elements`; every column sums to 1.
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EmpiricalSpec {
    Counts(Vec<u64>),
    Exact(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentSpec {
    pub y: Vec<String>,
    pub z: Vec<String>,
    /// `[y, z]` per element.
    pub components: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelMapSpec {
    /// Label index per element.
    Indices(Vec<usize>),
    /// `elements x labels` with one 1 per row.
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    pub labels: Vec<String>,
    pub label_map: LabelMapSpec,
    /// `C[true, output]` for hard labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub empirical_labels: Option<EmpiricalSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_prior: Option<Vec<f64>>,
    /// Soft outputs, relative to the problem file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicySpec {
    #[default]
    Error,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub likelihood_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_em_iter: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub restarts: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zero_marginal: Option<PolicySpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub dims: Dims,
    pub elements: Vec<String>,
    pub features: FeaturesSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<ChannelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub empirical: Option<EmpiricalSpec>,
    /// Element distribution used by the first E-step with `--init prior`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<LatentSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<ClassifierSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub em: Option<EmSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// A problem file together with the directory relative paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedProblem {
    pub file: ProblemFile,
    pub base_dir: PathBuf,
}

pub fn matrix(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        bail!("{what}: row {i} has {} entries, expected {ncols}", row.len());
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Array2::from_shape_vec((rows.len(), ncols), flat)?)
}

pub fn rows_of(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn empirical(spec: &EmpiricalSpec) -> Result<EmpiricalObservations> {
    Ok(match spec {
        EmpiricalSpec::Counts(c) => EmpiricalObservations::from_counts(c.clone())?,
        EmpiricalSpec::Exact(p) => EmpiricalObservations::exact(Distribution::from_vec(p.clone())?),
    })
}

impl ProblemFile {
    pub fn read(path: &Path) -> Result<LoadedProblem> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: ProblemFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(LoadedProblem { file, base_dir })
    }

    pub fn space(&self) -> Result<ElementSpace> {
        ensure!(
            self.elements.len() == self.dims.elements,
            "dims.elements is {} but {} element names are given",
            self.dims.elements,
            self.elements.len()
        );
        Ok(ElementSpace::new(self.elements.clone())?)
    }

    pub fn feature_table(&self) -> Result<FeatureTable> {
        let values = matrix(&self.features.values, "features")?;
        ensure!(
            values.dim() == (self.dims.features, self.dims.elements),
            "features are {:?}, dims say {} x {}",
            values.dim(),
            self.dims.features,
            self.dims.elements
        );
        Ok(FeatureTable::new(values, self.features.names.clone())?)
    }

    pub fn channel(&self) -> Result<ObservationChannel> {
        let spec = self.channel.as_ref().context("problem has no channel")?;
        let m = matrix(&spec.matrix, "channel")?;
        if let Some(obs) = self.dims.observations {
            ensure!(
                m.nrows() == obs,
                "channel has {} rows, dims.observations is {obs}",
                m.nrows()
            );
        }
        ensure!(
            m.ncols() == self.dims.elements,
            "channel has {} columns, dims.elements is {}",
            m.ncols(),
            self.dims.elements
        );
        Ok(ObservationChannel::new(m, spec.observations.clone())?)
    }

    pub fn umaxent(&self) -> Result<UMaxEntProblem> {
        let emp = empirical(
            self.empirical
                .as_ref()
                .context("problem has no empirical observations")?,
        )?;
        Ok(UMaxEntProblem::new(
            self.space()?,
            self.feature_table()?,
            self.channel()?,
            emp,
        )?)
    }

    pub fn prior(&self) -> Result<Option<Distribution>> {
        self.prior
            .as_ref()
            .map(|p| {
                ensure!(p.len() == self.dims.elements, "prior has {} entries", p.len());
                Ok(Distribution::from_vec(p.clone())?)
            })
            .transpose()
    }

    pub fn factorization(&self) -> Result<Option<LatentFactorization>> {
        self.latent
            .as_ref()
            .map(|l| {
                ensure!(
                    l.components.len() == self.dims.elements,
                    "latent block lists {} components for {} elements",
                    l.components.len(),
                    self.dims.elements
                );
                Ok(LatentFactorization::new(
                    l.y.clone(),
                    l.z.clone(),
                    l.components.clone(),
                )?)
            })
            .transpose()
    }

    pub fn classifier(&self, base_dir: &Path, correction: Correction) -> Result<ClassifierProblem> {
        let spec = self.classifier.as_ref().context("problem has no classifier block")?;
        let labels = LabelSpace::new(spec.labels.clone())?;
        let map = match &spec.label_map {
            LabelMapSpec::Indices(ix) => LabelMap::new(ix.clone(), labels.clone())?,
            LabelMapSpec::Matrix(m) => LabelMap::from_matrix(&matrix(m, "label_map")?, labels.clone())?,
        };
        ensure!(
            map.num_elements() == self.dims.elements,
            "label map covers {} elements, dims.elements is {}",
            map.num_elements(),
            self.dims.elements
        );
        let features = self.feature_table()?;
        if let Some(csv_path) = &spec.batch_csv {
            let prior = spec
                .training_prior
                .as_ref()
                .context("soft classifier batches need a training_prior")?;
            let prior = Distribution::from_vec(prior.clone())?;
            let path = base_dir.join(csv_path);
            let reader = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            let mut batch = SoftClassifierBatch::read_csv(reader, &labels, prior)?;
            if let Some(w) = &spec.sample_weights {
                batch = batch.with_weights(Array1::from(w.clone()))?;
            }
            Ok(ClassifierProblem::Soft(SoftClassifierProblem::new(
                features, map, batch, correction,
            )?))
        } else {
            let confusion = spec
                .confusion
                .as_ref()
                .context("hard-label classifiers need a confusion matrix")?;
            let profile = ClassifierProfile::new(matrix(confusion, "confusion")?)?;
            let emp = spec
                .empirical_labels
                .as_ref()
                .context("hard-label classifiers need empirical_labels")?;
            Ok(ClassifierProblem::Hard(HardLabelProblem::new(
                features,
                map,
                profile,
                empirical(emp)?,
            )?))
        }
    }

    /// Solver and EM settings from the file, before command-line overrides.
    pub fn em_config(&self) -> EmConfig {
        let mut config = EmConfig {
            inner: self.solver.unwrap_or_default(),
            ..EmConfig::default()
        };
        if let Some(em) = &self.em {
            if let Some(v) = em.lambda_tol {
                config.lambda_tol = v;
            }
            if let Some(v) = em.likelihood_tol {
                config.likelihood_tol = v;
            }
            if let Some(v) = em.max_em_iter {
                config.max_em_iter = v;
            }
            if let Some(v) = em.restarts {
                config.restarts = v;
            }
            if let Some(p) = em.zero_marginal {
                config.zero_marginal = match p {
                    PolicySpec::Error => ZeroMarginalPolicy::Error,
                    PolicySpec::Skip => ZeroMarginalPolicy::Skip,
                };
            }
        }
        config
    }

    pub fn init_scale(&self) -> f64 {
        self.em.as_ref().and_then(|e| e.init_scale).unwrap_or(0.1)
    }
}

/// Default solver settings written into generated files.
pub fn default_solver() -> SolverConfig {
    SolverConfig {
        method: Method::Lbfgs { memory: 10 },
        ..SolverConfig::default()
    }
}
