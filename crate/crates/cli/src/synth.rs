//! Synthetic problems with a known log-linear truth.

use anyhow::{ensure, Result};
use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution as _;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use umaxent::specializations::LatentFactorization;
use umaxent::{
    feature_expectation, log_linear_distribution, observation_marginal, FeatureTable, ObservationChannel, Weights,
};

use crate::problem::{
    default_solver, rows_of, ChannelSpec, Dims, EmpiricalSpec, FeaturesSpec, LatentSpec, ProblemFile,
};
use crate::report::Truth;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub elements: usize,
    pub observations: usize,
    pub features: usize,
    /// `lambda_true` entries are uniform in `[-lambda_range, lambda_range]`.
    pub lambda_range: f64,
    /// Feature entries are uniform in `[-feature_range, feature_range]`.
    pub feature_range: f64,
    /// Channel is `(1 - epsilon)` deterministic plus `epsilon` uniform.
    pub epsilon: f64,
    /// Sample count; `None` writes the exact observation marginal.
    pub samples: Option<u64>,
    /// `(|Y|, |Z|)`: elements form a grid and only `y` is observed. Overrides
    /// `elements`, `observations` and `epsilon`.
    pub latent: Option<(usize, usize)>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            elements: 6,
            observations: 6,
            features: 2,
            lambda_range: 1.0,
            feature_range: 1.0,
            epsilon: 0.2,
            samples: None,
            latent: None,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!((0.0..=1.0).contains(&self.epsilon), "epsilon must lie in [0, 1]");
        ensure!(self.samples != Some(0), "sample count must be at least 1");
        ensure!(self.features >= 1, "need at least one feature");
        ensure!(
            self.lambda_range >= 0.0 && self.lambda_range.is_finite(),
            "lambda range must be finite and nonnegative"
        );
        ensure!(
            self.feature_range > 0.0 && self.feature_range.is_finite(),
            "feature range must be finite and positive"
        );
        match self.latent {
            Some((ny, nz)) => ensure!(ny >= 1 && nz >= 1, "latent grid needs |Y|, |Z| >= 1"),
            None => ensure!(
                self.elements >= 1 && self.observations >= 1,
                "need at least one element and one observation"
            ),
        }
        Ok(())
    }
}

/// `(1 - epsilon) * P + epsilon * U`, with `P` sending element `x` to
/// `perm[x mod m]` for a random permutation `perm` of the observations.
pub fn noisy_channel<R: Rng>(rng: &mut R, m: usize, n: usize, epsilon: f64) -> Result<ObservationChannel> {
    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(rng);
    let mut matrix = Array2::from_elem((m, n), epsilon / m as f64);
    for x in 0..n {
        matrix[[perm[x % m], x]] += 1.0 - epsilon;
    }
    Ok(ObservationChannel::new(
        matrix,
        (0..m).map(|w| format!("w{w}")).collect(),
    )?)
}

pub fn generate(spec: &SyntheticSpec) -> Result<(ProblemFile, Truth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let (elements, channel, latent) = match spec.latent {
        Some((ny, nz)) => {
            let fact = LatentFactorization::grid(ny, nz)?;
            let latent = LatentSpec {
                y: fact.y_labels().to_vec(),
                z: fact.z_labels().to_vec(),
                components: fact.components().to_vec(),
            };
            (fact.element_names(), fact.observed_channel()?, Some(latent))
        }
        None => {
            let channel = noisy_channel(&mut rng, spec.observations, spec.elements, spec.epsilon)?;
            ((0..spec.elements).map(|x| format!("x{x}")).collect(), channel, None)
        }
    };
    let n = elements.len();
    let k = spec.features;
    let r = spec.feature_range;
    let values = Array2::from_shape_fn((k, n), |_| rng.random_range(-r..=r));
    let feature_names: Vec<String> = (0..k).map(|i| format!("phi{i}")).collect();
    let features = FeatureTable::new(values, feature_names.clone())?;

    let l = spec.lambda_range;
    let lambda_true: Vec<f64> = (0..k).map(|_| rng.random_range(-l..=l)).collect();
    let truth = log_linear_distribution(&Weights::from_vec(lambda_true.clone())?, &features)?;
    let marginal = observation_marginal(&truth, &channel)?;

    let empirical = match spec.samples {
        None => EmpiricalSpec::Exact(marginal.to_vec()),
        Some(count) => {
            let sampler = WeightedIndex::new(marginal.probs().iter().copied())?;
            let mut counts = vec![0u64; channel.num_observations()];
            for _ in 0..count {
                counts[sampler.sample(&mut rng)] += 1;
            }
            EmpiricalSpec::Counts(counts)
        }
    };

    let problem = ProblemFile {
        dims: Dims {
            elements: n,
            features: k,
            observations: Some(channel.num_observations()),
        },
        elements: elements.clone(),
        features: FeaturesSpec {
            names: feature_names.clone(),
            values: rows_of(features.values()),
        },
        channel: Some(ChannelSpec {
            observations: channel.names().to_vec(),
            matrix: rows_of(channel.matrix()),
        }),
        empirical: Some(empirical),
        prior: None,
        latent,
        classifier: None,
        solver: Some(default_solver()),
        em: None,
        seed: Some(spec.seed),
    };
    let record = Truth {
        seed: spec.seed,
        epsilon: if spec.latent.is_some() { 0.0 } else { spec.epsilon },
        samples: spec.samples,
        elements,
        feature_names,
        lambda_true,
        probabilities_true: truth.to_vec(),
        expectations_true: feature_expectation(&truth, &features)?.to_vec(),
    };
    Ok((problem, record))
}
