use std::fmt;

use thiserror::Error;

use crate::dual::SolverStatus;

/// The axis along which two inputs disagree in size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Elements,
    Features,
    Observations,
    Labels,
    Samples,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Axis::Elements => "elements",
            Axis::Features => "features",
            Axis::Observations => "observations",
            Axis::Labels => "labels",
            Axis::Samples => "samples",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch on {axis}: expected {expected}, found {found}")]
    DimensionMismatch { axis: Axis, expected: usize, found: usize },

    #[error("{what} must not be empty")]
    Empty { what: &'static str },

    #[error("duplicate identifier `{0}`")]
    DuplicateIdentifier(String),

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("negative probability {value} in {what} at index {index}")]
    NegativeProbability {
        what: &'static str,
        index: usize,
        value: f64,
    },

    #[error("{what} sums to {sum}, outside the normalization slack")]
    NotNormalized { what: &'static str, sum: f64 },

    #[error("channel entry ({row}, {column}) = {value} lies outside [0, 1]")]
    ChannelEntry { row: usize, column: usize, value: f64 },

    #[error("channel column {column} sums to {sum}, expected 1")]
    ChannelColumn { column: usize, sum: f64 },

    #[error("observation {observation} has zero marginal probability under the model")]
    ZeroMarginal { observation: usize },

    #[error("target for feature {feature} = {value} lies outside the feature range [{min}, {max}]")]
    InfeasibleTarget {
        feature: usize,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("EM iteration {iteration}: M-step failed: {source}")]
    MStep {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("EM iteration {iteration}: inner solver stopped as {status:?} with gradient norm {grad_norm:e}")]
    InnerSolver {
        iteration: usize,
        status: SolverStatus,
        grad_norm: f64,
    },

    #[error("precondition violated: {0}")]
    PreconditionViolated(String),

    #[error("label {label} has zero training prior but positive classifier output")]
    ZeroTrainingPrior { label: usize },

    #[error("corrected classifier row has zero total mass")]
    DegenerateRow,

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("failed to read {what}: {reason}")]
    Read { what: &'static str, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(axis: Axis, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { axis, expected, found })
    }
}
