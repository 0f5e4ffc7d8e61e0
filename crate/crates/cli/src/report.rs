//! Output documents and the JSON writer used for every file this tool emits.
//! Reals are written with 17 significant digits so they read back exactly.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};
use umaxent::specializations::{DeterminismReport, ReductionReport};

/// Pretty JSON with `{:.16e}` reals.
#[derive(Default)]
pub struct ExactFormatter<'a> {
    pretty: PrettyFormatter<'a>,
}

impl Formatter for ExactFormatter<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn begin_array<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.pretty.begin_array(writer)
    }

    fn end_array<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.pretty.end_array(writer)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.pretty.begin_array_value(writer, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.pretty.end_array_value(writer)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.pretty.begin_object(writer)
    }

    fn end_object<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.pretty.end_object(writer)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.pretty.begin_object_key(writer, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.pretty.begin_object_value(writer)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.pretty.end_object_value(writer)
    }
}

pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, ExactFormatter::default());
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_string(value)?).with_context(|| format!("writing {}", path.display()))
}

/// Contents of `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub mode: String,
    pub converged: bool,
    pub status: String,
    pub iterations: usize,
    pub elements: Vec<String>,
    pub feature_names: Vec<String>,
    pub lambda: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// `E_lambda[phi]`.
    pub expectations: Vec<f64>,
    /// Right-hand side of the constraints at the final model.
    pub targets: Vec<f64>,
    pub residual: f64,
    pub log_likelihood: f64,
    pub seed: u64,
}

/// Contents of `truth.json`, written next to generated problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub seed: u64,
    pub epsilon: f64,
    pub samples: Option<u64>,
    pub elements: Vec<String>,
    pub feature_names: Vec<String>,
    pub lambda_true: Vec<f64>,
    pub probabilities_true: Vec<f64>,
    pub expectations_true: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reductions {
    /// Channel determinism under the true model.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub determinism: Option<DeterminismReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub standard: Option<ReductionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent: Option<ReductionReport>,
}

/// Output of `check`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub exact_marginal: bool,
    /// The channel has full column rank, so observations pin down `Pr(x)`.
    pub identifiable: bool,
    pub converged: bool,
    /// `max_k |E_fit[phi_k] - E_true[phi_k]|`.
    pub expectation_error: f64,
    /// `max_k |E_true[phi_k] - rhs_k(fit)|`: how well the truth satisfies the
    /// constraints at the fitted model.
    pub truth_constraint_gap: f64,
    pub tv_to_truth: f64,
    pub residual: f64,
    /// Constraint residual of the true weights.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_residual: Option<f64>,
    /// Decided only for exact marginals through an identifiable channel.
    pub pass: Option<bool>,
    pub tolerance: f64,
    pub reductions: Reductions,
}
