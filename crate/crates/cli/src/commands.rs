//! Subcommand bodies. Each returns the process exit code.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use clap::ValueEnum;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use umaxent::classifier::{classifier_em_solve, classifier_residual, ClassifierProblem, Correction};
use umaxent::specializations::{
    has_disjoint_supports, induced_element_distribution, is_deterministic_channel, solve_standard_maxent,
    verify_latent_reduction, verify_maxent_reduction,
};
use umaxent::{
    constraint_residual, e_step, em_solve, feature_expectation, likelihood_decomposition, log_likelihood,
    log_linear_distribution, ConvergenceReason, Distribution, EmConfig, EmObjective, EmOutcome, EmRecord, EmStatus,
    EmTrace, Error, InitMode, LogLinearModel, ObservationSource, Weights, ZeroMarginalPolicy,
};

use crate::problem::{LoadedProblem, ProblemFile};
use crate::report::{write_json, CheckReport, Reductions, SolveResult, Truth};
use crate::synth::{generate, SyntheticSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

/// Tolerance applied by `check` to exact-marginal problems.
pub const CHECK_TOLERANCE: f64 = 1e-5;

/// EM `lambda_tol` used by `check` unless `--tol` is given.
pub const CHECK_SOLVE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Mode {
    #[default]
    Umaxent,
    Standard,
    Classifier,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Umaxent => "umaxent",
            Mode::Standard => "standard",
            Mode::Classifier => "classifier",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Zero,
    Random,
    Prior,
}

#[derive(Debug, Clone, Default)]
pub struct SolveOptions {
    pub mode: Mode,
    pub init: Option<InitArg>,
    pub seed: Option<u64>,
    /// EM `lambda_tol`.
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub ablate_correction: bool,
}

pub struct SolveOutput {
    pub result: SolveResult,
    pub trace: EmTrace,
}

/// Exit code for a failure: solver non-convergence maps to 2, anything else to 1.
pub fn exit_code_for(err: &anyhow::Error) -> i32 {
    let stalled = err.chain().any(|cause| match cause.downcast_ref::<Error>() {
        Some(Error::InnerSolver { .. }) => true,
        Some(Error::MStep { source, .. }) => matches!(**source, Error::InnerSolver { .. }),
        _ => false,
    });
    if stalled {
        EXIT_NOT_CONVERGED
    } else {
        EXIT_INVALID
    }
}

fn config_for(file: &ProblemFile, opts: &SolveOptions) -> Result<(EmConfig, u64)> {
    let mut config = file.em_config();
    let seed = opts.seed.or(file.seed).unwrap_or(0);
    if let Some(tol) = opts.tol {
        config.lambda_tol = tol;
    }
    if let Some(n) = opts.max_iter {
        config.max_em_iter = n;
    }
    let random = InitMode::Random {
        seed,
        scale: file.init_scale(),
    };
    config.init = match opts.init {
        None if config.restarts > 1 => random,
        None | Some(InitArg::Zero) => InitMode::Zero,
        Some(InitArg::Random) => random,
        Some(InitArg::Prior) => InitMode::Prior(
            file.prior()?
                .context("--init prior needs a `prior` in the problem file")?,
        ),
    };
    config.validate()?;
    Ok((config, seed))
}

fn status_name(status: EmStatus) -> String {
    match status {
        EmStatus::Converged(ConvergenceReason::FixedPoint) => "converged_fixed_point",
        EmStatus::Converged(ConvergenceReason::LambdaChange) => "converged_lambda_change",
        EmStatus::Converged(ConvergenceReason::LikelihoodChange) => "converged_likelihood_change",
        EmStatus::MaxEmIterExceeded => "max_em_iter_exceeded",
    }
    .to_string()
}

fn outcome_result(
    mode: Mode,
    file: &ProblemFile,
    outcome: &EmOutcome,
    targets: Vec<f64>,
    residual: f64,
    seed: u64,
) -> Result<SolveResult> {
    let features = file.feature_table()?;
    Ok(SolveResult {
        mode: mode.name().into(),
        converged: outcome.converged(),
        status: status_name(outcome.status),
        iterations: outcome.iterations(),
        elements: file.elements.clone(),
        feature_names: features.names().to_vec(),
        lambda: outcome.weights.to_vec(),
        probabilities: outcome.distribution.to_vec(),
        expectations: feature_expectation(&outcome.distribution, &features)?.to_vec(),
        targets,
        residual,
        log_likelihood: outcome.log_likelihood(),
        seed,
    })
}

/// Solves a loaded problem in memory.
pub fn solve(loaded: &LoadedProblem, opts: &SolveOptions) -> Result<SolveOutput> {
    let file = &loaded.file;
    let (config, seed) = config_for(file, opts)?;
    ensure!(
        !opts.ablate_correction || opts.mode == Mode::Classifier,
        "--ablate-correction applies to classifier mode only"
    );
    match opts.mode {
        Mode::Umaxent => {
            let problem = file.umaxent()?;
            let outcome = em_solve(&problem, &config)?;
            let targets = e_step(&problem, &outcome.weights)?.to_vec();
            let residual = constraint_residual(&problem, &outcome.weights)?;
            let result = outcome_result(opts.mode, file, &outcome, targets, residual, seed)?;
            Ok(SolveOutput {
                result,
                trace: outcome.trace,
            })
        }
        Mode::Classifier => {
            let correction = if opts.ablate_correction {
                Correction::Ablated
            } else {
                Correction::Applied
            };
            let problem = file.classifier(&loaded.base_dir, correction)?;
            let outcome = classifier_em_solve(&problem, &config)?;
            let targets = match &problem {
                ClassifierProblem::Hard(p) => e_step(p.as_problem(), &outcome.weights)?.to_vec(),
                ClassifierProblem::Soft(p) => p.targets(&outcome.distribution, ZeroMarginalPolicy::Error)?.to_vec(),
            };
            let residual = classifier_residual(&problem, &outcome.weights)?;
            let result = outcome_result(opts.mode, file, &outcome, targets, residual, seed)?;
            Ok(SolveOutput {
                result,
                trace: outcome.trace,
            })
        }
        Mode::Standard => solve_standard(file, &config, seed),
    }
}

fn solve_standard(file: &ProblemFile, config: &EmConfig, seed: u64) -> Result<SolveOutput> {
    let problem = file.umaxent()?;
    let induced = induced_element_distribution(&problem)?;
    let features = problem.features();
    let fit = solve_standard_maxent(&induced, features, &config.inner)?;
    let model = LogLinearModel::new(fit.weights.clone(), features)?;
    let targets = feature_expectation(&induced, features)?.to_vec();
    let loglik = log_likelihood(&problem, &fit.weights)?;
    let decomposition = likelihood_decomposition(&problem, &fit.weights, &fit.weights)?;
    let residual = constraint_residual(&problem, &fit.weights)?;
    let trace = EmTrace {
        records: vec![EmRecord {
            iteration: 0,
            lambda: fit.weights.to_vec(),
            phi_hat: targets.clone(),
            log_likelihood: loglik,
            q: decomposition.q,
            h: decomposition.h,
            u_star: decomposition.u_star,
            residual,
            inner_iterations: fit.iterations,
        }],
    };
    let result = SolveResult {
        mode: Mode::Standard.name().into(),
        converged: fit.converged,
        status: format!("{:?}", fit.status).to_lowercase(),
        iterations: fit.iterations,
        elements: file.elements.clone(),
        feature_names: features.names().to_vec(),
        lambda: fit.weights.to_vec(),
        probabilities: model.distribution().to_vec(),
        expectations: feature_expectation(model.distribution(), features)?.to_vec(),
        targets,
        residual,
        log_likelihood: loglik,
        seed,
    };
    Ok(SolveOutput { result, trace })
}

pub fn write_outputs(out_dir: &Path, output: &SolveOutput) -> Result<()> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_json(&out_dir.join("result.json"), &output.result)?;
    let path = out_dir.join("trace.csv");
    fs::write(&path, output.trace.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn run_solve(problem: &Path, out_dir: &Path, opts: &SolveOptions) -> Result<i32> {
    let loaded = ProblemFile::read(problem)?;
    let output = solve(&loaded, opts)?;
    write_outputs(out_dir, &output)?;
    if output.result.converged {
        Ok(EXIT_OK)
    } else {
        eprintln!(
            "not converged after {} iterations ({}); residual {:e}",
            output.result.iterations, output.result.status, output.result.residual
        );
        Ok(EXIT_NOT_CONVERGED)
    }
}

pub fn run_generate(spec: &SyntheticSpec, out_dir: &Path) -> Result<i32> {
    let (problem, truth) = generate(spec)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_json(&out_dir.join("problem.json"), &problem)?;
    write_json(&out_dir.join("truth.json"), &truth)?;
    Ok(EXIT_OK)
}

fn read_truth(path: &Path) -> Result<Truth> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// The sidecar must name the same elements and features, and its
/// probabilities must be the log-linear model of its weights.
fn truth_matches(file: &ProblemFile, truth: &Truth) -> Result<Distribution> {
    ensure!(
        truth.elements == file.elements,
        "truth sidecar lists different elements"
    );
    let features = file.feature_table()?;
    ensure!(
        truth.feature_names == features.names(),
        "truth sidecar lists different features"
    );
    ensure!(
        truth.lambda_true.len() == features.num_features(),
        "truth sidecar has {} weights for {} features",
        truth.lambda_true.len(),
        features.num_features()
    );
    let model = log_linear_distribution(&Weights::from_vec(truth.lambda_true.clone())?, &features)?;
    let stated = Distribution::from_vec(truth.probabilities_true.clone())?;
    let gap = model.total_variation(&stated)?;
    ensure!(
        gap <= 1e-9,
        "truth probabilities do not match its weights on these features (TV {gap:e})"
    );
    Ok(model)
}

pub fn check(loaded: &LoadedProblem, truth: &Truth, opts: &SolveOptions) -> Result<CheckReport> {
    let file = &loaded.file;
    let true_model = truth_matches(file, truth)?;
    let opts = &SolveOptions {
        tol: opts.tol.or(Some(CHECK_SOLVE_TOL)),
        ..opts.clone()
    };
    let output = solve(loaded, opts)?;
    let features = file.feature_table()?;
    let fitted = Distribution::from_vec(output.result.probabilities.clone())?;
    let fit_e = feature_expectation(&fitted, &features)?;
    let true_e = feature_expectation(&true_model, &features)?;
    let expectation_error = fit_e.iter().zip(&true_e).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let truth_constraint_gap = output
        .result
        .targets
        .iter()
        .zip(&true_e)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));

    let (seed_config, seed) = config_for(file, opts)?;
    let mut reductions = Reductions {
        determinism: None,
        standard: None,
        latent: None,
    };
    let mut truth_residual = None;
    let mut exact = false;
    let mut identifiable = false;
    if file.channel.is_some() {
        let problem = file.umaxent()?;
        exact = matches!(problem.empirical().source(), ObservationSource::Exact);
        identifiable = column_rank(problem.channel().matrix()) == problem.space().len();
        let weights = Weights::from_vec(truth.lambda_true.clone())?;
        truth_residual = Some(constraint_residual(&problem, &weights)?);
        reductions.determinism = Some(is_deterministic_channel(problem.channel(), &true_model)?);
        if has_disjoint_supports(problem.channel()) {
            reductions.standard = Some(verify_maxent_reduction(&problem, &seed_config)?);
        }
        if let Some(fact) = file.factorization()? {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            reductions.latent = Some(verify_latent_reduction(
                &fact,
                problem.empirical().dist(),
                &features,
                &seed_config,
                100,
                &mut rng,
            )?);
        }
    }
    let pass = (exact && identifiable).then_some(
        output.result.converged
            && output.result.residual <= CHECK_TOLERANCE
            && expectation_error <= CHECK_TOLERANCE
            && truth_constraint_gap <= CHECK_TOLERANCE,
    );
    Ok(CheckReport {
        exact_marginal: exact,
        identifiable,
        converged: output.result.converged,
        expectation_error,
        truth_constraint_gap,
        tv_to_truth: fitted.total_variation(&true_model)?,
        residual: output.result.residual,
        truth_residual,
        pass,
        tolerance: CHECK_TOLERANCE,
        reductions,
    })
}

/// Rank by Gaussian elimination with partial pivoting.
fn column_rank(m: &ndarray::Array2<f64>) -> usize {
    let mut a = m.clone();
    let (rows, cols) = a.dim();
    let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut rank = 0;
    for col in 0..cols {
        if rank == rows {
            break;
        }
        let pivot = (rank..rows)
            .max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs()))
            .unwrap_or(rank);
        if a[[pivot, col]].abs() <= 1e-10 * scale {
            continue;
        }
        for c in 0..cols {
            a.swap([rank, c], [pivot, c]);
        }
        for r in rank + 1..rows {
            let f = a[[r, col]] / a[[rank, col]];
            for c in col..cols {
                a[[r, c]] -= f * a[[rank, c]];
            }
        }
        rank += 1;
    }
    rank
}

pub fn run_check(problem: &Path, truth: &Path, out: Option<&Path>, opts: &SolveOptions) -> Result<i32> {
    let loaded = ProblemFile::read(problem)?;
    let truth = read_truth(truth)?;
    let report = check(&loaded, &truth, opts)?;
    emit(out, "check.json", &report)?;
    Ok(if report.pass == Some(false) {
        EXIT_CHECK_FAILED
    } else {
        EXIT_OK
    })
}

#[derive(Debug, serde::Serialize)]
pub struct ReduceReport {
    /// Determinism under the uniform model.
    pub determinism: umaxent::specializations::DeterminismReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub standard: Option<umaxent::specializations::ReductionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent: Option<umaxent::specializations::ReductionReport>,
}

pub fn reduce(loaded: &LoadedProblem, checks: usize, opts: &SolveOptions) -> Result<ReduceReport> {
    let file = &loaded.file;
    let (config, seed) = config_for(file, opts)?;
    let problem = file.umaxent()?;
    let uniform = Distribution::uniform(problem.space().len())?;
    let determinism = is_deterministic_channel(problem.channel(), &uniform)?;
    let standard = if has_disjoint_supports(problem.channel()) {
        Some(verify_maxent_reduction(&problem, &config)?)
    } else {
        None
    };
    let latent = match file.factorization()? {
        Some(fact) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Some(verify_latent_reduction(
                &fact,
                problem.empirical().dist(),
                problem.features(),
                &config,
                checks,
                &mut rng,
            )?)
        }
        None => None,
    };
    if standard.is_none() && latent.is_none() {
        log::warn!("channel is neither deterministic nor latent; only the determinism report applies");
    }
    Ok(ReduceReport {
        determinism,
        standard,
        latent,
    })
}

pub fn run_reduce(problem: &Path, out: Option<&Path>, checks: usize, opts: &SolveOptions) -> Result<i32> {
    let loaded = ProblemFile::read(problem)?;
    let report = reduce(&loaded, checks, opts)?;
    emit(out, "reduce.json", &report)?;
    Ok(EXIT_OK)
}

fn emit<T: serde::Serialize>(out: Option<&Path>, name: &str, value: &T) -> Result<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            write_json(&dir.join(name), value)
        }
        None => {
            io::stdout().write_all(crate::report::to_json_string(value)?.as_bytes())?;
            Ok(())
        }
    }
}

/// Copies selected trace columns to `out` (stdout when `None`).
pub fn run_trace_plot(trace: &Path, columns: &[String], out: Option<&PathBuf>) -> Result<i32> {
    let mut reader = csv::Reader::from_path(trace).with_context(|| format!("reading {}", trace.display()))?;
    let header = reader.headers()?.clone();
    let picks: Vec<usize> = if columns.is_empty() {
        (0..header.len()).collect()
    } else {
        columns
            .iter()
            .map(|c| {
                header
                    .iter()
                    .position(|h| h == c)
                    .with_context(|| format!("trace has no column `{c}`"))
            })
            .collect::<Result<_>>()?
    };
    let sink: Box<dyn Write> = match out {
        Some(path) => Box::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?),
        None => Box::new(io::stdout()),
    };
    let mut writer = csv::Writer::from_writer(sink);
    writer.write_record(picks.iter().map(|&i| &header[i]))?;
    for record in reader.records() {
        let record = record?;
        writer.write_record(picks.iter().map(|&i| &record[i]))?;
    }
    writer.flush()?;
    Ok(EXIT_OK)
}
