use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use umaxent_cli::commands::{
    exit_code_for, run_check, run_generate, run_reduce, run_solve, run_trace_plot, InitArg, Mode, SolveOptions,
};
use umaxent_cli::synth::SyntheticSpec;

/// Uncertain maximum-entropy experiments.
#[derive(Parser)]
#[command(name = "umaxent", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SolveArgs {
    /// Problem JSON.
    problem: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Umaxent)]
    mode: Mode,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    /// Seed for random initialization and restarts; overrides the file's.
    #[arg(long)]
    seed: Option<u64>,
    /// EM convergence tolerance on the change in lambda.
    #[arg(long)]
    tol: Option<f64>,
    /// Maximum EM iterations.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Feed raw classifier outputs without the training-prior correction.
    #[arg(long)]
    ablate_correction: bool,
}

impl SolveArgs {
    fn options(&self) -> SolveOptions {
        SolveOptions {
            mode: self.mode,
            init: self.init,
            seed: self.seed,
            tol: self.tol,
            max_iter: self.max_iter,
            ablate_correction: self.ablate_correction,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic problem and its truth sidecar.
    Generate {
        #[arg(long, default_value_t = 6)]
        elements: usize,
        #[arg(long, default_value_t = 6)]
        observations: usize,
        #[arg(long, default_value_t = 2)]
        features: usize,
        /// Channel noise: 0 is deterministic, 1 is uninformative.
        #[arg(long, default_value_t = 0.2)]
        epsilon: f64,
        /// Draw this many observations instead of writing the exact marginal.
        #[arg(long)]
        samples: Option<u64>,
        #[arg(long, default_value_t = 1.0)]
        lambda_range: f64,
        #[arg(long, default_value_t = 1.0)]
        feature_range: f64,
        /// Latent grid `NY,NZ`: elements are (y, z) pairs and only y is observed.
        #[arg(long, value_parser = parse_pair)]
        latent: Option<(usize, usize)>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Fit a problem; writes result.json and trace.csv.
    Solve {
        #[command(flatten)]
        args: SolveArgs,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Fit a generated problem and compare with its truth sidecar.
    Check {
        #[command(flatten)]
        args: SolveArgs,
        #[arg(long)]
        truth: PathBuf,
        /// Directory for check.json; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the deterministic and latent reduction checks.
    Reduce {
        #[command(flatten)]
        args: SolveArgs,
        /// Random models for the latent identity check.
        #[arg(long, default_value_t = 100)]
        checks: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Copy columns of a trace CSV for plotting.
    TracePlot {
        trace: PathBuf,
        /// Comma-separated column names; all columns when omitted.
        #[arg(long, value_delimiter = ',')]
        columns: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected NY,NZ")?;
    let a = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b = b.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((a, b))
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Generate {
            elements,
            observations,
            features,
            epsilon,
            samples,
            lambda_range,
            feature_range,
            latent,
            seed,
            out,
        } => {
            let spec = SyntheticSpec {
                elements,
                observations,
                features,
                lambda_range,
                feature_range,
                epsilon,
                samples,
                latent,
                seed,
            };
            run_generate(&spec, &out)
        }
        Command::Solve { args, out } => run_solve(&args.problem, &out, &args.options()),
        Command::Check { args, truth, out } => run_check(&args.problem, &truth, out.as_deref(), &args.options()),
        Command::Reduce { args, checks, out } => run_reduce(&args.problem, out.as_deref(), checks, &args.options()),
        Command::TracePlot { trace, columns, out } => run_trace_plot(&trace, &columns, out.as_ref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = match run(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code_for(&err)
        }
    };
    ExitCode::from(code as u8)
}
