use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;
use umaxent_cli::commands::{solve, SolveOptions};
use umaxent_cli::problem::ProblemFile;
use umaxent_cli::report::{to_json_string, SolveResult};
use umaxent_cli::synth::{generate, SyntheticSpec};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_umaxent"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_result(dir: &Path) -> SolveResult {
    serde_json::from_str(&fs::read_to_string(dir.join("result.json")).unwrap()).unwrap()
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Writes `problem` after applying `edit` to its JSON.
fn corrupted(dir: &Path, source: &str, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(fixture(source)).unwrap()).unwrap();
    edit(&mut v);
    let path = tempfile::Builder::new()
        .suffix(".json")
        .tempfile_in(dir)
        .unwrap()
        .into_temp_path()
        .keep()
        .unwrap();
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

#[test]
fn identity_channel_matches_standard_mode() {
    let tmp = TempDir::new().unwrap();
    let em = tmp.path().join("em");
    let std = tmp.path().join("std");
    let p = fixture("identity.json");
    let p = p.to_str().unwrap();
    assert_eq!(code(&run(&["solve", p, "--out", em.to_str().unwrap()])), 0);
    assert_eq!(
        code(&run(&[
            "solve",
            p,
            "--mode",
            "standard",
            "--out",
            std.to_str().unwrap()
        ])),
        0
    );
    let a = read_result(&em);
    let b = read_result(&std);
    assert!(tv(&a.probabilities, &b.probabilities) <= 1e-6);
    assert!(a.iterations <= 2);
}

#[test]
fn generated_noisy_problem_reaches_small_residual() {
    let tmp = TempDir::new().unwrap();
    let g = tmp.path().join("g");
    let out = run(&[
        "generate",
        "--epsilon",
        "0.2",
        "--seed",
        "11",
        "--out",
        g.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let r = tmp.path().join("r");
    let problem = g.join("problem.json");
    assert_eq!(
        code(&run(&[
            "solve",
            problem.to_str().unwrap(),
            "--out",
            r.to_str().unwrap()
        ])),
        0
    );
    assert!(read_result(&r).residual <= 1e-5);
}

#[test]
fn written_problems_solve_exactly_like_in_memory_ones() {
    let tmp = TempDir::new().unwrap();
    for (seed, samples) in [(1, None), (2, Some(500))] {
        let spec = SyntheticSpec {
            epsilon: 0.3,
            samples,
            seed,
            ..SyntheticSpec::default()
        };
        let (problem, _) = generate(&spec).unwrap();
        let path = tmp.path().join(format!("p{seed}.json"));
        fs::write(&path, to_json_string(&problem).unwrap()).unwrap();
        let loaded = ProblemFile::read(&path).unwrap();
        assert_eq!(loaded.file, problem);

        let in_memory = umaxent_cli::problem::LoadedProblem {
            file: problem,
            base_dir: tmp.path().to_path_buf(),
        };
        let opts = SolveOptions::default();
        let a = solve(&in_memory, &opts).unwrap();
        let b = solve(&loaded, &opts).unwrap();
        assert_eq!(to_json_string(&a.result).unwrap(), to_json_string(&b.result).unwrap());
        assert_eq!(a.trace.to_csv(), b.trace.to_csv());

        let out_dir = tmp.path().join(format!("out{seed}"));
        let out = run(&["solve", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
        assert_eq!(code(&out), 0);
        let from_cli = read_result(&out_dir);
        assert_eq!(from_cli, a.result);
        for (x, y) in from_cli.lambda.iter().zip(&a.result.lambda) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn fixed_seed_runs_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let p = fixture("noisy.json");
    let mut outputs = Vec::new();
    for i in 0..2 {
        let dir = tmp.path().join(format!("run{i}"));
        let out = run(&[
            "solve",
            p.to_str().unwrap(),
            "--init",
            "random",
            "--seed",
            "42",
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        outputs.push((
            fs::read(dir.join("result.json")).unwrap(),
            fs::read(dir.join("trace.csv")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn prior_init_uses_the_file_prior() {
    let tmp = TempDir::new().unwrap();
    let p = fixture("noisy.json");
    let out = run(&[
        "solve",
        p.to_str().unwrap(),
        "--init",
        "prior",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let p = fixture("identity.json");
    let out = run(&[
        "solve",
        p.to_str().unwrap(),
        "--init",
        "prior",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("prior"));
}

#[test]
fn iteration_limit_exits_with_two() {
    let tmp = TempDir::new().unwrap();
    let p = fixture("noisy.json");
    let out = run(&[
        "solve",
        p.to_str().unwrap(),
        "--max-iter",
        "1",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    let result = read_result(tmp.path());
    assert!(!result.converged);
    assert_eq!(result.status, "max_em_iter_exceeded");
}

#[test]
fn corrupted_problems_exit_with_one() {
    let tmp = TempDir::new().unwrap();
    let cases: Vec<(&str, PathBuf, &str)> = vec![
        (
            "column sum",
            corrupted(tmp.path(), "identity.json", |v| {
                v["channel"]["matrix"][0][2] = 0.5.into()
            }),
            "column 2",
        ),
        (
            "negative entry",
            corrupted(tmp.path(), "noisy.json", |v| {
                v["channel"]["matrix"][1][0] = (-0.1).into()
            }),
            "(1, 0)",
        ),
        (
            "dimension",
            corrupted(tmp.path(), "identity.json", |v| v["dims"]["elements"] = 5.into()),
            "dims",
        ),
        (
            "ragged features",
            corrupted(tmp.path(), "identity.json", |v| {
                v["features"]["values"][1] = serde_json::json!([1.0, 0.0])
            }),
            "features",
        ),
        (
            "duplicate element",
            corrupted(tmp.path(), "identity.json", |v| v["elements"][1] = "a".into()),
            "duplicate",
        ),
        (
            "unknown field",
            corrupted(tmp.path(), "identity.json", |v| v["extra"] = 1.into()),
            "unknown field",
        ),
        (
            "empirical length",
            corrupted(tmp.path(), "identity.json", |v| {
                v["empirical"] = serde_json::json!({"counts": [1, 2]})
            }),
            "observations",
        ),
        (
            "exact not normalized",
            corrupted(tmp.path(), "noisy.json", |v| {
                v["empirical"] = serde_json::json!({"exact": [0.2, 0.3, 0.6]})
            }),
            "sums to",
        ),
        (
            "bad solver config",
            corrupted(tmp.path(), "noisy.json", |v| {
                v["solver"] = serde_json::json!({"grad_tol": -1.0})
            }),
            "grad_tol",
        ),
    ];
    for (what, path, needle) in cases {
        let out = run(&[
            "solve",
            path.to_str().unwrap(),
            "--out",
            tmp.path().join("o").to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 1, "{what}: {}", stderr(&out));
        assert!(stderr(&out).contains(needle), "{what}: {}", stderr(&out));
    }

    let garbage = tmp.path().join("garbage.json");
    fs::write(&garbage, "{ not json").unwrap();
    assert_eq!(code(&run(&["solve", garbage.to_str().unwrap()])), 1);
    assert_eq!(
        code(&run(&["solve", tmp.path().join("missing.json").to_str().unwrap()])),
        1
    );
}

#[test]
fn standard_mode_rejects_noisy_channels() {
    let tmp = TempDir::new().unwrap();
    let p = fixture("noisy.json");
    let out = run(&[
        "solve",
        p.to_str().unwrap(),
        "--mode",
        "standard",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn check_reports_truth_consistency() {
    let tmp = TempDir::new().unwrap();
    let g = tmp.path().join("g");
    assert_eq!(
        code(&run(&[
            "generate",
            "--epsilon",
            "0.5",
            "--seed",
            "3",
            "--out",
            g.to_str().unwrap()
        ])),
        0
    );
    let out = run(&[
        "check",
        g.join("problem.json").to_str().unwrap(),
        "--truth",
        g.join("truth.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["pass"], Value::Bool(true));
    assert!(report["expectation_error"].as_f64().unwrap() <= 1e-5);
    assert!(report["truth_residual"].as_f64().unwrap() <= 1e-12);

    let s = tmp.path().join("s");
    let args = [
        "generate",
        "--samples",
        "10000",
        "--seed",
        "4",
        "--out",
        s.to_str().unwrap(),
    ];
    assert_eq!(code(&run(&args)), 0);
    let out = run(&[
        "check",
        s.join("problem.json").to_str().unwrap(),
        "--truth",
        s.join("truth.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["pass"], Value::Null);
    assert!(report["expectation_error"].as_f64().is_some());

    // sidecar from another problem
    let out = run(&[
        "check",
        g.join("problem.json").to_str().unwrap(),
        "--truth",
        s.join("truth.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn latent_problems_get_latent_reports() {
    let tmp = TempDir::new().unwrap();
    let g = tmp.path().join("g");
    assert_eq!(
        code(&run(&[
            "generate",
            "--latent",
            "3,2",
            "--seed",
            "1",
            "--out",
            g.to_str().unwrap()
        ])),
        0
    );
    let problem = g.join("problem.json");
    let out = run(&[
        "check",
        problem.to_str().unwrap(),
        "--truth",
        g.join("truth.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["reductions"]["latent"]["identity_error"].as_f64().unwrap() <= 1e-12);

    let out = run(&["reduce", problem.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["latent"]["reduction"], "latent");
}

#[test]
fn reduce_on_deterministic_channel() {
    let out = run(&["reduce", fixture("identity.json").to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["determinism"]["disjoint_supports"], Value::Bool(true));
    assert!(report["standard"]["tv_distance"].as_f64().unwrap() <= 1e-6);
    assert!(report["standard"]["extra_term_norm"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn classifier_modes() {
    let tmp = TempDir::new().unwrap();
    for (name, extra) in [
        ("soft.json", None),
        ("soft.json", Some("--ablate-correction")),
        ("hard.json", None),
    ] {
        let dir = tmp.path().join(format!("{name}{}", extra.is_some()));
        let p = fixture(name);
        let mut args = vec![
            "solve",
            p.to_str().unwrap(),
            "--mode",
            "classifier",
            "--out",
            dir.to_str().unwrap(),
        ];
        args.extend(extra);
        let out = run(&args);
        assert_eq!(code(&out), 0, "{name}: {}", stderr(&out));
        let r = read_result(&dir);
        assert!(r.converged);
        assert!((r.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let soft = read_result(&tmp.path().join("soft.jsonfalse"));
    let ablated = read_result(&tmp.path().join("soft.jsontrue"));
    // raw outputs average to 0.6875 cat; the correction pulls further toward the majority
    assert!((ablated.expectations[0] - 0.6875).abs() < 1e-6);
    assert!(soft.expectations[0] > ablated.expectations[0]);

    let out = run(&[
        "solve",
        fixture("identity.json").to_str().unwrap(),
        "--ablate-correction",
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn bad_batch_rows_exit_with_one() {
    let tmp = TempDir::new().unwrap();
    fs::copy(fixture("soft.json"), tmp.path().join("soft.json")).unwrap();
    fs::write(tmp.path().join("soft_batch.csv"), "cat,dog\n0.9,0.1\n0.5,0.6\n").unwrap();
    let p = tmp.path().join("soft.json");
    let out = run(&[
        "solve",
        p.to_str().unwrap(),
        "--mode",
        "classifier",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("sums to"), "{}", stderr(&out));
}

#[test]
fn trace_plot_selects_columns() {
    let tmp = TempDir::new().unwrap();
    let p = fixture("noisy.json");
    assert_eq!(
        code(&run(&[
            "solve",
            p.to_str().unwrap(),
            "--out",
            tmp.path().to_str().unwrap()
        ])),
        0
    );
    let trace = tmp.path().join("trace.csv");
    let out = run(&["trace-plot", trace.to_str().unwrap(), "--columns", "iter,loglik"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("iter,loglik"));
    assert!(lines.count() >= 2);
    let out = run(&["trace-plot", trace.to_str().unwrap(), "--columns", "nope"]);
    assert_eq!(code(&out), 1);
}
