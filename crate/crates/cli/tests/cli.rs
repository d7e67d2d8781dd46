use std::path::Path;
use std::process::{Command, Output};

use cwm_core::evaluation::{append_results, ResultRow};
use cwm_core::training::Condition;

fn cwm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cwm"))
        .args(args)
        .env_remove("CWM_OUTPUT_ROOT")
        .output()
        .expect("spawn cwm")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(out: Output) -> String {
    assert_eq!(
        code(&out),
        0,
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_from_data_to_figures() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let eval_dir = dir.path().join("eval");
    let results = dir.path().join("results.csv");
    let rsa = dir.path().join("rsa");
    let figs = dir.path().join("figs");

    let text = ok(cwm(&[
        "gen-data", "--bins", "1", "--episodes", "6", "--steps", "12", "--action-limit", "3.0", "-o", s(&data),
    ]));
    assert!(text.contains("6 episodes of 12 steps"), "{text}");

    ok(cwm(&[
        "train", "--condition", "ec", "--data", s(&data), "--epochs", "2", "--batch-size", "3", "-o", s(&run),
    ]));
    assert!(run.join("checkpoint").join("manifest.toml").exists());

    let text = ok(cwm(&[
        "eval",
        "--checkpoint",
        s(&run),
        "--trials",
        "3",
        "--test-episodes",
        "4",
        "--communication",
        "off",
        "--results",
        s(&results),
        "-o",
        s(&eval_dir),
    ]));
    assert!(text.contains("mean"), "{text}");
    assert!(eval_dir.join("summary_off.toml").exists());
    assert_eq!(std::fs::read_to_string(&results).unwrap().lines().count(), 2);

    let text = ok(cwm(&["analyze-rsa", "--checkpoint", s(&run), "--test-episodes", "4", "-o", s(&rsa)]));
    assert!(text.contains("mean rho"), "{text}");
    assert!(rsa.join("rsa.csv").exists() && rsa.join("traces.csv").exists());

    let text = ok(cwm(&[
        "plot",
        "--results",
        s(&results),
        "--traces",
        s(&rsa.join("traces.csv")),
        "-o",
        s(&figs),
    ]));
    assert!(text.contains(".svg"), "{text}");
    assert!(std::fs::read_dir(&figs).unwrap().count() >= 2);

    let out = cwm(&["eval", "--assert-ordering", "--results", s(&results)]);
    assert_eq!(code(&out), 3, "partial results table cannot satisfy the orderings");
}

#[test]
fn zero_epoch_training_writes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(cwm(&["gen-data", "--episodes", "3", "--steps", "6", "--action-limit", "3.0", "-o", s(&data)]));
    for condition in ["ec", "bc", "nc", "baseline"] {
        let run = dir.path().join(condition);
        ok(cwm(&[
            "train", "--condition", condition, "--data", s(&data), "--epochs", "0", "--batch-size", "2", "-o", s(&run),
        ]));
        assert!(run.join("checkpoint").join("manifest.toml").exists(), "{condition}");
    }
}

fn row(condition: Condition, bins: &str, communication: &str, mean: f64, rsa: f64) -> ResultRow {
    ResultRow {
        condition,
        bins: bins.into(),
        seed: 0,
        communication: communication.into(),
        n_trials: 100,
        mean,
        std: 0.1,
        exclusions: 0,
        rsa_a: Some(rsa),
        rsa_b: Some(rsa),
        rsa_mean: rsa,
        selection_rate_a: 0.0,
        selection_rate_b: 0.0,
    }
}

#[test]
fn assert_ordering_reports_through_the_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.csv");
    let rows = vec![
        row(Condition::Baseline, "inf", "on", 0.90, 0.7),
        row(Condition::Ec, "inf", "on", 0.88, 0.8),
        row(Condition::Bc, "inf", "on", 0.91, 0.7),
        row(Condition::Nc, "inf", "off", 0.87, 0.6),
        row(Condition::Ec, "1", "on", 0.50, 0.8),
        row(Condition::Ec, "1", "off", 0.30, 0.8),
        row(Condition::Bc, "1", "on", 0.90, 0.7),
        row(Condition::Nc, "1", "off", 0.20, 0.6),
    ];
    append_results(&good, &rows).unwrap();
    let text = ok(cwm(&["eval", "--assert-ordering", "--results", s(&good)]));
    assert_eq!(text.matches("[PASS]").count(), 4, "{text}");

    let bad = dir.path().join("bad.csv");
    let mut swapped = rows.clone();
    swapped[4].mean = 0.22;
    append_results(&bad, &swapped).unwrap();
    let out = cwm(&["eval", "--assert-ordering", "--results", s(&bad)]);
    assert_eq!(code(&out), 3);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("[FAIL] 7"), "{text}");
    assert!(text.contains("[FAIL] 8"), "{text}");
}

#[test]
fn usage_and_runtime_errors_have_distinct_exit_codes() {
    assert_eq!(code(&cwm(&["no-such-command"])), 1);
    assert_eq!(code(&cwm(&["train", "--condition", "ec"])), 1);
    assert_eq!(code(&cwm(&["gen-data", "--bins", "zero", "-o", "x"])), 1);
    assert_eq!(code(&cwm(&["--help"])), 0);

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = cwm(&["train", "--condition", "ec", "--data", s(&missing), "-o", s(&dir.path().join("run"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let data = dir.path().join("data");
    ok(cwm(&["gen-data", "--episodes", "3", "--steps", "6", "--action-limit", "3.0", "-o", s(&data)]));
    let out = cwm(&[
        "train", "--condition", "ec", "--data", s(&data), "--batch-size", "1", "-o", s(&dir.path().join("run")),
    ]);
    assert_eq!(code(&out), 2, "batch size 1 is rejected at runtime");

    let results = dir.path().join("r.csv");
    std::fs::write(&results, "").unwrap();
    assert_eq!(
        code(&cwm(&["plot", "--results", s(&results), "--format", "png", "-o", s(&dir.path().join("f"))])),
        2
    );
}

#[test]
fn run_plan_writes_resolved_plans() {
    let dir = tempfile::tempdir().unwrap();
    let scaled = dir.path().join("scaled.toml");
    let text = ok(cwm(&[
        "run-plan",
        "--scaled",
        "-o",
        s(&dir.path().join("runs")),
        "--write-plan",
        s(&scaled),
    ]));
    assert!(text.contains("plan written"));
    let body = std::fs::read_to_string(&scaled).unwrap();
    assert!(body.contains("scaled = true"), "{body}");
    assert!(body.contains("episodes = 500"), "{body}");

    let full = dir.path().join("full.toml");
    ok(cwm(&["run-plan", "--write-plan", s(&full)]));
    let body = std::fs::read_to_string(&full).unwrap();
    assert!(body.contains("episodes = 2000"), "{body}");
    assert!(body.contains("epochs = 1000"), "{body}");
    assert_eq!(code(&cwm(&["run-plan", "--plan", s(&full), "--scaled"])), 1);
}
