use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tweedie-dglm"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().unwrap()
}

fn ok(args: &[&str], cwd: &Path) {
    let out = run(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn error_json(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {text}"))
}

/// Small spatial data set with `sites` locations via `simulate`.
fn simulate(dir: &Path, pattern: &str) {
    let cfg = format!(
        "seed = 11\n[simulate]\nn = 200\nsites = 6\ncovariates = 3\noverlap = 0.0\npattern = \"{pattern}\"\nreplications = 1\n"
    );
    fs::write(dir.join("sim.toml"), cfg).unwrap();
    ok(&["simulate", "--config", "sim.toml", "--out", "sim"], dir);
}

const SHORT: [&str; 6] = ["--iters", "240", "--burnin", "100", "--thin", "2"];

fn fit(dir: &Path, model: &str, out: &str, extra: &[&str]) {
    let mut args = vec!["fit", "--model", model, "--data", "sim/rep_000/data.csv", "--out", out];
    if model == "M3" || model == "M4" {
        args.extend(["--coords", "sim/rep_000/coords.csv"]);
    }
    args.extend(SHORT);
    args.extend(extra);
    ok(&args, dir);
}

#[test]
fn simulate_writes_data_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "gp");
    let rep = dir.path().join("sim/rep_000");
    for f in ["data.csv", "coords.csv", "truth.json"] {
        assert!(rep.join(f).exists(), "{f}");
    }
    let data = fs::read_to_string(rep.join("data.csv")).unwrap();
    assert!(data.starts_with("# tweedie-dglm config_hash="));
    assert_eq!(data.lines().count(), 202);
    let truth: serde_json::Value = serde_json::from_str(&fs::read_to_string(rep.join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth["w"].as_array().unwrap().len(), 6);
}

#[test]
fn fit_then_summarize_reproduces_summary() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "gp");
    fit(dir.path(), "M4", "fit", &["--chains", "2"]);
    let fitdir = dir.path().join("fit");
    for f in ["draws.csv", "summary.csv", "selection.csv", "meta.json"] {
        assert!(fitdir.join(f).exists(), "{f}");
    }
    let before = fs::read(fitdir.join("summary.csv")).unwrap();
    fs::remove_file(fitdir.join("summary.csv")).unwrap();
    ok(&["summarize", "--out", "fit"], dir.path());
    assert_eq!(fs::read(fitdir.join("summary.csv")).unwrap(), before);

    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(fitdir.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["model"], "M4");
    assert_eq!(meta["dropped_intercept"], "intercept");
    assert_eq!(meta["chains"].as_array().unwrap().len(), 2);
    assert!(meta["aic"].as_f64().unwrap().is_finite());
    // 70 kept draws per chain.
    let draws = fs::read_to_string(fitdir.join("draws.csv")).unwrap();
    assert_eq!(draws.lines().count(), 2 + 140);
}

#[test]
fn select_against_truth_and_predict() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "none");
    fit(dir.path(), "M2", "fit", &[]);
    ok(
        &["select", "--out", "fit", "--truth", "sim/rep_000/truth.json", "--fdr-alpha", "0.1"],
        dir.path(),
    );
    let sel = fs::read_to_string(dir.path().join("fit/selection.csv")).unwrap();
    assert!(sel.lines().nth(1).unwrap().starts_with("block,coefficient,p_value,selected,kappa,c,alpha"));
    assert_eq!(sel.lines().count(), 2 + 8);
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("fit/selection_metrics.json")).unwrap()).unwrap();
    for k in ["fpr", "tpr", "overlap"] {
        let v = m[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{k}={v}");
    }

    ok(&["predict", "--out", "fit", "--data", "sim/rep_000/data.csv"], dir.path());
    let p: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("fit/prediction.json")).unwrap()).unwrap();
    assert!(p["sqrt_deviance"].as_f64().unwrap() > 0.0);
    let preds = fs::read_to_string(dir.path().join("fit/predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 2 + 200);
}

#[test]
fn reruns_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "gp");
    fit(dir.path(), "M3", "a", &["--seed", "9"]);
    fit(dir.path(), "M3", "b", &["--seed", "9"]);
    fit(dir.path(), "M3", "c", &["--seed", "10"]);
    let read = |d: &str| fs::read(dir.path().join(d).join("draws.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    let sum = |d: &str| fs::read(dir.path().join(d).join("summary.csv")).unwrap();
    assert_eq!(sum("a"), sum("b"));
}

#[test]
fn predict_rejects_unfitted_location() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "gp");
    fit(dir.path(), "M3", "fit", &[]);
    let data = fs::read_to_string(dir.path().join("sim/rep_000/data.csv")).unwrap();
    let mut lines: Vec<String> = data.lines().map(String::from).collect();
    let last = lines.len() - 1;
    let cells: Vec<&str> = lines[last].split(',').collect();
    let mut changed: Vec<String> = cells.iter().map(|s| s.to_string()).collect();
    changed[2] = "elsewhere".into();
    lines[last] = changed.join(",");
    fs::write(dir.path().join("new.csv"), lines.join("\n")).unwrap();
    let e = error_json(&run(&["predict", "--out", "fit", "--data", "new.csv"], dir.path()));
    assert_eq!(e["error"]["kind"], "input");
    let msg = e["error"]["message"].as_str().unwrap();
    assert!(msg.contains("elsewhere") && msg.contains("row 200"), "{msg}");
}

#[test]
fn missing_exposure_is_a_json_input_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("d.csv"), "y,location_id,x_a,z_b\n0,a,1,1\n").unwrap();
    let e = error_json(&run(&["fit", "--model", "M1", "--data", "d.csv", "--out", "o"], dir.path()));
    assert_eq!(e["error"]["kind"], "input");
    assert!(e["error"]["message"].as_str().unwrap().contains("exposure"));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn spatial_fit_needs_coords() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "gp");
    let e = error_json(&run(
        &["fit", "--model", "M4", "--data", "sim/rep_000/data.csv", "--out", "o"],
        dir.path(),
    ));
    assert!(e["error"]["message"].as_str().unwrap().contains("--coords"));
}

#[test]
fn bad_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[mcmc]\nitres = 5\n").unwrap();
    let e = error_json(&run(&["fit", "--config", "c.toml", "--out", "o"], dir.path()));
    assert_eq!(e["error"]["kind"], "input");
    assert!(e["error"]["message"].as_str().unwrap().contains("itres"));
}

#[test]
fn unknown_command_prints_usage() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
}
