use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cace_core::data::{write_dataset, Schema};
use cace_core::simulation::{generate_trial, Scenario};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cace-ipw"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_trial(dir: &Path, scenario: &Scenario, seed: u64) -> PathBuf {
    let trial = generate_trial(scenario, seed).unwrap();
    let path = dir.join("trial.csv");
    let schema = Schema::new("cluster", "treat", "receipt", "y");
    write_dataset(&trial.observed, &schema, &[], File::create(&path).unwrap()).unwrap();
    path
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

const FULL_MODEL: &str = r#"
[input]
path = "trial.csv"

[model]
wls = ["x1", "x2"]
logit_t = ["x1", "x2"]
logit_c = ["x1", "x2"]
"#;

#[test]
fn minimal_itt_run_emits_one_row() {
    let dir = TempDir::new().unwrap();
    let mut csv = String::from("cluster,treat,receipt,y\n");
    for (c, t, ys) in [
        ("a", 1, [1.0, 2.0]),
        ("b", 1, [2.0, 4.0]),
        ("c", 0, [0.0, 1.0]),
        ("d", 0, [1.0, 1.5]),
    ] {
        for (i, y) in ys.iter().enumerate() {
            csv.push_str(&format!("{c},{t},{},{y}\n", i % 2));
        }
    }
    fs::write(dir.path().join("trial.csv"), csv).unwrap();
    let cfg = write_config(
        dir.path(),
        "[input]\npath = \"trial.csv\"\n[model]\nestimators = [\"itt\"]\n",
    );
    let out = dir.path().join("out");
    let o = run(&[
        "estimate",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = fs::read_to_string(out.join("results.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 1);
    let rec: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(rec["estimator"], "itt");
    assert!(rec["se_adjusted"].is_null());
    // Cluster means are 1.5, 3 against 0.5, 1.25.
    assert!((rec["point"].as_f64().unwrap() - 1.375).abs() < 1e-12);
}

#[test]
fn ipw_without_control_covariates_fails_before_computation() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "[input]\npath = \"missing.csv\"\n[model]\nestimators = [\"cace_tc_ipw\"]\nlogit_t = [\"x1\"]\n",
    );
    let out = dir.path().join("out");
    let o = run(&[
        "estimate",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("config stage"), "{}", stderr(&o));
    assert!(stderr(&o).contains("logit_c"));
    assert!(!out.exists());
}

#[test]
fn full_six_estimator_run() {
    let dir = TempDir::new().unwrap();
    let input = write_trial(dir.path(), &Scenario::new(40, 0.7, 0.5, 0.10, 0.05), 11);
    let before = fs::read(&input).unwrap();
    let cfg = write_config(dir.path(), FULL_MODEL);
    let out = dir.path().join("out");
    let o = run(&[
        "estimate",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&input).unwrap(), before, "input must not change");

    let records: Vec<serde_json::Value> = fs::read_to_string(out.join("results.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let estimates: Vec<&serde_json::Value> = records
        .iter()
        .filter(|r| r["record"] == "estimate")
        .collect();
    assert_eq!(estimates.len(), 6);
    for r in &estimates {
        assert!(r["se_unadjusted"].as_f64().unwrap() > 0.0);
        if r["estimator"] == "itt" {
            assert!(r["se_adjusted"].is_null());
        } else {
            assert!(r["se_adjusted"].as_f64().unwrap() > 0.0, "{r}");
        }
        assert!(r["ci_low"].as_f64().unwrap() < r["ci_high"].as_f64().unwrap());
    }
    assert!(records.iter().any(|r| r["record"] == "strata_shares"));
    assert!(records.iter().any(|r| r["record"] == "strata_effects"));

    let table = fs::read_to_string(out.join("results.txt")).unwrap();
    let itt_line = table.lines().find(|l| l.starts_with("ITT")).unwrap();
    assert!(itt_line.contains("NA"));
    assert_eq!(stdout(&o), table);

    let o = run(&[
        "estimate",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out),
        "--se",
        "unadjusted",
    ]);
    assert!(o.status.success());
    let first: serde_json::Value = serde_json::from_str(
        fs::read_to_string(out.join("results.jsonl"))
            .unwrap()
            .lines()
            .nth(1)
            .unwrap(),
    )
    .unwrap();
    assert!(first.get("se_adjusted").is_none());
    assert_eq!(first["se_basis"], "unadjusted");
}

#[test]
fn missing_column_names_load_stage() {
    let dir = TempDir::new().unwrap();
    write_trial(dir.path(), &Scenario::new(20, 0.7, 0.5, 0.10, 0.05), 3);
    let cfg = write_config(
        dir.path(),
        "[input]\npath = \"trial.csv\"\n[model]\nestimators = [\"itt\"]\nwls = [\"x9\"]\n",
    );
    let o = run(&[
        "estimate",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("load stage"), "{}", stderr(&o));
    assert!(stderr(&o).contains("x9"));
}

const SMALL_SIM: &str = r#"
[simulate]
replications = 2
seed = 99
truth_population = 20000

[scenario]
name = "tiny"
m = 20
rbar_t = 0.7
rbar_c = 0.5
covariate_strength_t = 0.10
covariate_strength_c = 0.05
"#;

#[test]
fn simulate_is_deterministic_across_runs_and_threads() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL_SIM);
    let outs: Vec<PathBuf> = ["1", "1", "3"]
        .iter()
        .enumerate()
        .map(|(i, threads)| {
            let out = dir.path().join(format!("out{i}"));
            let o = run(&[
                "simulate",
                "--config",
                path_str(&cfg),
                "--out",
                path_str(&out),
                "--threads",
                threads,
            ]);
            assert!(o.status.success(), "{}", stderr(&o));
            out
        })
        .collect();
    for name in ["metrics.csv", "metrics.txt", "study.json"] {
        let a = fs::read(outs[0].join(name)).unwrap();
        assert_eq!(
            a,
            fs::read(outs[1].join(name)).unwrap(),
            "{name} differs between runs"
        );
        assert_eq!(
            a,
            fs::read(outs[2].join(name)).unwrap(),
            "{name} differs across thread counts"
        );
    }
    let study: serde_json::Value =
        serde_json::from_slice(&fs::read(outs[0].join("study.json")).unwrap()).unwrap();
    assert_eq!(study["scenario"]["name"], "tiny");
    assert_eq!(study["table"]["failures"], 0);
    assert!(study["truths"]["tau_cace_t"].as_f64().is_some());

    let o = run(&[
        "simulate",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&dir.path().join("other")),
        "--seed",
        "100",
    ]);
    assert!(o.status.success());
    assert_ne!(
        fs::read(outs[0].join("metrics.csv")).unwrap(),
        fs::read(dir.path().join("other/metrics.csv")).unwrap()
    );
}

#[test]
fn explained_variance_too_large_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL_SIM}r_squared = 1.2\n"));
    let o = run(&[
        "simulate",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("explained variance too large"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn diagnose_requires_a_logit_covariate_list() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "[input]\npath = \"trial.csv\"\n");
    let o = run(&[
        "diagnose",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("receipt-model covariate"),
        "{}",
        stderr(&o)
    );
}

fn diagnostics(dir: &Path, logit: &str) -> serde_json::Value {
    let cfg = write_config(
        dir,
        &format!("[input]\npath = \"trial.csv\"\n[model]\nlogit_t = {logit}\nlogit_c = {logit}\n"),
    );
    let out = dir.join("diag");
    let o = run(&[
        "diagnose",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "balance_t_vs_weighted_c.csv",
        "balance_c_vs_weighted_t.csv",
        "density_treatment.csv",
        "density_control.csv",
        "diagnostics.txt",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    serde_json::from_slice(&fs::read(out.join("diagnostics.json")).unwrap()).unwrap()
}

fn any_flag(bundle: &serde_json::Value) -> bool {
    bundle["balance"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|t| t["rows"].as_array().unwrap())
        .any(|r| r["flag_025"].as_bool().unwrap())
}

#[test]
fn diagnose_correct_specification_is_balanced() {
    let dir = TempDir::new().unwrap();
    write_trial(dir.path(), &Scenario::new(80, 0.7, 0.5, 0.10, 0.05), 5);
    let bundle = diagnostics(dir.path(), r#"["x1", "x2"]"#);
    assert!(!any_flag(&bundle), "{bundle}");
    let mw = &bundle["mean_weights"];
    assert!(mw["diff"].as_f64().unwrap().abs() < 0.03, "{mw}");
}

#[test]
fn diagnose_omitted_strong_covariate_is_flagged() {
    // Receipt depends steeply on x1 + x2, so dropping x2 leaves the
    // reweighted sample visibly off in x2.
    let mut flagged = 0;
    for seed in 0..5 {
        let dir = TempDir::new().unwrap();
        write_trial(
            dir.path(),
            &Scenario::new(80, 0.6, 0.4, 0.30, 0.30),
            100 + seed,
        );
        let cfg = write_config(
            dir.path(),
            "[input]\npath = \"trial.csv\"\n[model]\nwls = [\"x2\"]\nlogit_t = [\"x1\"]\nlogit_c = [\"x1\"]\n",
        );
        let out = dir.path().join("diag");
        let o = run(&[
            "diagnose",
            "--config",
            path_str(&cfg),
            "--out",
            path_str(&out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let bundle: serde_json::Value =
            serde_json::from_slice(&fs::read(out.join("diagnostics.json")).unwrap()).unwrap();
        flagged += usize::from(any_flag(&bundle));
    }
    assert!(flagged >= 4, "flagged in {flagged} of 5");
}
