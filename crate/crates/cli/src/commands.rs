use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cace_core::data::{self, load_dataset, Dataset};
use cace_core::diagnostics::{
    balance_table, mean_weight_equality, overlap_summary, shaikh_density_check, BalanceDirection,
    BalanceTable, DensityCheck, MeanWeightEquality, OverlapSummary,
};
use cace_core::estimators::{decompose_strata_effects, Analysis, EstimateResult, StrataEffects};
use cace_core::logit::{predict_dataset, Arm};
use cace_core::simulation::{run_study, MetricsTable, StudyResult};
use cace_core::weights::{EstimandKind, StrataShares};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{RunConfig, SeMode};
use crate::CliError;

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new("io", format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_error(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn load(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let schema = cfg.schema()?;
    let input = cfg
        .input
        .as_ref()
        .expect("schema() checked the input section");
    let path = cfg.resolve(&input.path);
    let file =
        File::open(&path).map_err(|e| CliError::new("load", format!("{}: {e}", path.display())))?;
    let d = load_dataset(file, &schema).map_err(|e| CliError::new("load", e.to_string()))?;
    for w in data::validate(&d).warnings {
        log::warn!("{w}");
    }
    Ok(d)
}

/// Files written by a command, in write order.
#[derive(Debug, Clone, Default)]
pub struct Outputs {
    pub files: Vec<PathBuf>,
    /// Human-readable summary also printed to stdout.
    pub summary: String,
}

#[derive(Debug, Clone)]
pub struct EstimateRun {
    pub results: Vec<EstimateResult>,
    pub shares: Option<StrataShares>,
    pub strata: Option<StrataEffects>,
}

/// Fits every requested estimator. Stops at the first failure.
pub fn run_estimates(cfg: &RunConfig, d: &Dataset) -> Result<EstimateRun, CliError> {
    let est_cfg = cfg.estimator_config();
    let floor = est_cfg.share_floor;
    let analysis = Analysis::new(d, est_cfg);
    let mut results = Vec::new();
    for kind in cfg.estimators() {
        let r = analysis
            .estimate(kind)
            .map_err(|e| CliError::new(e.stage(), format!("{}: {e}", kind.key())))?;
        results.push(r);
    }
    let shares = if cfg.model.logit_t.is_empty() || cfg.model.logit_c.is_empty() {
        None
    } else {
        Some(
            analysis
                .strata_shares()
                .map_err(|e| CliError::new(e.stage(), format!("strata shares: {e}")))?,
        )
    };
    let strata = shares
        .as_ref()
        .and_then(|s| decompose_strata_effects(&results, s, floor));
    Ok(EstimateRun {
        results,
        shares,
        strata,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.3}"))
}

/// Aligned results table: estimator, point, the selected SE columns, df,
/// confidence interval and p-value.
pub fn results_table(results: &[EstimateResult], se: SeMode) -> String {
    let mut out = String::new();
    let mut header = format!("{:<16} {:>9}", "Estimator", "Estimate");
    if se.shows_adjusted() {
        let _ = write!(header, " {:>11}", "SE (adj)");
    }
    if se.shows_unadjusted() {
        let _ = write!(header, " {:>11}", "SE (unadj)");
    }
    let _ = write!(header, " {:>7} {:>19} {:>8}", "df", "CI", "p");
    let _ = writeln!(out, "{header}");
    let _ = writeln!(out, "{}", "-".repeat(header.len()));
    for r in results {
        let inf = primary_inference(r, se);
        let _ = write!(out, "{:<16} {:>9.3}", r.kind.label(), r.point);
        if se.shows_adjusted() {
            let _ = write!(out, " {:>11}", fmt_opt(r.se_adjusted));
        }
        if se.shows_unadjusted() {
            let _ = write!(out, " {:>11.3}", r.se_unadjusted);
        }
        let ci = format!("[{:.3}, {:.3}]", inf.ci_low, inf.ci_high);
        let _ = writeln!(out, " {:>7} {:>19} {:>8.4}", r.df, ci, inf.p_value);
    }
    out
}

struct Primary {
    se: f64,
    basis: &'static str,
    t_stat: f64,
    p_value: f64,
    ci_low: f64,
    ci_high: f64,
}

/// Inference from the unadjusted SE when only that column is requested,
/// otherwise from the result's own primary SE.
fn primary_inference(r: &EstimateResult, se: SeMode) -> Primary {
    match (&r.adjusted, se) {
        (Some(a), SeMode::Adjusted | SeMode::Both) => Primary {
            se: r.se_adjusted.unwrap_or(r.se_unadjusted),
            basis: "adjusted",
            t_stat: a.t_stat,
            p_value: a.p_value,
            ci_low: a.ci_low,
            ci_high: a.ci_high,
        },
        _ => Primary {
            se: r.se_unadjusted,
            basis: "unadjusted",
            t_stat: r.unadjusted.t_stat,
            p_value: r.unadjusted.p_value,
            ci_low: r.unadjusted.ci_low,
            ci_high: r.unadjusted.ci_high,
        },
    }
}

fn result_record(r: &EstimateResult, se: SeMode) -> Value {
    let p = primary_inference(r, se);
    let mut v = json!({
        "record": "estimate",
        "estimator": r.kind.key(),
        "label": r.kind.label(),
        "point": r.point,
    });
    let m = v.as_object_mut().expect("object literal");
    if se.shows_adjusted() {
        m.insert("se_adjusted".into(), json!(r.se_adjusted));
    }
    if se.shows_unadjusted() {
        m.insert("se_unadjusted".into(), json!(r.se_unadjusted));
    }
    m.insert("se_basis".into(), json!(p.basis));
    m.insert("se".into(), json!(p.se));
    m.insert("df".into(), json!(r.df));
    m.insert("level".into(), json!(r.level));
    m.insert("ci_low".into(), json!(p.ci_low));
    m.insert("ci_high".into(), json!(p.ci_high));
    m.insert("t_stat".into(), json!(p.t_stat));
    m.insert("p_value".into(), json!(p.p_value));
    m.insert("shares".into(), json!(r.shares));
    m.insert("n_clusters".into(), json!(r.n_clusters));
    m.insert("n_rows".into(), json!(r.n_rows));
    m.insert("warnings".into(), json!(r.warnings));
    v
}

fn shares_text(s: &StrataShares) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Stratum shares");
    let _ = writeln!(out, "  pi_cace_t            {:.3}", s.pi_cace_t);
    let _ = writeln!(out, "  pi_cace_tc (from T)  {:.3}", s.pi_cace_tc_from_t);
    let _ = writeln!(out, "  pi_cace_tc (from C)  {:.3}", s.pi_cace_tc_from_c);
    let _ = writeln!(
        out,
        "  pi_11 {:.3}  pi_10 {:.3}  pi_01 {:.3}  pi_00 {:.3}",
        s.pi_11, s.pi_10, s.pi_01, s.pi_00
    );
    for w in &s.warnings {
        let _ = writeln!(out, "  warning: {w}");
    }
    out
}

fn strata_text(e: &StrataEffects) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Stratum effects");
    let _ = writeln!(
        out,
        "  tau_11 {:.3}  tau_10 {}  tau_01 {}  tau_00 {}",
        e.tau_11,
        fmt_opt(e.tau_10),
        fmt_opt(e.tau_01),
        fmt_opt(e.tau_00)
    );
    if !e.non_identifiable.is_empty() {
        let _ = writeln!(out, "  not identifiable: {}", e.non_identifiable.join(", "));
    }
    out
}

pub fn estimate(cfg: &RunConfig) -> Result<Outputs, CliError> {
    cfg.validate_estimate()?;
    let d = load(cfg)?;
    let run = run_estimates(cfg, &d)?;
    let se = cfg.variance.se;
    let dir = cfg.output_dir();
    prepare_dir(&dir)?;

    let mut summary = results_table(&run.results, se);
    if let Some(s) = &run.shares {
        summary.push('\n');
        summary.push_str(&shares_text(s));
    }
    if let Some(e) = &run.strata {
        summary.push('\n');
        summary.push_str(&strata_text(e));
    }
    let table_path = dir.join("results.txt");
    write_text(&table_path, &summary)?;

    let jsonl_path = dir.join("results.jsonl");
    let mut w = create(&jsonl_path)?;
    let mut line = |v: Value| writeln!(w, "{v}").map_err(|e| io_error(&jsonl_path, e));
    for r in &run.results {
        line(result_record(r, se))?;
    }
    if let Some(s) = &run.shares {
        line(json!({ "record": "strata_shares", "shares": s }))?;
    }
    if let Some(e) = &run.strata {
        line(json!({ "record": "strata_effects", "effects": e }))?;
    }
    drop(line);
    w.flush().map_err(|e| io_error(&jsonl_path, e))?;
    Ok(Outputs {
        files: vec![table_path, jsonl_path],
        summary,
    })
}

/// Fixed-width text: truth, mean estimate, true SE, mean SEs and coverage.
pub fn metrics_text(t: &MetricsTable) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Scenario {} ({} replications, {} failed)",
        t.scenario, t.replications, t.failures
    );
    let header = format!(
        "{:<16} {:>7} {:>7} {:>8} {:>15} {:>9} {:>9}",
        "Estimator", "True", "Mean", "True SE", "Mean SE (a/u)", "Coverage", "Cov (u)"
    );
    let _ = writeln!(out, "{header}");
    let _ = writeln!(out, "{}", "-".repeat(header.len()));
    for r in &t.rows {
        let se = format!("{:.3} / {:.3}", r.mean_se_adjusted, r.mean_se_unadjusted);
        let _ = writeln!(
            out,
            "{:<16} {:>7.3} {:>7.3} {:>8.3} {:>15} {:>9.3} {:>9.3}",
            r.estimator.label(),
            r.true_effect,
            r.mean_estimate,
            r.true_se,
            se,
            r.coverage,
            r.coverage_unadjusted
        );
    }
    out
}

#[derive(Serialize)]
struct StudyRecord<'a> {
    master_seed: u64,
    replications: usize,
    #[serde(flatten)]
    study: &'a StudyResult,
}

pub fn simulate(cfg: &RunConfig) -> Result<(Outputs, StudyResult), CliError> {
    let (scenario, opts) = cfg.study()?;
    let result =
        run_study(&scenario, &opts).map_err(|e| CliError::new("simulate", e.to_string()))?;
    let dir = cfg.output_dir();
    prepare_dir(&dir)?;

    let csv_path = dir.join("metrics.csv");
    let mut w = create(&csv_path)?;
    result
        .table
        .write_csv(&mut w)
        .map_err(|e| io_error(&csv_path, e))?;
    w.flush().map_err(|e| io_error(&csv_path, e))?;

    let summary = metrics_text(&result.table);
    let txt_path = dir.join("metrics.txt");
    write_text(&txt_path, &summary)?;

    let json_path = dir.join("study.json");
    let record = StudyRecord {
        master_seed: opts.master_seed,
        replications: opts.replications,
        study: &result,
    };
    let mut text = serde_json::to_string_pretty(&record).map_err(|e| io_error(&json_path, e))?;
    text.push('\n');
    write_text(&json_path, &text)?;
    Ok((
        Outputs {
            files: vec![csv_path, txt_path, json_path],
            summary,
        },
        result,
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsBundle {
    pub balance: Vec<BalanceTable>,
    pub density: Vec<DensityCheck>,
    pub mean_weights: Option<MeanWeightEquality>,
    pub overlap: Vec<OverlapSummary>,
}

pub fn run_diagnostics(cfg: &RunConfig, d: &Dataset) -> Result<DiagnosticsBundle, CliError> {
    let analysis = Analysis::new(d, cfg.estimator_config());
    let schema = cfg.schema()?;
    let covariates = schema.covariate_union();
    let diag = |e: cace_core::diagnostics::DiagError| CliError::new("diagnostics", e.to_string());
    let mut bundle = DiagnosticsBundle {
        balance: Vec::new(),
        density: Vec::new(),
        mean_weights: None,
        overlap: Vec::new(),
    };
    for (arm, listed) in [
        (Arm::Treatment, !cfg.model.logit_t.is_empty()),
        (Arm::Control, !cfg.model.logit_c.is_empty()),
    ] {
        if !listed {
            log::warn!(
                "no covariates listed for the {} receipt model; skipping its diagnostics",
                arm.label()
            );
            continue;
        }
        let fit = analysis
            .logit(arm)
            .map_err(|e| CliError::new("logit", e.to_string()))?;
        let p = predict_dataset(fit, d).map_err(|e| CliError::new("logit", e.to_string()))?;
        // The treatment model reweights controls toward treatment recipients.
        let direction = match arm {
            Arm::Treatment => BalanceDirection::TVsWeightedC,
            Arm::Control => BalanceDirection::CVsWeightedT,
        };
        bundle
            .balance
            .push(balance_table(d, &p.values, &covariates, direction).map_err(diag)?);
        bundle
            .density
            .push(shaikh_density_check(fit, d).map_err(diag)?);
        bundle.overlap.push(overlap_summary(&p, d).map_err(diag)?);
    }
    if !cfg.model.logit_t.is_empty() && !cfg.model.logit_c.is_empty() {
        let w = analysis
            .weights(EstimandKind::CaceTcIpw, cfg.variance.share_variant)
            .map_err(|e| CliError::new(e.stage(), e.to_string()))?;
        bundle.mean_weights = Some(mean_weight_equality(&w, d));
    }
    Ok(bundle)
}

fn diagnostics_text(b: &DiagnosticsBundle) -> String {
    let mut out = String::new();
    for t in &b.balance {
        let _ = writeln!(
            out,
            "Balance {}: {} recipients, max |std diff| {:.3}, flagged at 0.25: {}",
            t.direction.key(),
            t.n_actual,
            t.max_abs_std_diff(),
            if t.any_flag_025() { "yes" } else { "no" }
        );
        for r in &t.rows {
            let _ = writeln!(
                out,
                "  {:<20} {:>9.3} {:>9.3} {:>8}",
                r.covariate,
                r.actual_mean,
                r.weighted_mean,
                fmt_opt(r.std_diff)
            );
        }
    }
    for c in &b.density {
        let _ = writeln!(
            out,
            "Density check ({} model): max gap {:.4}, L1 gap {:.4}",
            c.arm.label(),
            c.max_abs_gap,
            c.l1_gap
        );
    }
    if let Some(m) = &b.mean_weights {
        let _ = writeln!(
            out,
            "Mean CACE-TC weights: treatment {:.4}, control {:.4}, difference {:.4}",
            m.mean_t, m.mean_c, m.diff
        );
    }
    for o in &b.overlap {
        for w in &o.warnings {
            let _ = writeln!(out, "Overlap warning: {w}");
        }
    }
    out
}

pub fn diagnose(cfg: &RunConfig) -> Result<Outputs, CliError> {
    cfg.validate_diagnose()?;
    let d = load(cfg)?;
    let bundle = run_diagnostics(cfg, &d)?;
    let dir = cfg.output_dir();
    prepare_dir(&dir)?;
    let mut files = Vec::new();
    for t in &bundle.balance {
        let path = dir.join(format!("balance_{}.csv", t.direction.key()));
        let mut w = create(&path)?;
        t.write_csv(&mut w).map_err(|e| io_error(&path, e))?;
        w.flush().map_err(|e| io_error(&path, e))?;
        files.push(path);
    }
    for c in &bundle.density {
        let path = dir.join(format!("density_{}.csv", c.arm.label()));
        let mut w = create(&path)?;
        c.write_csv(&mut w).map_err(|e| io_error(&path, e))?;
        w.flush().map_err(|e| io_error(&path, e))?;
        files.push(path);
    }
    let json_path = dir.join("diagnostics.json");
    let mut text = serde_json::to_string_pretty(&bundle).map_err(|e| io_error(&json_path, e))?;
    text.push('\n');
    write_text(&json_path, &text)?;
    files.push(json_path);
    let summary = diagnostics_text(&bundle);
    let txt_path = dir.join("diagnostics.txt");
    write_text(&txt_path, &summary)?;
    files.push(txt_path);
    Ok(Outputs { files, summary })
}
