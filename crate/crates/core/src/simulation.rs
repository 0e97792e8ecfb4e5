//! Clustered-trial data generating process and the Monte Carlo study runner.
//!
//! Each replication draws from its own ChaCha8 stream (stream id = the
//! replication index, key = the master seed), and results are aggregated in
//! replication order, so a study's output does not depend on the number of
//! worker threads.

use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Observation};
use crate::estimators::{Analysis, EstimatorConfig};
use crate::logit::logistic;
use crate::weights::EstimandKind;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("explained variance too large: sigma2_y0 - 2 sigma2_x = {0} <= 0")]
    ExplainedVarianceTooLarge(f64),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(
        "{failures} of {replications} replications failed (more than 1%); first error: {first}"
    )]
    StudyFailed {
        failures: usize,
        replications: usize,
        first: String,
    },
    #[error("thread pool: {0}")]
    Threads(String),
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlopeForm {
    /// `delta / (sigma_X Rbar (1 - Rbar))`: a one-SD covariate shift moves
    /// the receipt probability by about `delta`.
    #[default]
    Marginal,
    /// `sigma_X delta / (Rbar (1 - Rbar))`.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterEffects {
    /// One `u_j` and one `theta_j` per cluster.
    #[default]
    Shared,
    /// Separate `u_j` and `theta_j` for each stratum within a cluster.
    PerStratum,
}

/// How stratum means are laid out to produce the configured stratum effects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratumMeans {
    /// `Y(1)` means depend only on `R(1)` and `Y(0)` means only on `R(0)`, so
    /// potential outcomes are independent of the other arm's receipt given X.
    /// Requires `tau11 - tau10 - tau01 + tau00 = 0`.
    #[default]
    Separable,
    /// `mu0 = 0` and `mu1 = tau` in every stratum.
    Additive,
}

fn default_p() -> f64 {
    0.6
}
fn default_n_range() -> [usize; 2] {
    [40, 80]
}
fn default_icc() -> f64 {
    0.10
}
fn default_r2() -> f64 {
    0.30
}
fn default_f() -> f64 {
    0.10
}
fn default_sigma_y0() -> f64 {
    1.0
}
fn default_effects() -> [f64; 4] {
    [0.20, 0.30, -0.10, 0.0]
}
fn default_between() -> f64 {
    0.30
}

/// Simulation design. Stratum effects are ordered (tau11, tau10, tau01, tau00).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub m: usize,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_n_range")]
    pub n_range: [usize; 2],
    pub rbar_t: f64,
    pub rbar_c: f64,
    /// Per-SD shift in receipt probability (0.05 moderate, 0.10 strong).
    pub covariate_strength_t: f64,
    pub covariate_strength_c: f64,
    #[serde(default = "default_icc")]
    pub icc0: f64,
    #[serde(default = "default_r2")]
    pub r_squared: f64,
    #[serde(default = "default_f")]
    pub f_ratio: f64,
    #[serde(default = "default_sigma_y0")]
    pub sigma_y0_sq: f64,
    #[serde(default = "default_effects")]
    pub stratum_effects: [f64; 4],
    /// Share of each covariate's variance that lies between clusters.
    #[serde(default = "default_between")]
    pub covariate_between_share: f64,
    /// Whether the outcome regression adjusts for both covariates.
    #[serde(default)]
    pub wls_covariates: bool,
    #[serde(default)]
    pub slope_form: SlopeForm,
    #[serde(default)]
    pub cluster_effects: ClusterEffects,
    #[serde(default)]
    pub stratum_means: StratumMeans,
    #[serde(default)]
    pub allow_nonzero_tau00: bool,
}

impl Scenario {
    /// Scenario with the default variance calibration and stratum effects.
    pub fn new(m: usize, rbar_t: f64, rbar_c: f64, strength_t: f64, strength_c: f64) -> Self {
        Self {
            name: String::new(),
            m,
            p: default_p(),
            n_range: default_n_range(),
            rbar_t,
            rbar_c,
            covariate_strength_t: strength_t,
            covariate_strength_c: strength_c,
            icc0: default_icc(),
            r_squared: default_r2(),
            f_ratio: default_f(),
            sigma_y0_sq: default_sigma_y0(),
            stratum_effects: default_effects(),
            covariate_between_share: default_between(),
            wls_covariates: false,
            slope_form: SlopeForm::Marginal,
            cluster_effects: ClusterEffects::Shared,
            stratum_means: StratumMeans::Separable,
            allow_nonzero_tau00: false,
        }
    }

    pub fn treated_clusters(&self) -> usize {
        (self.m as f64 * self.p).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if !(self.p > 0.0 && self.p < 1.0) {
            return bad(format!("p = {} must lie in (0, 1)", self.p));
        }
        if !(self.rbar_c > 0.0 && self.rbar_c <= self.rbar_t && self.rbar_t < 1.0) {
            return bad(format!(
                "receipt rates must satisfy 0 < rbar_c <= rbar_t < 1 (got {}, {})",
                self.rbar_c, self.rbar_t
            ));
        }
        let m1 = self.treated_clusters();
        if m1 < 2 || self.m < m1 + 2 {
            return bad(format!(
                "m = {} leaves fewer than 2 clusters in an arm",
                self.m
            ));
        }
        if self.n_range[0] < 1 || self.n_range[0] > self.n_range[1] {
            return bad(format!(
                "n_range {:?} is not a valid interval",
                self.n_range
            ));
        }
        for (name, v) in [
            ("icc0", self.icc0),
            ("r_squared", self.r_squared),
            ("f_ratio", self.f_ratio),
            ("sigma_y0_sq", self.sigma_y0_sq),
            ("covariate_strength_t", self.covariate_strength_t),
            ("covariate_strength_c", self.covariate_strength_c),
        ] {
            if !(v >= 0.0) {
                return bad(format!("{name} = {v} must be nonnegative"));
            }
        }
        if !(0.0..=1.0).contains(&self.icc0) || !(0.0..=1.0).contains(&self.covariate_between_share)
        {
            return bad("icc0 and covariate_between_share must lie in [0, 1]".into());
        }
        if self.stratum_effects[3] != 0.0 && !self.allow_nonzero_tau00 {
            return bad("tau00 must be 0 (set allow_nonzero_tau00 to override)".into());
        }
        let [t11, t10, t01, t00] = self.stratum_effects;
        let interaction = t11 - t10 - t01 + t00;
        if self.stratum_means == StratumMeans::Separable && interaction.abs() > 1e-12 {
            return bad(format!(
                "separable stratum means need tau11 - tau10 - tau01 + tau00 = 0 (got {interaction}); \
                 use stratum_means = \"additive\" instead"
            ));
        }
        Ok(())
    }

    /// Stratum means `[mu1, mu0]` indexed by stratum; `mu1 - mu0` equals the stratum effect.
    pub fn stratum_mean_table(&self) -> [[f64; 2]; 4] {
        let [t11, t10, t01, t00] = self.stratum_effects;
        match self.stratum_means {
            StratumMeans::Additive => [[t11, 0.0], [t10, 0.0], [t01, 0.0], [t00, 0.0]],
            StratumMeans::Separable => {
                let mu0_never = t11 - t10;
                [[t11, 0.0], [t11, mu0_never], [t01, 0.0], [t01, mu0_never]]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Calibration {
    pub sigma2_x: f64,
    pub var_ux: f64,
    pub var_ex: f64,
    pub sigma2_y0_star: f64,
    pub sigma2_u: f64,
    pub sigma2_eps: f64,
    pub sigma2_theta: f64,
    pub alpha0_t: f64,
    pub alpha0_c: f64,
    pub slope_t: f64,
    pub slope_c: f64,
}

pub fn calibrate_scenario(s: &Scenario) -> Result<Calibration, SimError> {
    s.validate()?;
    let sigma2_x = s.r_squared * s.sigma_y0_sq / 2.0;
    let star = s.sigma_y0_sq - 2.0 * sigma2_x;
    if !(star > 0.0) {
        return Err(SimError::ExplainedVarianceTooLarge(star));
    }
    let sd_x = sigma2_x.sqrt();
    let slope = |delta: f64, rbar: f64| {
        let v = rbar * (1.0 - rbar);
        match s.slope_form {
            SlopeForm::Marginal if sd_x > 0.0 => delta / (sd_x * v),
            SlopeForm::Marginal => 0.0,
            SlopeForm::Literal => sd_x * delta / v,
        }
    };
    let logit = |r: f64| (r / (1.0 - r)).ln();
    Ok(Calibration {
        sigma2_x,
        var_ux: sigma2_x * s.covariate_between_share,
        var_ex: sigma2_x * (1.0 - s.covariate_between_share),
        sigma2_y0_star: star,
        sigma2_u: star * s.icc0,
        sigma2_eps: star * (1.0 - s.icc0),
        sigma2_theta: s.f_ratio * star * s.icc0,
        alpha0_t: logit(s.rbar_t),
        alpha0_c: logit(s.rbar_c),
        slope_t: slope(s.covariate_strength_t, s.rbar_t),
        slope_c: slope(s.covariate_strength_c, s.rbar_c),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stratum {
    S11,
    S10,
    S01,
    S00,
}

impl Stratum {
    pub fn of(r1: bool, r0: bool) -> Self {
        match (r1, r0) {
            (true, true) => Stratum::S11,
            (true, false) => Stratum::S10,
            (false, true) => Stratum::S01,
            (false, false) => Stratum::S00,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatentRow {
    pub r1: bool,
    pub r0: bool,
    pub stratum: Stratum,
    pub y1: f64,
    pub y0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedTrial {
    pub latent: Vec<LatentRow>,
    pub observed: Dataset,
}

pub const COVARIATES: [&str; 2] = ["x1", "x2"];

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("finite nonnegative sd")
}

/// Seeded generator for one replication.
pub fn replication_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

pub fn generate_trial(s: &Scenario, seed: u64) -> Result<SimulatedTrial, SimError> {
    let cal = calibrate_scenario(s)?;
    Ok(generate_trial_with(s, &cal, &mut replication_rng(seed, 0)))
}

pub fn generate_trial_with<R: Rng>(s: &Scenario, cal: &Calibration, rng: &mut R) -> SimulatedTrial {
    let sizes: Vec<usize> = (0..s.m)
        .map(|_| rng.gen_range(s.n_range[0]..=s.n_range[1]))
        .collect();
    let mut treated = vec![false; s.m];
    for j in sample(rng, s.m, s.treated_clusters()) {
        treated[j] = true;
    }
    let d_ux = normal(cal.var_ux.sqrt());
    let d_ex = normal(cal.var_ex.sqrt());
    let d_u = normal(cal.sigma2_u.sqrt());
    let d_theta = normal(cal.sigma2_theta.sqrt());
    let d_eps = normal(cal.sigma2_eps.sqrt());
    let n_effects = match s.cluster_effects {
        ClusterEffects::Shared => 1,
        ClusterEffects::PerStratum => 4,
    };
    let means = s.stratum_mean_table();
    let total: usize = sizes.iter().sum();
    let mut latent = Vec::with_capacity(total);
    let mut obs = Vec::with_capacity(total);
    for j in 0..s.m {
        let ux = [d_ux.sample(rng), d_ux.sample(rng)];
        let u: Vec<f64> = (0..n_effects).map(|_| d_u.sample(rng)).collect();
        let theta: Vec<f64> = (0..n_effects).map(|_| d_theta.sample(rng)).collect();
        let t = treated[j];
        for _ in 0..sizes[j] {
            let x = [ux[0] + d_ex.sample(rng), ux[1] + d_ex.sample(rng)];
            let xs = x[0] + x[1];
            let e1 = logistic(cal.alpha0_t + cal.slope_t * xs);
            let e0 = logistic(cal.alpha0_c + cal.slope_c * xs);
            let r1 = e1 >= rng.gen::<f64>();
            let r0 = e0 >= rng.gen::<f64>();
            let stratum = Stratum::of(r1, r0);
            let g = if n_effects == 1 { 0 } else { stratum.index() };
            let base = xs + u[g] + d_eps.sample(rng);
            let [mu1, mu0] = means[stratum.index()];
            let y0 = mu0 + base;
            let y1 = mu1 + base + theta[g];
            obs.push(Observation {
                cluster_id: format!("c{j:04}"),
                treat: t,
                receipt: if t { r1 } else { r0 },
                outcome: if t { y1 } else { y0 },
                covariates: x.to_vec(),
            });
            latent.push(LatentRow {
                r1,
                r0,
                stratum,
                y1,
                y0,
            });
        }
    }
    let names: Vec<String> = COVARIATES.iter().map(|s| s.to_string()).collect();
    let wls = if s.wls_covariates {
        names.clone()
    } else {
        Vec::new()
    };
    let observed = Dataset::from_observations(obs, names.clone(), wls, names.clone(), names)
        .expect("simulated rows are valid");
    SimulatedTrial { latent, observed }
}

/// Population strata shares and the estimands built from them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Truths {
    pub pi_11: f64,
    pub pi_10: f64,
    pub pi_01: f64,
    pub pi_00: f64,
    pub tau_itt: f64,
    pub tau_cace_t: f64,
    pub tau_cace_tc: f64,
    pub tau_11: f64,
}

impl Truths {
    pub fn for_kind(&self, kind: EstimandKind) -> f64 {
        match kind {
            EstimandKind::Itt => self.tau_itt,
            EstimandKind::CaceT | EstimandKind::CaceTIv => self.tau_cace_t,
            EstimandKind::CaceTcRatio | EstimandKind::CaceTcIpw => self.tau_cace_tc,
            EstimandKind::Tau11 => self.tau_11,
        }
    }

    pub fn from_shares(pi: [f64; 4], tau: [f64; 4]) -> Self {
        let part = |k: usize| pi[k] * tau[k];
        Truths {
            pi_11: pi[0],
            pi_10: pi[1],
            pi_01: pi[2],
            pi_00: pi[3],
            tau_itt: (0..4).map(part).sum(),
            tau_cace_t: (part(0) + part(1)) / (pi[0] + pi[1]),
            tau_cace_tc: (part(0) + part(1) + part(2)) / (pi[0] + pi[1] + pi[2]),
            tau_11: tau[0],
        }
    }
}

/// Monte Carlo truths: averages of the conditional stratum probabilities
/// over `n_population` covariate draws.
pub fn true_estimands(s: &Scenario, n_population: usize, seed: u64) -> Result<Truths, SimError> {
    let cal = calibrate_scenario(s)?;
    let mut rng = replication_rng(seed, u64::MAX);
    let dx = normal(cal.sigma2_x.sqrt());
    let mut pi = [0.0; 4];
    for _ in 0..n_population {
        let xs = dx.sample(&mut rng) + dx.sample(&mut rng);
        let e1 = logistic(cal.alpha0_t + cal.slope_t * xs);
        let e0 = logistic(cal.alpha0_c + cal.slope_c * xs);
        pi[0] += e1 * e0;
        pi[1] += e1 * (1.0 - e0);
        pi[2] += (1.0 - e1) * e0;
        pi[3] += (1.0 - e1) * (1.0 - e0);
    }
    for v in &mut pi {
        *v /= n_population as f64;
    }
    Ok(Truths::from_shares(pi, s.stratum_effects))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOptions {
    pub replications: usize,
    pub master_seed: u64,
    /// `None` uses the global rayon pool.
    pub threads: Option<usize>,
    pub kinds: Vec<EstimandKind>,
    pub truth_population: usize,
    #[serde(skip)]
    pub estimator: EstimatorConfig,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            replications: 1000,
            master_seed: 20240101,
            threads: None,
            kinds: vec![
                EstimandKind::CaceT,
                EstimandKind::CaceTcRatio,
                EstimandKind::CaceTcIpw,
                EstimandKind::Tau11,
            ],
            truth_population: 1_000_000,
            estimator: EstimatorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepEstimate {
    pub point: f64,
    pub se_adjusted: Option<f64>,
    pub se_unadjusted: f64,
    pub covered_adjusted: bool,
    pub covered_unadjusted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationRecord {
    pub index: usize,
    pub estimates: Vec<Result<RepEstimate, String>>,
    /// Arm means of the CACE-TC IPW weights.
    pub share_t: Option<f64>,
    pub share_c: Option<f64>,
}

impl ReplicationRecord {
    pub fn failed(&self) -> Option<&str> {
        self.estimates
            .iter()
            .find_map(|e| e.as_ref().err().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub estimator: EstimandKind,
    pub true_effect: f64,
    pub mean_estimate: f64,
    pub true_se: f64,
    pub mean_se_adjusted: f64,
    pub mean_se_unadjusted: f64,
    pub coverage: f64,
    pub coverage_unadjusted: f64,
    pub replications: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsTable {
    pub scenario: String,
    pub rows: Vec<MetricsRow>,
    pub failures: usize,
    pub replications: usize,
}

impl MetricsTable {
    pub fn row(&self, kind: EstimandKind) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.estimator == kind)
    }

    /// Delimited text: truth, mean, true SE, mean SEs and coverage, then the extra columns.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), SimError> {
        let io = |e: std::io::Error| SimError::Io(e.to_string());
        writeln!(
            out,
            "scenario,estimator,true_effect,mean_estimate,true_se,mean_se_adjusted,mean_se_unadjusted,coverage,coverage_unadjusted,replications_ok,replications_failed"
        )
        .map_err(io)?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4},{:.4},{},{}",
                self.scenario,
                r.estimator.key(),
                r.true_effect,
                r.mean_estimate,
                r.true_se,
                r.mean_se_adjusted,
                r.mean_se_unadjusted,
                r.coverage,
                r.coverage_unadjusted,
                r.replications,
                self.failures
            )
            .map_err(io)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyResult {
    pub scenario: Scenario,
    pub calibration: Calibration,
    pub truths: Truths,
    pub table: MetricsTable,
    #[serde(skip)]
    pub records: Vec<ReplicationRecord>,
}

fn run_replication(
    s: &Scenario,
    cal: &Calibration,
    truths: &Truths,
    opts: &StudyOptions,
    index: usize,
) -> ReplicationRecord {
    let mut rng = replication_rng(opts.master_seed, index as u64);
    let trial = generate_trial_with(s, cal, &mut rng);
    let analysis = Analysis::new(&trial.observed, opts.estimator.clone());
    let estimates = opts
        .kinds
        .iter()
        .map(|&kind| {
            let r = analysis
                .estimate(kind)
                .map_err(|e| format!("{kind}: {e}"))?;
            let truth = truths.for_kind(kind);
            let within = |lo: f64, hi: f64| lo <= truth && truth <= hi;
            Ok(RepEstimate {
                point: r.point,
                se_adjusted: r.se_adjusted,
                se_unadjusted: r.se_unadjusted,
                covered_adjusted: within(r.ci_low, r.ci_high),
                covered_unadjusted: within(r.unadjusted.ci_low, r.unadjusted.ci_high),
            })
        })
        .collect();
    let shares = analysis.strata_shares().ok();
    ReplicationRecord {
        index,
        estimates,
        share_t: shares.as_ref().map(|s| s.pi_cace_tc_from_t),
        share_c: shares.as_ref().map(|s| s.pi_cace_tc_from_c),
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    s / n as f64
}

pub fn run_study(s: &Scenario, opts: &StudyOptions) -> Result<StudyResult, SimError> {
    if opts.replications < 2 {
        return Err(SimError::InvalidScenario(
            "replications must be at least 2".into(),
        ));
    }
    let cal = calibrate_scenario(s)?;
    let truths = true_estimands(s, opts.truth_population, opts.master_seed)?;
    let work = || {
        (0..opts.replications)
            .into_par_iter()
            .map(|i| run_replication(s, &cal, &truths, opts, i))
            .collect::<Vec<_>>()
    };
    let records = match opts.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| SimError::Threads(e.to_string()))?
            .install(work),
        None => work(),
    };
    let failed: Vec<&ReplicationRecord> = records.iter().filter(|r| r.failed().is_some()).collect();
    if failed.len() * 100 > opts.replications {
        return Err(SimError::StudyFailed {
            failures: failed.len(),
            replications: opts.replications,
            first: failed[0].failed().unwrap_or_default().to_string(),
        });
    }
    for r in &failed {
        log::warn!(
            "replication {} failed: {}",
            r.index,
            r.failed().unwrap_or_default()
        );
    }
    let ok: Vec<&ReplicationRecord> = records.iter().filter(|r| r.failed().is_none()).collect();
    let rows = opts
        .kinds
        .iter()
        .enumerate()
        .map(|(k, &kind)| {
            let est: Vec<&RepEstimate> = ok
                .iter()
                .map(|r| r.estimates[k].as_ref().unwrap())
                .collect();
            let mean_estimate = mean(est.iter().map(|e| e.point));
            let n = est.len() as f64;
            let var = est
                .iter()
                .map(|e| (e.point - mean_estimate).powi(2))
                .sum::<f64>()
                / (n - 1.0);
            MetricsRow {
                estimator: kind,
                true_effect: truths.for_kind(kind),
                mean_estimate,
                true_se: var.sqrt(),
                mean_se_adjusted: mean(
                    est.iter().map(|e| e.se_adjusted.unwrap_or(e.se_unadjusted)),
                ),
                mean_se_unadjusted: mean(est.iter().map(|e| e.se_unadjusted)),
                coverage: mean(est.iter().map(|e| f64::from(u8::from(e.covered_adjusted)))),
                coverage_unadjusted: mean(
                    est.iter()
                        .map(|e| f64::from(u8::from(e.covered_unadjusted))),
                ),
                replications: est.len(),
            }
        })
        .collect();
    Ok(StudyResult {
        scenario: s.clone(),
        calibration: cal,
        truths,
        table: MetricsTable {
            scenario: s.name.clone(),
            rows,
            failures: failed.len(),
            replications: opts.replications,
        },
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table2(m: usize) -> Scenario {
        Scenario::new(m, 0.7, 0.5, 0.10, 0.05)
    }

    #[test]
    fn stratum_means_hit_effects() {
        let mut s = table2(20);
        for layout in [StratumMeans::Separable, StratumMeans::Additive] {
            s.stratum_means = layout;
            for (k, [mu1, mu0]) in s.stratum_mean_table().into_iter().enumerate() {
                assert!((mu1 - mu0 - s.stratum_effects[k]).abs() < 1e-15);
            }
        }
        s.stratum_means = StratumMeans::Separable;
        let t = s.stratum_mean_table();
        // Y(1) means agree across R(0) and Y(0) means agree across R(1).
        assert_eq!(t[0][0], t[1][0]);
        assert_eq!(t[2][0], t[3][0]);
        assert_eq!(t[0][1], t[2][1]);
        assert_eq!(t[1][1], t[3][1]);
        s.stratum_effects = [0.2, 0.3, 0.1, 0.0];
        assert!(matches!(s.validate(), Err(SimError::InvalidScenario(_))));
        s.stratum_means = StratumMeans::Additive;
        assert!(s.validate().is_ok());
    }

    #[test]
    fn calibration_values() {
        let c = calibrate_scenario(&table2(80)).unwrap();
        assert!((c.sigma2_x - 0.15).abs() < 1e-12);
        assert!((c.sigma2_u - 0.07).abs() < 1e-12);
        assert!((c.sigma2_theta - 0.007).abs() < 1e-12);
        assert!((c.sigma2_eps - 0.63).abs() < 1e-12);
        assert!((c.var_ux - 0.045).abs() < 1e-12 && (c.var_ex - 0.105).abs() < 1e-12);
        assert!((c.alpha0_t - (7.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((c.slope_t - 1.2297).abs() < 1e-3);
    }

    #[test]
    fn r_squared_too_large() {
        let mut s = table2(80);
        s.r_squared = 1.2;
        assert!(matches!(
            calibrate_scenario(&s),
            Err(SimError::ExplainedVarianceTooLarge(_))
        ));
    }

    #[test]
    fn latent_consistency() {
        let t = generate_trial(&table2(20), 7).unwrap();
        for (l, o) in t.latent.iter().zip(t.observed.rows()) {
            assert_eq!(l.stratum, Stratum::of(l.r1, l.r0));
            assert_eq!(o.outcome, if o.treat { l.y1 } else { l.y0 });
            assert_eq!(o.receipt, if o.treat { l.r1 } else { l.r0 });
        }
        assert_eq!(t.observed.n_clusters_arm(true), 12);
    }
}
