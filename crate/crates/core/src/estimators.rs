//! The six point estimators, their two standard errors, and the
//! principal-stratum decomposition.
//!
//! Point estimates always come from the WLS solve. The adjusted standard
//! error is the stacked-score sandwich; the unadjusted one treats the
//! weights (or the receipt share, for the ratio forms) as known.

use std::cell::OnceCell;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::data::Dataset;
use crate::gee::{self, Inference, Stack, StackedProblem, VarianceError};
use crate::logit::{fit_logit_with, Arm, FitError, LogitFit, LogitOptions};
use crate::weights::{
    build_weights_variant, shares_from_weights, EstimandKind, ShareVariant, StrataShares,
    WeightError, WeightVector,
};
use crate::wls::{fit_wls, WlsError, WlsFit};

#[derive(Debug, Error, PartialEq)]
pub enum EstimateError {
    #[error("too few clusters: need at least 2 per arm, have {treatment} treatment and {control} control")]
    TooFewClusters { treatment: usize, control: usize },
    #[error("degrees of freedom {df} < 1 for {kind}; reduce the number of covariates")]
    DegreesOfFreedom { kind: EstimandKind, df: f64 },
    #[error("logit stage: {0}")]
    Logit(#[from] FitError),
    #[error("weight stage: {0}")]
    Weights(#[from] WeightError),
    #[error("wls stage: {0}")]
    Wls(#[from] WlsError),
    #[error("variance stage: {0}")]
    Variance(#[from] VarianceError),
    #[error("{kind}: receipt share {share} is not positive")]
    ZeroShare { kind: EstimandKind, share: f64 },
    #[error("share variant 'average' is only available for the strata-share back-out")]
    AverageRatio,
}

impl EstimateError {
    /// Pipeline stage that failed.
    pub fn stage(&self) -> &'static str {
        match self {
            EstimateError::TooFewClusters { .. } => "load",
            EstimateError::Logit(_) => "logit",
            EstimateError::Weights(_)
            | EstimateError::ZeroShare { .. }
            | EstimateError::AverageRatio => "weights",
            EstimateError::Wls(_) => "wls",
            EstimateError::Variance(_) | EstimateError::DegreesOfFreedom { .. } => "variance",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorConfig {
    pub level: f64,
    pub g_correction: bool,
    pub share_variant: ShareVariant,
    pub df_override: Option<f64>,
    /// Stratum shares with |pi| below this are non-identifiable.
    pub share_floor: f64,
    #[serde(skip)]
    pub logit: LogitOptions,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            level: 0.95,
            g_correction: false,
            share_variant: ShareVariant::FromT,
            df_override: None,
            share_floor: 1e-3,
            logit: LogitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateResult {
    pub kind: EstimandKind,
    pub point: f64,
    /// `None` where no weights are estimated (ITT).
    pub se_adjusted: Option<f64>,
    pub se_unadjusted: f64,
    pub df: f64,
    pub level: f64,
    /// Interval and test from the adjusted SE when present, else unadjusted.
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub t_stat: f64,
    pub adjusted: Option<Inference>,
    pub unadjusted: Inference,
    pub shares: Option<StrataShares>,
    pub diagnostics_ref: Option<String>,
    pub n_clusters: usize,
    pub n_rows: usize,
    pub warnings: Vec<String>,
}

impl EstimateResult {
    pub fn primary_se(&self) -> f64 {
        self.se_adjusted.unwrap_or(self.se_unadjusted)
    }
}

/// Number of parameters that df subtracts from m, by estimator.
pub fn df_for(
    kind: EstimandKind,
    m: usize,
    k: usize,
    k1: usize,
    k0: usize,
    variant: ShareVariant,
) -> f64 {
    let m = m as f64;
    let (k, k1, k0) = (k as f64, k1 as f64, k0 as f64);
    match kind {
        EstimandKind::Itt => m - 2.0 - k,
        EstimandKind::CaceT => m - 3.0 - k - k1,
        EstimandKind::CaceTcIpw | EstimandKind::Tau11 => m - 4.0 - k - k1 - k0,
        EstimandKind::CaceTIv => m - (3.0 + k),
        EstimandKind::CaceTcRatio => {
            let kt = match variant {
                ShareVariant::FromC => k1,
                _ => k0,
            };
            m - (5.0 + k + kt)
        }
    }
}

/// One dataset with lazily fitted receipt models shared by all estimators.
pub struct Analysis<'a> {
    d: &'a Dataset,
    cfg: EstimatorConfig,
    fit_t: OnceCell<Result<LogitFit, FitError>>,
    fit_c: OnceCell<Result<LogitFit, FitError>>,
}

impl<'a> Analysis<'a> {
    pub fn new(d: &'a Dataset, cfg: EstimatorConfig) -> Self {
        Self {
            d,
            cfg,
            fit_t: OnceCell::new(),
            fit_c: OnceCell::new(),
        }
    }

    pub fn dataset(&self) -> &Dataset {
        self.d
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    pub fn logit(&self, arm: Arm) -> Result<&LogitFit, EstimateError> {
        let cell = match arm {
            Arm::Treatment => &self.fit_t,
            Arm::Control => &self.fit_c,
        };
        cell.get_or_init(|| fit_logit_with(self.d, arm, &self.cfg.logit))
            .as_ref()
            .map_err(|e| EstimateError::Logit(e.clone()))
    }

    fn check_clusters(&self) -> Result<(), EstimateError> {
        let (t, c) = (self.d.n_clusters_arm(true), self.d.n_clusters_arm(false));
        if t < 2 || c < 2 {
            return Err(EstimateError::TooFewClusters {
                treatment: t,
                control: c,
            });
        }
        Ok(())
    }

    /// Strata shares from the CACE-TC IPW weights (needs both logits).
    pub fn strata_shares(&self) -> Result<StrataShares, EstimateError> {
        let w = self.weights(EstimandKind::CaceTcIpw, ShareVariant::FromT)?;
        Ok(shares_from_weights(self.d, &w, self.cfg.share_variant))
    }

    pub fn weights(
        &self,
        kind: EstimandKind,
        variant: ShareVariant,
    ) -> Result<WeightVector, EstimateError> {
        let (need_t, need_c) = crate::weights::required_fits(kind, variant);
        let ft = if need_t {
            Some(self.logit(Arm::Treatment)?)
        } else {
            None
        };
        let fc = if need_c {
            Some(self.logit(Arm::Control)?)
        } else {
            None
        };
        Ok(build_weights_variant(kind, variant, self.d, ft, fc)?)
    }

    fn df(&self, kind: EstimandKind) -> Result<f64, EstimateError> {
        let df = self.cfg.df_override.unwrap_or_else(|| {
            df_for(
                kind,
                self.d.n_clusters(),
                self.d.covariate_names_wls.len(),
                self.d.covariate_names_logit_t.len(),
                self.d.covariate_names_logit_c.len(),
                self.cfg.share_variant,
            )
        });
        if df < 1.0 {
            return Err(EstimateError::DegreesOfFreedom { kind, df });
        }
        Ok(df)
    }

    fn finish(
        &self,
        kind: EstimandKind,
        point: f64,
        var_adjusted: Option<f64>,
        var_unadjusted: f64,
        shares: Option<StrataShares>,
        mut warnings: Vec<String>,
    ) -> Result<EstimateResult, EstimateError> {
        let df = self.df(kind)?;
        let level = self.cfg.level;
        let unadjusted = gee::inference(point, var_unadjusted, df, level)?;
        let adjusted = var_adjusted
            .map(|v| gee::inference(point, v, df, level))
            .transpose()?;
        let primary = adjusted.unwrap_or(unadjusted);
        if let Some(s) = &shares {
            warnings.extend(s.warnings.iter().cloned());
        }
        Ok(EstimateResult {
            kind,
            point,
            se_adjusted: var_adjusted.map(f64::sqrt),
            se_unadjusted: var_unadjusted.sqrt(),
            df,
            level,
            ci_low: primary.ci_low,
            ci_high: primary.ci_high,
            p_value: primary.p_value,
            t_stat: primary.t_stat,
            adjusted,
            unadjusted,
            shares,
            diagnostics_ref: None,
            n_clusters: self.d.n_clusters(),
            n_rows: self.d.n_rows(),
            warnings,
        })
    }

    fn wls(&self, w: &[f64]) -> Result<WlsFit, EstimateError> {
        Ok(fit_wls(self.d, w, &self.d.covariate_names_wls)?)
    }

    fn sandwich_variance(
        &self,
        stack: Stack,
        wls: &WlsFit,
        share: Option<f64>,
    ) -> Result<f64, EstimateError> {
        let problem = StackedProblem::new(stack, self.d)?;
        let ft = self.layout_fit(problem.layout().logit_t.is_some(), Arm::Treatment)?;
        let fc = self.layout_fit(problem.layout().logit_c.is_some(), Arm::Control)?;
        let xi = problem.xi_hat(wls, ft, fc, share)?;
        let sw = problem.sandwich(&xi, self.cfg.g_correction)?;
        Ok(sw.variance_of_contrast)
    }

    fn layout_fit(&self, needed: bool, arm: Arm) -> Result<Option<&LogitFit>, EstimateError> {
        if needed {
            self.logit(arm).map(Some)
        } else {
            Ok(None)
        }
    }

    fn known_weights(&self, wls: &WlsFit, w: &[f64]) -> Result<f64, EstimateError> {
        let v = gee::known_weights_variance(self.d, wls, w)?.variance;
        Ok(v * self.g_factor())
    }

    fn g_factor(&self) -> f64 {
        if self.cfg.g_correction {
            gee::small_sample_factor(self.d.n_clusters(), self.d.n_rows())
        } else {
            1.0
        }
    }

    pub fn estimate(&self, kind: EstimandKind) -> Result<EstimateResult, EstimateError> {
        self.check_clusters()?;
        match kind {
            EstimandKind::Itt => self.itt(),
            EstimandKind::CaceT | EstimandKind::CaceTcIpw | EstimandKind::Tau11 => {
                self.weighted(kind)
            }
            EstimandKind::CaceTIv => self.iv(),
            EstimandKind::CaceTcRatio => self.ratio(),
        }
    }

    fn itt(&self) -> Result<EstimateResult, EstimateError> {
        let ones = vec![1.0; self.d.n_rows()];
        let fit = self.wls(&ones)?;
        let var = self.known_weights(&fit, &ones)?;
        self.finish(
            EstimandKind::Itt,
            fit.mu_t - fit.mu_c,
            None,
            var,
            None,
            Vec::new(),
        )
    }

    fn weighted(&self, kind: EstimandKind) -> Result<EstimateResult, EstimateError> {
        let w = self.weights(kind, ShareVariant::FromT)?;
        let fit = self.wls(&w.values)?;
        let stack = match kind {
            EstimandKind::CaceT => Stack::CaceT,
            EstimandKind::CaceTcIpw => Stack::CaceTcIpw,
            _ => Stack::Tau11,
        };
        let var_adj = self.sandwich_variance(stack, &fit, None)?;
        let var_unadj = self.known_weights(&fit, &w.values)?;
        let shares = match kind {
            EstimandKind::CaceT => None,
            _ => Some(self.strata_shares()?),
        };
        self.finish(
            kind,
            fit.mu_t - fit.mu_c,
            Some(var_adj),
            var_unadj,
            shares,
            Vec::new(),
        )
    }

    fn ratio_pieces(&self) -> Result<(WlsFit, f64), EstimateError> {
        let ones = vec![1.0; self.d.n_rows()];
        let fit = self.wls(&ones)?;
        let var_itt = self.known_weights(&fit, &ones)?;
        Ok((fit, var_itt))
    }

    fn iv(&self) -> Result<EstimateResult, EstimateError> {
        let kind = EstimandKind::CaceTIv;
        let share = self.d.receipt_rate(true);
        if !(share > 0.0) {
            return Err(EstimateError::ZeroShare { kind, share });
        }
        let (fit, var_itt) = self.ratio_pieces()?;
        let point = (fit.mu_t - fit.mu_c) / share;
        let var_adj = self.sandwich_variance(Stack::Iv, &fit, None)?;
        self.finish(
            kind,
            point,
            Some(var_adj),
            var_itt / (share * share),
            None,
            Vec::new(),
        )
    }

    fn ratio(&self) -> Result<EstimateResult, EstimateError> {
        let kind = EstimandKind::CaceTcRatio;
        let variant = self.cfg.share_variant;
        if variant == ShareVariant::Average {
            return Err(EstimateError::AverageRatio);
        }
        let w = self.weights(kind, variant)?;
        let share = match variant {
            ShareVariant::FromC => w.sum_c / self.d.n_rows_arm(false) as f64,
            _ => w.sum_t / self.d.n_rows_arm(true) as f64,
        };
        if !(share > 0.0) {
            return Err(EstimateError::ZeroShare { kind, share });
        }
        let (fit, var_itt) = self.ratio_pieces()?;
        let point = (fit.mu_t - fit.mu_c) / share;
        let var_adj = self.sandwich_variance(Stack::Ratio(variant), &fit, Some(share))?;
        let shares = self.strata_shares().ok();
        self.finish(
            kind,
            point,
            Some(var_adj),
            var_itt / (share * share),
            shares,
            Vec::new(),
        )
    }
}

pub fn estimate_itt(d: &Dataset, cfg: &EstimatorConfig) -> Result<EstimateResult, EstimateError> {
    Analysis::new(d, cfg.clone()).estimate(EstimandKind::Itt)
}

pub fn estimate_cace_t(
    d: &Dataset,
    cfg: &EstimatorConfig,
) -> Result<EstimateResult, EstimateError> {
    Analysis::new(d, cfg.clone()).estimate(EstimandKind::CaceT)
}

pub fn estimate_cace_t_iv(
    d: &Dataset,
    cfg: &EstimatorConfig,
) -> Result<EstimateResult, EstimateError> {
    Analysis::new(d, cfg.clone()).estimate(EstimandKind::CaceTIv)
}

pub fn estimate_cace_tc_ratio(
    d: &Dataset,
    cfg: &EstimatorConfig,
    variant: ShareVariant,
) -> Result<EstimateResult, EstimateError> {
    let cfg = EstimatorConfig {
        share_variant: variant,
        ..cfg.clone()
    };
    Analysis::new(d, cfg).estimate(EstimandKind::CaceTcRatio)
}

pub fn estimate_cace_tc_ipw(
    d: &Dataset,
    cfg: &EstimatorConfig,
) -> Result<EstimateResult, EstimateError> {
    Analysis::new(d, cfg.clone()).estimate(EstimandKind::CaceTcIpw)
}

pub fn estimate_tau11(d: &Dataset, cfg: &EstimatorConfig) -> Result<EstimateResult, EstimateError> {
    Analysis::new(d, cfg.clone()).estimate(EstimandKind::Tau11)
}

/// Back-computed principal-stratum effects; `None` marks a stratum whose
/// share is below the floor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrataEffects {
    pub tau_11: f64,
    pub tau_10: Option<f64>,
    pub tau_01: Option<f64>,
    pub tau_00: Option<f64>,
    pub non_identifiable: Vec<String>,
}

impl StrataEffects {
    /// `sum pi_rr' tau_rr'` over identifiable strata.
    pub fn reconstructed_itt(&self, s: &StrataShares) -> f64 {
        s.pi_11 * self.tau_11
            + s.pi_10 * self.tau_10.unwrap_or(0.0)
            + s.pi_01 * self.tau_01.unwrap_or(0.0)
            + s.pi_00 * self.tau_00.unwrap_or(0.0)
    }
}

/// Stratum effects from the four aggregate estimates.
///
/// The CACE-T estimate averages strata 11 and 10; the CACE-TC estimate
/// averages 11, 10 and 01; the ITT estimate averages all four.
pub fn decompose_from_points(
    itt: f64,
    cace_t: f64,
    cace_tc: f64,
    tau_11: f64,
    s: &StrataShares,
    floor: f64,
) -> StrataEffects {
    let mut non_identifiable = Vec::new();
    let mut solve = |name: &str, num: f64, den: f64| {
        if den.abs() < floor {
            non_identifiable.push(name.to_string());
            None
        } else {
            Some(num / den)
        }
    };
    let total_t = s.pi_cace_t * cace_t;
    let total_tc = s.pi_cace_tc * cace_tc;
    let tau_10 = solve("tau_10", total_t - s.pi_11 * tau_11, s.pi_10);
    let tau_01 = solve("tau_01", total_tc - total_t, s.pi_01);
    let tau_00 = solve("tau_00", itt - total_tc, s.pi_00);
    StrataEffects {
        tau_11,
        tau_10,
        tau_01,
        tau_00,
        non_identifiable,
    }
}

/// Decomposition from a result set containing ITT, CACE-T, a CACE-TC
/// variant (IPW preferred over ratio) and tau11.
pub fn decompose_strata_effects(
    results: &[EstimateResult],
    shares: &StrataShares,
    floor: f64,
) -> Option<StrataEffects> {
    let get = |k: EstimandKind| results.iter().find(|r| r.kind == k).map(|r| r.point);
    let cace_tc = get(EstimandKind::CaceTcIpw).or_else(|| get(EstimandKind::CaceTcRatio))?;
    Some(decompose_from_points(
        get(EstimandKind::Itt)?,
        get(EstimandKind::CaceT)?,
        cace_tc,
        get(EstimandKind::Tau11)?,
        shares,
        floor,
    ))
}

/// Aligned text table: estimator, point, adjusted SE, unadjusted SE.
pub fn format_results_table(results: &[EstimateResult]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:>10} {:>12} {:>14} {:>8}",
        "estimator", "point", "se_adjusted", "se_unadjusted", "df"
    );
    for r in results {
        let adj = r
            .se_adjusted
            .map_or_else(|| "NA".to_string(), |v| format!("{v:.3}"));
        let _ = writeln!(
            out,
            "{:<14} {:>10.3} {:>12} {:>14.3} {:>8}",
            r.kind.key(),
            r.point,
            adj,
            r.se_unadjusted,
            r.df
        );
    }
    out
}
