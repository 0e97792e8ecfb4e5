//! IPW weight rules for each estimand and the stratum-share estimators
//! built from weight means.
//!
//! | kind            | weight                                             |
//! |-----------------|----------------------------------------------------|
//! | ITT             | 1                                                  |
//! | CACE-T          | T r + (1-T) e1                                     |
//! | CACE-T (IV)     | T r (share weights; outcome model is unweighted)   |
//! | CACE-TC (ratio) | T (r + (1-r) e0), or (1-T)(r + (1-r) e1)           |
//! | CACE-TC (IPW)   | r + (1-r) [T e0 + (1-T) e1]                        |
//! | tau11           | r [T e0 + (1-T) e1]                                |
//!
//! `e1` and `e0` are the fitted treatment- and control-arm receipt
//! propensities evaluated at each row's own covariates.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::logit::{predict_dataset, Arm, FitError, LogitFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum EstimandKind {
    Itt,
    CaceT,
    CaceTIv,
    CaceTcRatio,
    CaceTcIpw,
    Tau11,
}

impl EstimandKind {
    pub const ALL: [EstimandKind; 6] = [
        EstimandKind::Itt,
        EstimandKind::CaceT,
        EstimandKind::CaceTIv,
        EstimandKind::CaceTcRatio,
        EstimandKind::CaceTcIpw,
        EstimandKind::Tau11,
    ];

    pub fn label(self) -> &'static str {
        match self {
            EstimandKind::Itt => "ITT",
            EstimandKind::CaceT => "CACE-T",
            EstimandKind::CaceTIv => "CACE-T (IV)",
            EstimandKind::CaceTcRatio => "CACE-TC (ratio)",
            EstimandKind::CaceTcIpw => "CACE-TC (IPW)",
            EstimandKind::Tau11 => "tau11",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            EstimandKind::Itt => "itt",
            EstimandKind::CaceT => "cace_t",
            EstimandKind::CaceTIv => "cace_t_iv",
            EstimandKind::CaceTcRatio => "cace_tc_ratio",
            EstimandKind::CaceTcIpw => "cace_tc_ipw",
            EstimandKind::Tau11 => "tau11",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.key().eq_ignore_ascii_case(s.trim()))
    }

    /// Whether the outcome model is a weighted two-group mean model.
    pub fn forms_weighted_means(self) -> bool {
        matches!(
            self,
            EstimandKind::Itt | EstimandKind::CaceT | EstimandKind::CaceTcIpw | EstimandKind::Tau11
        )
    }
}

impl fmt::Display for EstimandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Which arm's weight mean estimates the CACE-TC share.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareVariant {
    #[default]
    FromT,
    FromC,
    Average,
}

#[derive(Debug, Error, PartialEq)]
pub enum WeightError {
    #[error("{kind} weights need the {arm} receipt model")]
    MissingFit {
        kind: EstimandKind,
        arm: &'static str,
    },
    #[error("{arm} receipt model did not converge")]
    Unconverged { arm: &'static str },
    #[error("{kind}: total weight in the {arm} group is zero")]
    ZeroTotal {
        kind: EstimandKind,
        arm: &'static str,
    },
    #[error("propensity vector has {got} entries, dataset has {expected} rows")]
    Length { got: usize, expected: usize },
    #[error("share variant 'average' has no single stacked score; use from_t or from_c")]
    AverageShare,
    #[error(transparent)]
    Fit(#[from] FitError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub kind: EstimandKind,
    pub values: Vec<f64>,
    pub sum_t: f64,
    pub sum_c: f64,
}

impl WeightVector {
    pub fn ones(d: &Dataset) -> Self {
        weights_from_propensities(EstimandKind::Itt, ShareVariant::FromT, d, None, None)
            .expect("unit weights need no propensities")
    }
}

fn required<'a>(
    kind: EstimandKind,
    arm: Arm,
    fit: Option<&'a LogitFit>,
) -> Result<&'a LogitFit, WeightError> {
    let f = fit.ok_or(WeightError::MissingFit {
        kind,
        arm: arm.label(),
    })?;
    if !f.converged {
        return Err(WeightError::Unconverged { arm: arm.label() });
    }
    Ok(f)
}

/// Which receipt models a kind's weights depend on: (treatment, control).
pub fn required_fits(kind: EstimandKind, variant: ShareVariant) -> (bool, bool) {
    match kind {
        EstimandKind::Itt | EstimandKind::CaceTIv => (false, false),
        EstimandKind::CaceT => (true, false),
        EstimandKind::CaceTcIpw | EstimandKind::Tau11 => (true, true),
        EstimandKind::CaceTcRatio => match variant {
            ShareVariant::FromT => (false, true),
            ShareVariant::FromC => (true, false),
            ShareVariant::Average => (true, true),
        },
    }
}

pub fn build_weights(
    kind: EstimandKind,
    d: &Dataset,
    fit_t: Option<&LogitFit>,
    fit_c: Option<&LogitFit>,
) -> Result<WeightVector, WeightError> {
    build_weights_variant(kind, ShareVariant::FromT, d, fit_t, fit_c)
}

pub fn build_weights_variant(
    kind: EstimandKind,
    variant: ShareVariant,
    d: &Dataset,
    fit_t: Option<&LogitFit>,
    fit_c: Option<&LogitFit>,
) -> Result<WeightVector, WeightError> {
    let (need_t, need_c) = required_fits(kind, variant);
    let e1 = if need_t {
        Some(predict_dataset(required(kind, Arm::Treatment, fit_t)?, d)?.values)
    } else {
        None
    };
    let e0 = if need_c {
        Some(predict_dataset(required(kind, Arm::Control, fit_c)?, d)?.values)
    } else {
        None
    };
    weights_from_propensities(kind, variant, d, e1.as_deref(), e0.as_deref())
}

/// Applies a kind's weight rule to explicit per-row propensities.
///
/// `e1`/`e0` hold treatment/control-model propensities for every row.
/// Values of exactly 0 or 1 are accepted here, which lets callers force
/// degenerate propensities.
pub fn weights_from_propensities(
    kind: EstimandKind,
    variant: ShareVariant,
    d: &Dataset,
    e1: Option<&[f64]>,
    e0: Option<&[f64]>,
) -> Result<WeightVector, WeightError> {
    let n = d.n_rows();
    for e in [e1, e0].into_iter().flatten() {
        if e.len() != n {
            return Err(WeightError::Length {
                got: e.len(),
                expected: n,
            });
        }
    }
    let get = |e: Option<&[f64]>, arm: Arm, i: usize| -> Result<f64, WeightError> {
        e.map(|v| v[i]).ok_or(WeightError::MissingFit {
            kind,
            arm: arm.label(),
        })
    };
    let mut values = Vec::with_capacity(n);
    for (i, o) in d.rows().iter().enumerate() {
        let t = o.treat;
        let r = f64::from(u8::from(o.receipt));
        let w = match kind {
            EstimandKind::Itt => 1.0,
            EstimandKind::CaceT => {
                if t {
                    r
                } else {
                    get(e1, Arm::Treatment, i)?
                }
            }
            EstimandKind::CaceTIv => {
                if t {
                    r
                } else {
                    0.0
                }
            }
            EstimandKind::CaceTcRatio => match (variant, t) {
                (ShareVariant::FromT, true) => r + (1.0 - r) * get(e0, Arm::Control, i)?,
                (ShareVariant::FromT, false) => 0.0,
                (ShareVariant::FromC, true) => 0.0,
                (ShareVariant::FromC, false) => r + (1.0 - r) * get(e1, Arm::Treatment, i)?,
                (ShareVariant::Average, _) => return Err(WeightError::AverageShare),
            },
            EstimandKind::CaceTcIpw => {
                let e = if t {
                    get(e0, Arm::Control, i)?
                } else {
                    get(e1, Arm::Treatment, i)?
                };
                r + (1.0 - r) * e
            }
            EstimandKind::Tau11 => {
                let e = if t {
                    get(e0, Arm::Control, i)?
                } else {
                    get(e1, Arm::Treatment, i)?
                };
                r * e
            }
        };
        values.push(w);
    }
    let (mut sum_t, mut sum_c) = (0.0, 0.0);
    for (o, w) in d.rows().iter().zip(&values) {
        if o.treat {
            sum_t += w;
        } else {
            sum_c += w;
        }
    }
    if kind.forms_weighted_means() {
        for (arm, s) in [("treatment", sum_t), ("control", sum_c)] {
            if !(s > 0.0) {
                return Err(WeightError::ZeroTotal { kind, arm });
            }
        }
    } else {
        let (arm, s) = match (kind, variant) {
            (EstimandKind::CaceTcRatio, ShareVariant::FromC) => ("control", sum_c),
            _ => ("treatment", sum_t),
        };
        if !(s > 0.0) {
            return Err(WeightError::ZeroTotal { kind, arm });
        }
    }
    Ok(WeightVector {
        kind,
        values,
        sum_t,
        sum_c,
    })
}

/// Stratum shares estimated from weight means, plus the four derived
/// principal-stratum shares.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrataShares {
    pub pi_cace_t: f64,
    pub pi_cace_tc_from_t: f64,
    pub pi_cace_tc_from_c: f64,
    /// The CACE-TC share used for the back-out.
    pub pi_cace_tc: f64,
    pub variant: ShareVariant,
    pub pi_11: f64,
    pub pi_10: f64,
    pub pi_01: f64,
    pub pi_00: f64,
    pub warnings: Vec<String>,
}

impl StrataShares {
    /// Back-out of the four stratum shares from the CACE-T share, a
    /// CACE-TC share and the control receipt rate.
    pub fn from_components(
        pi_cace_t: f64,
        pi_cace_tc_from_t: f64,
        pi_cace_tc_from_c: f64,
        control_receipt_rate: f64,
        variant: ShareVariant,
    ) -> Self {
        let pi_cace_tc = match variant {
            ShareVariant::FromT => pi_cace_tc_from_t,
            ShareVariant::FromC => pi_cace_tc_from_c,
            ShareVariant::Average => 0.5 * (pi_cace_tc_from_t + pi_cace_tc_from_c),
        };
        let pi_00 = 1.0 - pi_cace_tc;
        let pi_01 = pi_cace_tc - pi_cace_t;
        let pi_11 = control_receipt_rate - pi_01;
        let pi_10 = pi_cace_t - pi_11;
        let mut warnings = Vec::new();
        for (name, v) in [
            ("pi_11", pi_11),
            ("pi_10", pi_10),
            ("pi_01", pi_01),
            ("pi_00", pi_00),
        ] {
            if !(0.0..=1.0).contains(&v) {
                warnings.push(format!("derived share {name} = {v:.4} outside [0, 1]"));
            }
        }
        Self {
            pi_cace_t,
            pi_cace_tc_from_t,
            pi_cace_tc_from_c,
            pi_cace_tc,
            variant,
            pi_11,
            pi_10,
            pi_01,
            pi_00,
            warnings,
        }
    }
}

pub fn estimate_strata_shares(
    d: &Dataset,
    fit_t: &LogitFit,
    fit_c: &LogitFit,
    variant: ShareVariant,
) -> Result<StrataShares, WeightError> {
    let w = build_weights(EstimandKind::CaceTcIpw, d, Some(fit_t), Some(fit_c))?;
    Ok(shares_from_weights(d, &w, variant))
}

/// Shares from an already-built CACE-TC (IPW) weight vector.
pub fn shares_from_weights(d: &Dataset, w: &WeightVector, variant: ShareVariant) -> StrataShares {
    let (mean_t, mean_c) = weight_balance_summary(w, d);
    StrataShares::from_components(
        d.receipt_rate(true),
        mean_t,
        mean_c,
        d.receipt_rate(false),
        variant,
    )
}

/// Per-arm mean weights (treatment, control).
pub fn weight_balance_summary(w: &WeightVector, d: &Dataset) -> (f64, f64) {
    let (n1, n0) = (d.n_rows_arm(true) as f64, d.n_rows_arm(false) as f64);
    (w.sum_t / n1, w.sum_c / n0)
}
