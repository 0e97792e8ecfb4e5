//! Specification checks for the receipt models: covariate balance,
//! the propensity density identity, mean-weight equality and overlap.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::logit::{predict_dataset, Arm, FitError, LogitFit, PropensityVector};
use crate::weights::{weight_balance_summary, WeightVector};

#[derive(Debug, Error, PartialEq)]
pub enum DiagError {
    #[error("{arm} group has no rows with receipt={value}")]
    EmptyReceiptGroup { arm: &'static str, value: u8 },
    #[error("vector has {got} entries, dataset has {expected} rows")]
    Length { got: usize, expected: usize },
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error: {0}")]
    Io(String),
}

fn io(e: std::io::Error) -> DiagError {
    DiagError::Io(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceDirection {
    /// Treatment-group recipients against weighted controls.
    TVsWeightedC,
    /// Control-group recipients against weighted treatments.
    CVsWeightedT,
}

impl BalanceDirection {
    pub fn key(self) -> &'static str {
        match self {
            BalanceDirection::TVsWeightedC => "t_vs_weighted_c",
            BalanceDirection::CVsWeightedT => "c_vs_weighted_t",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceRow {
    pub covariate: String,
    pub actual_mean: f64,
    pub weighted_mean: f64,
    pub actual_sd: f64,
    pub binary: bool,
    /// `None` when the actual group's SD is zero.
    pub std_diff: Option<f64>,
    pub flag_010: bool,
    pub flag_025: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceTable {
    pub direction: BalanceDirection,
    pub n_actual: usize,
    pub weighted_total: f64,
    pub rows: Vec<BalanceRow>,
}

/// SD of a 0/1 variable with mean `p`.
pub fn binary_sd(p: f64) -> f64 {
    (p * (1.0 - p)).sqrt()
}

pub fn standardized_difference(
    actual_mean: f64,
    weighted_mean: f64,
    actual_sd: f64,
) -> Option<f64> {
    (actual_sd > 0.0).then(|| (actual_mean - weighted_mean) / actual_sd)
}

/// Balance of model covariates between the actual recipients of one arm
/// and the other arm reweighted by `w`.
///
/// Only the other arm's entries of `w` are read.
pub fn balance_table(
    d: &Dataset,
    w: &[f64],
    covariates: &[String],
    direction: BalanceDirection,
) -> Result<BalanceTable, DiagError> {
    if w.len() != d.n_rows() {
        return Err(DiagError::Length {
            got: w.len(),
            expected: d.n_rows(),
        });
    }
    let idx = d.covariate_indices(covariates)?;
    let actual_arm = direction == BalanceDirection::TVsWeightedC;
    let actual: Vec<usize> = (0..d.n_rows())
        .filter(|&i| d.rows()[i].treat == actual_arm && d.rows()[i].receipt)
        .collect();
    let other: Vec<usize> = (0..d.n_rows())
        .filter(|&i| d.rows()[i].treat != actual_arm)
        .collect();
    if actual.is_empty() {
        return Err(DiagError::EmptyReceiptGroup {
            arm: Arm::of(actual_arm).label(),
            value: 1,
        });
    }
    let weighted_total: f64 = other.iter().map(|&i| w[i]).sum();
    let mut rows = Vec::with_capacity(idx.len());
    for (name, &c) in covariates.iter().zip(&idx) {
        let vals: Vec<f64> = actual.iter().map(|&i| d.rows()[i].covariates[c]).collect();
        let n = vals.len() as f64;
        let actual_mean = vals.iter().sum::<f64>() / n;
        let binary = vals.iter().all(|&v| v == 0.0 || v == 1.0);
        let actual_sd = if binary {
            binary_sd(actual_mean)
        } else if vals.len() > 1 {
            (vals.iter().map(|v| (v - actual_mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let weighted_mean = if weighted_total > 0.0 {
            other
                .iter()
                .map(|&i| w[i] * d.rows()[i].covariates[c])
                .sum::<f64>()
                / weighted_total
        } else {
            f64::NAN
        };
        let std_diff = standardized_difference(actual_mean, weighted_mean, actual_sd);
        let a = std_diff.map_or(0.0, f64::abs);
        rows.push(BalanceRow {
            covariate: name.clone(),
            actual_mean,
            weighted_mean,
            actual_sd,
            binary,
            std_diff,
            flag_010: a > 0.10,
            flag_025: a > 0.25,
        });
    }
    Ok(BalanceTable {
        direction,
        n_actual: actual.len(),
        weighted_total,
        rows,
    })
}

impl BalanceTable {
    pub fn any_flag_025(&self) -> bool {
        self.rows.iter().any(|r| r.flag_025)
    }

    pub fn max_abs_std_diff(&self) -> f64 {
        self.rows
            .iter()
            .filter_map(|r| r.std_diff)
            .fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), DiagError> {
        writeln!(
            out,
            "direction,covariate,actual_mean,weighted_mean,actual_sd,std_diff,flag_0.10,flag_0.25"
        )
        .map_err(io)?;
        for r in &self.rows {
            let sd = r
                .std_diff
                .map_or_else(|| "undefined".to_string(), |v| v.to_string());
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                self.direction.key(),
                r.covariate,
                r.actual_mean,
                r.weighted_mean,
                r.actual_sd,
                sd,
                r.flag_010,
                r.flag_025
            )
            .map_err(io)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityCheck {
    pub arm: Arm,
    pub edges: Vec<f64>,
    pub lhs_density: Vec<f64>,
    pub rhs_density: Vec<f64>,
    pub omega_hat: f64,
    pub n_receipt: usize,
    pub n_no_receipt: usize,
    pub max_abs_gap: f64,
    pub l1_gap: f64,
}

pub const DEFAULT_BINS: usize = 20;

/// Density identity check for the receipt model of `fit.group`.
pub fn shaikh_density_check(fit: &LogitFit, d: &Dataset) -> Result<DensityCheck, DiagError> {
    shaikh_density_check_bins(fit, d, DEFAULT_BINS)
}

pub fn shaikh_density_check_bins(
    fit: &LogitFit,
    d: &Dataset,
    bins: usize,
) -> Result<DensityCheck, DiagError> {
    let p = predict_dataset(fit, d)?;
    let arm = fit.group;
    let mut e = Vec::new();
    let mut r = Vec::new();
    for (o, &v) in d.rows().iter().zip(&p.values) {
        if o.treat == arm.is_treatment() {
            e.push(v);
            r.push(o.receipt);
        }
    }
    density_check_from(arm, &e, &r, bins)
}

/// Histogram version of `f(q | r=1) = omega q/(1-q) f(q | r=0)` on a common
/// grid spanning the observed propensities. The right side is formed from
/// the r=0 rows' own `q/(1-q)` values rather than bin midpoints.
pub fn density_check_from(
    arm: Arm,
    e: &[f64],
    r: &[bool],
    bins: usize,
) -> Result<DensityCheck, DiagError> {
    let n1 = r.iter().filter(|&&v| v).count();
    let n0 = r.len() - n1;
    if n1 == 0 {
        return Err(DiagError::EmptyReceiptGroup {
            arm: arm.label(),
            value: 1,
        });
    }
    if n0 == 0 {
        return Err(DiagError::EmptyReceiptGroup {
            arm: arm.label(),
            value: 0,
        });
    }
    let lo = e.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (bins, width) = if hi > lo {
        (bins.max(1), (hi - lo) / bins as f64)
    } else {
        (1, 1.0)
    };
    let edges: Vec<f64> = (0..=bins).map(|b| lo + b as f64 * width).collect();
    let bin_of = |q: f64| (((q - lo) / width) as usize).min(bins - 1);
    let omega_hat = n0 as f64 / n1 as f64;
    let mut lhs = vec![0.0; bins];
    let mut rhs = vec![0.0; bins];
    for (&q, &ri) in e.iter().zip(r) {
        let b = bin_of(q);
        if ri {
            lhs[b] += 1.0;
        } else {
            rhs[b] += q / (1.0 - q);
        }
    }
    for v in &mut lhs {
        *v /= n1 as f64 * width;
    }
    for v in &mut rhs {
        *v *= omega_hat / (n0 as f64 * width);
    }
    let gaps = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs());
    let max_abs_gap = gaps.clone().fold(0.0, f64::max);
    let l1_gap = gaps.sum::<f64>() * width;
    Ok(DensityCheck {
        arm,
        edges,
        lhs_density: lhs,
        rhs_density: rhs,
        omega_hat,
        n_receipt: n1,
        n_no_receipt: n0,
        max_abs_gap,
        l1_gap,
    })
}

impl DensityCheck {
    /// Paired binned series for plotting.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), DiagError> {
        writeln!(out, "arm,bin_low,bin_high,lhs_density,rhs_density").map_err(io)?;
        for b in 0..self.lhs_density.len() {
            writeln!(
                out,
                "{},{},{},{},{}",
                self.arm.label(),
                self.edges[b],
                self.edges[b + 1],
                self.lhs_density[b],
                self.rhs_density[b]
            )
            .map_err(io)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanWeightEquality {
    pub mean_t: f64,
    pub mean_c: f64,
    pub diff: f64,
}

pub fn mean_weight_equality(w: &WeightVector, d: &Dataset) -> MeanWeightEquality {
    let (mean_t, mean_c) = weight_balance_summary(w, d);
    MeanWeightEquality {
        mean_t,
        mean_c,
        diff: mean_t - mean_c,
    }
}

pub const OVERLAP_LOW: f64 = 0.01;
pub const OVERLAP_HIGH: f64 = 0.99;
pub const QUANTILE_PROBS: [f64; 9] = [0.0, 0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmOverlap {
    pub arm: Arm,
    pub n: usize,
    /// Pairs of (probability, quantile) on `QUANTILE_PROBS`.
    pub quantiles: Vec<(f64, f64)>,
    pub min: f64,
    pub max: f64,
    pub below: usize,
    pub above: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapSummary {
    pub model: Arm,
    pub arms: Vec<ArmOverlap>,
    pub warnings: Vec<String>,
}

/// Linear-interpolation quantile of sorted data (`(n-1)p` rule).
fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn overlap_summary(p: &PropensityVector, d: &Dataset) -> Result<OverlapSummary, DiagError> {
    if p.values.len() != d.n_rows() {
        return Err(DiagError::Length {
            got: p.values.len(),
            expected: d.n_rows(),
        });
    }
    let mut arms = Vec::new();
    let mut warnings = Vec::new();
    for arm in [Arm::Treatment, Arm::Control] {
        let mut v: Vec<f64> = d
            .rows()
            .iter()
            .zip(&p.values)
            .filter(|(o, _)| o.treat == arm.is_treatment())
            .map(|(_, &e)| e)
            .collect();
        if v.is_empty() {
            continue;
        }
        v.sort_by(f64::total_cmp);
        let below = v.iter().filter(|&&e| e < OVERLAP_LOW).count();
        let above = v.iter().filter(|&&e| e > OVERLAP_HIGH).count();
        if below + above > 0 {
            warnings.push(format!(
                "{} {} model propensities outside [{OVERLAP_LOW}, {OVERLAP_HIGH}] in the {} group",
                below + above,
                p.group_of_model.label(),
                arm.label()
            ));
        }
        arms.push(ArmOverlap {
            arm,
            n: v.len(),
            quantiles: QUANTILE_PROBS
                .iter()
                .map(|&q| (q, quantile_sorted(&v, q)))
                .collect(),
            min: v[0],
            max: v[v.len() - 1],
            below,
            above,
        });
    }
    Ok(OverlapSummary {
        model: p.group_of_model,
        arms,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_e2_standardized_difference() {
        let sd = binary_sd(0.119);
        let v = standardized_difference(0.119, 0.095, sd).unwrap();
        assert!((v - 0.073).abs() <= 0.002, "{v}");
    }

    #[test]
    fn constant_propensity_identity() {
        let e = vec![0.5; 10];
        let r: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        let c = density_check_from(Arm::Treatment, &e, &r, 20).unwrap();
        assert_eq!(c.omega_hat, 1.0);
        assert_eq!(c.lhs_density, c.rhs_density);
        assert_eq!(c.lhs_density.len(), 1);
        assert_eq!(c.max_abs_gap, 0.0);
    }

    #[test]
    fn empty_receipt_group() {
        assert!(matches!(
            density_check_from(Arm::Control, &[0.3, 0.4], &[true, true], 20),
            Err(DiagError::EmptyReceiptGroup { value: 0, .. })
        ));
    }

    #[test]
    fn density_integrates_to_one() {
        let e: Vec<f64> = (0..200).map(|i| 0.1 + 0.8 * (i as f64) / 199.0).collect();
        let r: Vec<bool> = (0..200).map(|i| (i * 7) % 3 != 0).collect();
        let c = density_check_from(Arm::Treatment, &e, &r, 20).unwrap();
        let w = c.edges[1] - c.edges[0];
        let total: f64 = c.lhs_density.iter().sum::<f64>() * w;
        assert!((total - 1.0).abs() < 1e-12);
    }
}
