//! Group-specific logistic propensity models for service receipt.
//!
//! Each research arm gets its own model, fit by maximum likelihood on that
//! arm's rows only. The fitted models are then used to predict receipt
//! probabilities for rows of the *other* arm when building IPW weights.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::linalg::{self, CONDITION_LIMIT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Arm {
    Treatment,
    Control,
}

impl Arm {
    pub fn is_treatment(self) -> bool {
        matches!(self, Arm::Treatment)
    }

    pub fn of(treat: bool) -> Self {
        if treat {
            Arm::Treatment
        } else {
            Arm::Control
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Arm::Treatment => "treatment",
            Arm::Control => "control",
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum FitError {
    #[error("{arm} arm has no rows with receipt={value}; the receipt model is not estimable")]
    NoVariation { arm: &'static str, value: u8 },
    #[error("{arm} logit did not converge after {iterations} iterations (max |score| = {max_abs_score:e})")]
    NotConverged {
        arm: &'static str,
        iterations: usize,
        max_abs_score: f64,
    },
    #[error("{arm} logit: quasi-complete separation detected ({reason})")]
    Separation { arm: &'static str, reason: String },
    #[error("covariate matrix has {got} columns, model expects {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitOptions {
    /// Convergence when max |score| falls to or below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Any |coefficient| above this is read as separation.
    pub coefficient_bound: f64,
}

impl Default for LogitOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 100,
            coefficient_bound: 30.0,
        }
    }
}

/// Fitted receipt model for one arm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogitFit {
    pub group: Arm,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub covariate_names: Vec<String>,
    pub converged: bool,
    pub iterations: usize,
    pub max_abs_score: f64,
    pub loglik: f64,
    /// Log-likelihood after each accepted Newton step (starting point first).
    #[serde(skip)]
    pub loglik_trace: Vec<f64>,
}

impl LogitFit {
    pub fn k(&self) -> usize {
        self.coefficients.len()
    }

    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.intercept
            + self
                .coefficients
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }

    /// Parameter vector (intercept first).
    pub fn params(&self) -> Vec<f64> {
        std::iter::once(self.intercept)
            .chain(self.coefficients.iter().copied())
            .collect()
    }
}

/// Predicted receipt probabilities for every row of some matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityVector {
    pub values: Vec<f64>,
    pub group_of_model: Arm,
}

const ONE_MINUS_ULP: f64 = 1.0 - f64::EPSILON / 2.0;

/// Numerically stable logistic function, kept strictly inside (0, 1).
pub fn logistic(x: f64) -> f64 {
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, ONE_MINUS_ULP)
}

/// log(1 + exp(x)) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Bernoulli log-likelihood of an intercept-first parameter vector.
pub fn log_likelihood(design: &[Vec<f64>], receipt: &[bool], params: &[f64]) -> f64 {
    design
        .iter()
        .zip(receipt)
        .map(|(x, &r)| {
            let eta = params[0] + x.iter().zip(&params[1..]).map(|(a, b)| a * b).sum::<f64>();
            if r {
                eta - softplus(eta)
            } else {
                -softplus(eta)
            }
        })
        .sum()
}

struct NewtonState {
    score: DVector<f64>,
    hessian: DMatrix<f64>,
}

fn newton_state(design: &[Vec<f64>], receipt: &[bool], params: &[f64]) -> NewtonState {
    let p = params.len();
    let mut score = DVector::zeros(p);
    let mut hessian = DMatrix::zeros(p, p);
    let mut z = vec![0.0; p];
    for (x, &r) in design.iter().zip(receipt) {
        z[0] = 1.0;
        z[1..].copy_from_slice(x);
        let eta: f64 = z.iter().zip(params).map(|(a, b)| a * b).sum();
        let e = logistic(eta);
        let resid = f64::from(u8::from(r)) - e;
        let v = e * (1.0 - e);
        for a in 0..p {
            score[a] += z[a] * resid;
            for b in 0..=a {
                hessian[(a, b)] += v * z[a] * z[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            hessian[(b, a)] = hessian[(a, b)];
        }
    }
    NewtonState { score, hessian }
}

/// Damped Newton-Raphson maximum likelihood on an explicit design.
///
/// `design` rows hold covariates only; the intercept is implicit.
pub fn fit_logit_design(
    arm: Arm,
    design: &[Vec<f64>],
    receipt: &[bool],
    covariate_names: Vec<String>,
    opts: &LogitOptions,
) -> Result<LogitFit, FitError> {
    let label = arm.label();
    let ones = receipt.iter().filter(|&&r| r).count();
    if ones == 0 {
        return Err(FitError::NoVariation {
            arm: label,
            value: 1,
        });
    }
    if ones == receipt.len() {
        return Err(FitError::NoVariation {
            arm: label,
            value: 0,
        });
    }
    let k = covariate_names.len();
    if let Some(row) = design.iter().find(|row| row.len() != k) {
        return Err(FitError::DimensionMismatch {
            got: row.len(),
            expected: k,
        });
    }
    let rbar = ones as f64 / receipt.len() as f64;
    let mut params = vec![0.0; k + 1];
    params[0] = (rbar / (1.0 - rbar)).ln();
    let mut loglik = log_likelihood(design, receipt, &params);
    let mut trace = vec![loglik];
    let mut iterations = 0;
    loop {
        let state = newton_state(design, receipt, &params);
        let max_abs_score = state.score.amax();
        let step = match linalg::solve_checked(&state.hessian, &state.score) {
            Ok(s) => s,
            Err(e) => {
                return Err(FitError::Separation {
                    arm: label,
                    reason: format!(
                        "information matrix numerically singular (condition {:.3e} > {CONDITION_LIMIT:e})",
                        e.condition
                    ),
                })
            }
        };
        // Under separation the score vanishes while Newton steps stay O(1),
        // so convergence also requires a negligible step.
        let step_small = step
            .iter()
            .zip(&params)
            .all(|(s, p)| s.abs() <= 1e-6 * (1.0 + p.abs()));
        if max_abs_score <= opts.tolerance && step_small {
            return Ok(LogitFit {
                group: arm,
                intercept: params[0],
                coefficients: params[1..].to_vec(),
                covariate_names,
                converged: true,
                iterations,
                max_abs_score,
                loglik,
                loglik_trace: trace,
            });
        }
        if iterations >= opts.max_iterations {
            return Err(FitError::NotConverged {
                arm: label,
                iterations,
                max_abs_score,
            });
        }
        let mut scale = 1.0;
        let mut accepted = false;
        if step_small {
            // Inside the quadratic basin the likelihood change is below
            // rounding, so the line search cannot rank candidates.
            params = params.iter().zip(step.iter()).map(|(p, s)| p + s).collect();
            loglik = log_likelihood(design, receipt, &params);
            accepted = true;
        }
        for _ in 0..if accepted { 0 } else { 40 } {
            let trial: Vec<f64> = params
                .iter()
                .zip(step.iter())
                .map(|(p, s)| p + scale * s)
                .collect();
            let ll = log_likelihood(design, receipt, &trial);
            if ll >= loglik {
                params = trial;
                loglik = ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        iterations += 1;
        if !accepted {
            // no ascent left at machine precision, yet the score is above tolerance
            let state = newton_state(design, receipt, &params);
            return Err(FitError::NotConverged {
                arm: label,
                iterations,
                max_abs_score: state.score.amax(),
            });
        }
        trace.push(loglik);
        if let Some(c) = params.iter().find(|c| c.abs() > opts.coefficient_bound) {
            return Err(FitError::Separation {
                arm: label,
                reason: format!(
                    "coefficient magnitude {:.3} exceeds {}",
                    c.abs(),
                    opts.coefficient_bound
                ),
            });
        }
    }
}

/// Extracts an arm's covariate rows and receipt flags for the given names.
pub fn arm_design(
    d: &Dataset,
    arm: Arm,
    names: &[String],
) -> Result<(Vec<Vec<f64>>, Vec<bool>), DataError> {
    let idx = d.covariate_indices(names)?;
    let mut x = Vec::new();
    let mut r = Vec::new();
    for row in d.rows().iter().filter(|o| o.treat == arm.is_treatment()) {
        x.push(idx.iter().map(|&i| row.covariates[i]).collect());
        r.push(row.receipt);
    }
    Ok((x, r))
}

pub fn fit_logit(d: &Dataset, arm: Arm) -> Result<LogitFit, FitError> {
    fit_logit_with(d, arm, &LogitOptions::default())
}

pub fn fit_logit_with(d: &Dataset, arm: Arm, opts: &LogitOptions) -> Result<LogitFit, FitError> {
    let names = match arm {
        Arm::Treatment => d.covariate_names_logit_t.clone(),
        Arm::Control => d.covariate_names_logit_c.clone(),
    };
    let (x, r) = arm_design(d, arm, &names)?;
    fit_logit_design(arm, &x, &r, names, opts)
}

/// `rows` is n x k with columns aligned to the fit's covariates.
pub fn predict_propensity(f: &LogitFit, rows: &DMatrix<f64>) -> Result<PropensityVector, FitError> {
    if rows.ncols() != f.k() {
        return Err(FitError::DimensionMismatch {
            got: rows.ncols(),
            expected: f.k(),
        });
    }
    let values = rows
        .row_iter()
        .map(|row| {
            let eta = f.intercept
                + row
                    .iter()
                    .zip(&f.coefficients)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            logistic(eta)
        })
        .collect();
    Ok(PropensityVector {
        values,
        group_of_model: f.group,
    })
}

/// Propensities for every row of the dataset (both arms).
pub fn predict_dataset(f: &LogitFit, d: &Dataset) -> Result<PropensityVector, FitError> {
    let idx = d.covariate_indices(&f.covariate_names)?;
    let values = d
        .rows()
        .iter()
        .map(|o| {
            let x: Vec<f64> = idx.iter().map(|&i| o.covariates[i]).collect();
            logistic(f.linear_predictor(&x))
        })
        .collect();
    Ok(PropensityVector {
        values,
        group_of_model: f.group,
    })
}

/// r - e over the fit's own arm rows, in dataset row order.
pub fn logit_residuals(f: &LogitFit, d: &Dataset) -> Result<Vec<f64>, FitError> {
    let (x, r) = arm_design(d, f.group, &f.covariate_names)?;
    Ok(x.iter()
        .zip(r)
        .map(|(row, ri)| f64::from(u8::from(ri)) - logistic(f.linear_predictor(row)))
        .collect())
}
