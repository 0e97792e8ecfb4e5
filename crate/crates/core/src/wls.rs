//! Weighted least squares in the two-group-mean parameterization
//! `y = T mu1 + (1 - T) mu0 + X beta` (no separate intercept).

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::linalg::{self, CONDITION_LIMIT};

#[derive(Debug, Error, PartialEq)]
pub enum WlsError {
    #[error("weight vector has {got} entries, dataset has {expected} rows")]
    Length { got: usize, expected: usize },
    #[error("total weight in the {0} group is not positive")]
    ZeroArmWeight(&'static str),
    #[error("design is rank deficient under the weights (condition {condition:.3e} > {CONDITION_LIMIT:e}); offending columns: {}", columns.join(", "))]
    RankDeficient {
        condition: f64,
        columns: Vec<String>,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WlsFit {
    pub mu_t: f64,
    pub mu_c: f64,
    pub beta: Vec<f64>,
    pub covariate_names: Vec<String>,
    /// y - fitted, for every row (including zero-weight rows).
    pub residuals: Vec<f64>,
    pub ybar_w_t: f64,
    pub ybar_w_c: f64,
    pub xbar_w_t: Vec<f64>,
    pub xbar_w_c: Vec<f64>,
}

impl WlsFit {
    /// Decomposition `(ybar1 - ybar0) - (xbar1 - xbar0) beta`; equals
    /// `mu_t - mu_c` by the normal equations.
    pub fn decomposed_effect(&self) -> f64 {
        let adj: f64 = self
            .xbar_w_t
            .iter()
            .zip(&self.xbar_w_c)
            .zip(&self.beta)
            .map(|((a, b), c)| (a - b) * c)
            .sum();
        (self.ybar_w_t - self.ybar_w_c) - adj
    }
}

pub fn wls_treatment_effect(f: &WlsFit) -> f64 {
    f.mu_t - f.mu_c
}

/// Solves the weighted normal equations for `(mu1, mu0, beta)`.
pub fn fit_wls(d: &Dataset, weights: &[f64], covariates: &[String]) -> Result<WlsFit, WlsError> {
    let n = d.n_rows();
    if weights.len() != n {
        return Err(WlsError::Length {
            got: weights.len(),
            expected: n,
        });
    }
    let idx = d.covariate_indices(covariates)?;
    let k = idx.len();
    let p = k + 2;
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let mut z = vec![0.0; p];
    let (mut wt, mut wc) = (0.0, 0.0);
    let (mut yt, mut yc) = (0.0, 0.0);
    let mut xt = vec![0.0; k];
    let mut xc = vec![0.0; k];
    for (o, &w) in d.rows().iter().zip(weights) {
        let t = if o.treat { 1.0 } else { 0.0 };
        z[0] = t;
        z[1] = 1.0 - t;
        for (j, &c) in idx.iter().enumerate() {
            z[2 + j] = o.covariates[c];
        }
        if w != 0.0 {
            for a in 0..p {
                let wa = w * z[a];
                xty[a] += wa * o.outcome;
                for b in 0..=a {
                    xtx[(a, b)] += wa * z[b];
                }
            }
        }
        if o.treat {
            wt += w;
            yt += w * o.outcome;
            for j in 0..k {
                xt[j] += w * z[2 + j];
            }
        } else {
            wc += w;
            yc += w * o.outcome;
            for j in 0..k {
                xc[j] += w * z[2 + j];
            }
        }
    }
    if !(wt > 0.0) {
        return Err(WlsError::ZeroArmWeight("treatment"));
    }
    if !(wc > 0.0) {
        return Err(WlsError::ZeroArmWeight("control"));
    }
    for a in 0..p {
        for b in 0..a {
            xtx[(b, a)] = xtx[(a, b)];
        }
    }
    let column_name = |j: usize| -> String {
        match j {
            0 => "T".to_string(),
            1 => "1-T".to_string(),
            _ => covariates[j - 2].clone(),
        }
    };
    // Rank check on the unit-diagonal scaling so covariate units don't matter.
    let scale: Vec<f64> = (0..p).map(|j| xtx[(j, j)].sqrt()).collect();
    if let Some(j) = scale.iter().position(|&s| !(s > 0.0)) {
        return Err(WlsError::RankDeficient {
            condition: f64::INFINITY,
            columns: vec![column_name(j)],
        });
    }
    let scaled = DMatrix::from_fn(p, p, |a, b| xtx[(a, b)] / (scale[a] * scale[b]));
    let rhs = DVector::from_fn(p, |a, _| xty[a] / scale[a]);
    let sol = linalg::solve_checked(&scaled, &rhs).map_err(|e| {
        let columns = e
            .null_direction
            .iter()
            .enumerate()
            .filter(|(_, v)| v.abs() > 0.1)
            .map(|(j, _)| column_name(j))
            .collect();
        WlsError::RankDeficient {
            condition: e.condition,
            columns,
        }
    })?;
    let coef: Vec<f64> = (0..p).map(|a| sol[a] / scale[a]).collect();
    let residuals = d
        .rows()
        .iter()
        .map(|o| {
            let base = if o.treat { coef[0] } else { coef[1] };
            let xb: f64 = idx
                .iter()
                .zip(&coef[2..])
                .map(|(&c, b)| o.covariates[c] * b)
                .sum();
            o.outcome - base - xb
        })
        .collect();
    Ok(WlsFit {
        mu_t: coef[0],
        mu_c: coef[1],
        beta: coef[2..].to_vec(),
        covariate_names: covariates.to_vec(),
        residuals,
        ybar_w_t: yt / wt,
        ybar_w_c: yc / wc,
        xbar_w_t: xt.iter().map(|v| v / wt).collect(),
        xbar_w_c: xc.iter().map(|v| v / wc).collect(),
    })
}
