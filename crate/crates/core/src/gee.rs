//! Stacked estimating equations and empirical sandwich variances.
//!
//! The WLS outcome model and the receipt logits are treated as one
//! M-estimation problem. For each cluster `j` the stacked score `psi_j(xi)`
//! collects the first-order conditions of every component; the variance of
//! `xi_hat` is `Gamma^-1 Delta Gamma^-T / m` with
//!
//! * `Gamma = (1/m) sum_j -d psi_j / d xi'` (analytic, see [`StackedProblem::gamma_hat`])
//! * `Delta = (1/m) sum_j psi_j psi_j'`
//!
//! Because the IPW weights are functions of the logit parameters, the
//! WLS-by-logit block of `Gamma` carries the effect of estimating the
//! weights. A known-weights alternative based on cluster-level residual
//! totals is provided by [`known_weights_variance`].

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::linalg::{self, CONDITION_LIMIT};
use crate::logit::{logistic, LogitFit};
use crate::weights::ShareVariant;
use crate::wls::WlsFit;

#[derive(Debug, Error, PartialEq)]
pub enum VarianceError {
    #[error("information matrix is singular (condition {condition:.3e} > {CONDITION_LIMIT:e}); reduce the number of covariates")]
    SingularGamma { condition: f64 },
    #[error("parameter vector has length {got}, layout expects {expected}")]
    Layout { got: usize, expected: usize },
    #[error("missing component for the stacked score: {0}")]
    MissingComponent(&'static str),
    #[error("too few clusters in the {arm} group for the known-weights variance (denominator {denominator:.3})")]
    TooFewClusters { arm: &'static str, denominator: f64 },
    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("degrees of freedom must be at least 1, got {0}")]
    BadDf(f64),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error: {0}")]
    Io(String),
}

/// Which stacked system to assemble.
#[derive(Debug, Clone, PartialEq)]
pub enum Stack {
    /// WLS rows only, with weights treated as known.
    Fixed(Vec<f64>),
    CaceT,
    CaceTcIpw,
    Tau11,
    /// ITT regression plus the CACE-TC share and ratio rows.
    Ratio(ShareVariant),
    /// ITT regression plus the IV ratio row.
    Iv,
}

impl Stack {
    fn uses_logit_t(&self) -> bool {
        matches!(
            self,
            Stack::CaceT | Stack::CaceTcIpw | Stack::Tau11 | Stack::Ratio(ShareVariant::FromC)
        )
    }

    fn uses_logit_c(&self) -> bool {
        matches!(
            self,
            Stack::CaceTcIpw | Stack::Tau11 | Stack::Ratio(ShareVariant::FromT)
        )
    }

    fn has_share(&self) -> bool {
        matches!(self, Stack::Ratio(_))
    }

    fn has_ratio(&self) -> bool {
        matches!(self, Stack::Ratio(_) | Stack::Iv)
    }

    pub fn weighted_outcome(&self) -> bool {
        matches!(
            self,
            Stack::Fixed(_) | Stack::CaceT | Stack::CaceTcIpw | Stack::Tau11
        )
    }
}

/// Names and index ranges of the stacked parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamLayout {
    pub names: Vec<String>,
    pub k: usize,
    pub k1: usize,
    pub k0: usize,
    /// Start of the treatment-logit block, if present.
    pub logit_t: Option<usize>,
    pub logit_c: Option<usize>,
    pub share: Option<usize>,
    pub ratio: Option<usize>,
}

impl ParamLayout {
    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Contrast picking the target effect: the ratio parameter when present,
    /// otherwise `mu1 - mu0`.
    pub fn contrast(&self) -> Vec<f64> {
        let mut l = vec![0.0; self.dim()];
        match self.ratio {
            Some(i) => l[i] = 1.0,
            None => {
                l[0] = 1.0;
                l[1] = -1.0;
            }
        }
        l
    }
}

/// Per-cluster stacked scores, one row per cluster (dataset cluster order).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub psi: DMatrix<f64>,
}

impl ScoreMatrix {
    pub fn column_sums(&self) -> Vec<f64> {
        self.psi.row_sum().iter().copied().collect()
    }

    pub fn delta_hat(&self) -> DMatrix<f64> {
        let m = self.psi.nrows() as f64;
        self.psi.transpose() * &self.psi / m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SandwichVariance {
    pub gamma_hat: DMatrix<f64>,
    pub delta_hat: DMatrix<f64>,
    /// `Gamma^-1 Delta Gamma^-T`, times `g` when the correction is on.
    pub v_hat: DMatrix<f64>,
    pub variance_of_contrast: f64,
    pub se_of_contrast: f64,
    pub g_correction: Option<f64>,
}

struct Inputs {
    n: usize,
    treat: Vec<bool>,
    receipt: Vec<f64>,
    y: Vec<f64>,
    x: Vec<f64>,
    x1: Vec<f64>,
    x0: Vec<f64>,
}

/// A stacked estimating-equation system bound to a dataset.
pub struct StackedProblem<'a> {
    d: &'a Dataset,
    stack: Stack,
    layout: ParamLayout,
    inp: Inputs,
}

fn gather(d: &Dataset, names: &[String]) -> Result<Vec<f64>, DataError> {
    let idx = d.covariate_indices(names)?;
    let mut out = Vec::with_capacity(d.n_rows() * idx.len());
    for o in d.rows() {
        out.extend(idx.iter().map(|&i| o.covariates[i]));
    }
    Ok(out)
}

#[inline]
fn dot1(a: &[f64], x: &[f64]) -> f64 {
    a[0] + a[1..].iter().zip(x).map(|(p, q)| p * q).sum::<f64>()
}

impl<'a> StackedProblem<'a> {
    /// Covariate lists come from the dataset's WLS / logit name lists.
    pub fn new(stack: Stack, d: &'a Dataset) -> Result<Self, VarianceError> {
        Self::with_covariates(
            stack,
            d,
            &d.covariate_names_wls,
            &d.covariate_names_logit_t,
            &d.covariate_names_logit_c,
        )
    }

    pub fn with_covariates(
        stack: Stack,
        d: &'a Dataset,
        wls: &[String],
        logit_t: &[String],
        logit_c: &[String],
    ) -> Result<Self, VarianceError> {
        if let Stack::Fixed(w) = &stack {
            if w.len() != d.n_rows() {
                return Err(VarianceError::Layout {
                    got: w.len(),
                    expected: d.n_rows(),
                });
            }
        }
        let k = wls.len();
        let k1 = if stack.uses_logit_t() {
            logit_t.len()
        } else {
            0
        };
        let k0 = if stack.uses_logit_c() {
            logit_c.len()
        } else {
            0
        };
        let mut names = vec!["mu1".to_string(), "mu0".to_string()];
        names.extend(wls.iter().map(|n| format!("beta[{n}]")));
        let mut logit_t_start = None;
        let mut logit_c_start = None;
        if stack.uses_logit_t() {
            logit_t_start = Some(names.len());
            names.push("alpha1[intercept]".into());
            names.extend(logit_t.iter().map(|n| format!("alpha1[{n}]")));
        }
        if stack.uses_logit_c() {
            logit_c_start = Some(names.len());
            names.push("alpha0[intercept]".into());
            names.extend(logit_c.iter().map(|n| format!("alpha0[{n}]")));
        }
        let share = stack.has_share().then(|| {
            names.push("pi_cace_tc".into());
            names.len() - 1
        });
        let ratio = stack.has_ratio().then(|| {
            names.push("tau".into());
            names.len() - 1
        });
        let inp = Inputs {
            n: d.n_rows(),
            treat: d.rows().iter().map(|o| o.treat).collect(),
            receipt: d
                .rows()
                .iter()
                .map(|o| f64::from(u8::from(o.receipt)))
                .collect(),
            y: d.rows().iter().map(|o| o.outcome).collect(),
            x: gather(d, wls)?,
            x1: if stack.uses_logit_t() {
                gather(d, logit_t)?
            } else {
                Vec::new()
            },
            x0: if stack.uses_logit_c() {
                gather(d, logit_c)?
            } else {
                Vec::new()
            },
        };
        Ok(Self {
            d,
            stack,
            layout: ParamLayout {
                names,
                k,
                k1,
                k0,
                logit_t: logit_t_start,
                logit_c: logit_c_start,
                share,
                ratio,
            },
            inp,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn stack(&self) -> &Stack {
        &self.stack
    }

    pub fn n_clusters(&self) -> usize {
        self.d.n_clusters()
    }

    /// Assembles `xi_hat` from fitted components. `share` is the CACE-TC
    /// share for the ratio stack; the ratio parameter is derived from it.
    pub fn xi_hat(
        &self,
        wls: &WlsFit,
        fit_t: Option<&LogitFit>,
        fit_c: Option<&LogitFit>,
        share: Option<f64>,
    ) -> Result<Vec<f64>, VarianceError> {
        let mut xi = vec![wls.mu_t, wls.mu_c];
        xi.extend(&wls.beta);
        if self.layout.logit_t.is_some() {
            xi.extend(
                fit_t
                    .ok_or(VarianceError::MissingComponent("treatment logit"))?
                    .params(),
            );
        }
        if self.layout.logit_c.is_some() {
            xi.extend(
                fit_c
                    .ok_or(VarianceError::MissingComponent("control logit"))?
                    .params(),
            );
        }
        let itt = wls.mu_t - wls.mu_c;
        match self.stack {
            Stack::Ratio(_) => {
                let pi = share.ok_or(VarianceError::MissingComponent("CACE-TC share"))?;
                xi.push(pi);
                xi.push(itt / pi);
            }
            Stack::Iv => {
                let pi = self.d.receipt_rate(true);
                xi.push(itt / pi);
            }
            _ => {}
        }
        if xi.len() != self.layout.dim() {
            return Err(VarianceError::Layout {
                got: xi.len(),
                expected: self.layout.dim(),
            });
        }
        Ok(xi)
    }

    fn check(&self, xi: &[f64]) -> Result<(), VarianceError> {
        if xi.len() != self.layout.dim() {
            return Err(VarianceError::Layout {
                got: xi.len(),
                expected: self.layout.dim(),
            });
        }
        Ok(())
    }

    /// Per-row propensities at `xi` (NaN where the block is absent).
    fn propensities(&self, xi: &[f64], i: usize) -> (f64, f64) {
        let l = &self.layout;
        let e1 = l.logit_t.map_or(f64::NAN, |s| {
            logistic(dot1(
                &xi[s..s + 1 + l.k1],
                &self.inp.x1[i * l.k1..(i + 1) * l.k1],
            ))
        });
        let e0 = l.logit_c.map_or(f64::NAN, |s| {
            logistic(dot1(
                &xi[s..s + 1 + l.k0],
                &self.inp.x0[i * l.k0..(i + 1) * l.k0],
            ))
        });
        (e1, e0)
    }

    /// Outcome weight and its derivatives with respect to the treatment and
    /// control logit linear predictors.
    fn weight(&self, i: usize, e1: f64, e0: f64) -> (f64, f64, f64) {
        let t = self.inp.treat[i];
        let r = self.inp.receipt[i];
        match &self.stack {
            Stack::Fixed(w) => (w[i], 0.0, 0.0),
            Stack::CaceT => {
                if t {
                    (r, 0.0, 0.0)
                } else {
                    (e1, e1 * (1.0 - e1), 0.0)
                }
            }
            Stack::CaceTcIpw => {
                if t {
                    (r + (1.0 - r) * e0, 0.0, (1.0 - r) * e0 * (1.0 - e0))
                } else {
                    (r + (1.0 - r) * e1, (1.0 - r) * e1 * (1.0 - e1), 0.0)
                }
            }
            Stack::Tau11 => {
                if t {
                    (r * e0, 0.0, r * e0 * (1.0 - e0))
                } else {
                    (r * e1, r * e1 * (1.0 - e1), 0.0)
                }
            }
            Stack::Ratio(_) | Stack::Iv => (1.0, 0.0, 0.0),
        }
    }

    fn residual(&self, xi: &[f64], i: usize) -> f64 {
        let k = self.layout.k;
        let base = if self.inp.treat[i] { xi[0] } else { xi[1] };
        let xb: f64 = self.inp.x[i * k..(i + 1) * k]
            .iter()
            .zip(&xi[2..2 + k])
            .map(|(a, b)| a * b)
            .sum();
        self.inp.y[i] - base - xb
    }

    /// Outcome weights implied by `xi` (unit weights for the ratio stacks).
    pub fn weights_at(&self, xi: &[f64]) -> Result<Vec<f64>, VarianceError> {
        self.check(xi)?;
        Ok((0..self.inp.n)
            .map(|i| {
                let (e1, e0) = self.propensities(xi, i);
                self.weight(i, e1, e0).0
            })
            .collect())
    }

    /// Stacked cluster scores `psi_j(xi)`.
    pub fn scores(&self, xi: &[f64]) -> Result<ScoreMatrix, VarianceError> {
        self.check(xi)?;
        let l = &self.layout;
        let p = l.dim();
        let k = l.k;
        let mut psi = DMatrix::zeros(self.d.n_clusters(), p);
        for (j, c) in self.d.clusters().iter().enumerate() {
            let tj = c.treat;
            let mut row = vec![0.0; p];
            let mut share_sum = 0.0;
            let mut receipt_sum = 0.0;
            for i in c.rows.clone() {
                let (e1, e0) = self.propensities(xi, i);
                let (w, _, _) = self.weight(i, e1, e0);
                let u = self.residual(xi, i);
                let r = self.inp.receipt[i];
                let wu = w * u;
                if tj {
                    row[0] += wu;
                } else {
                    row[1] += wu;
                }
                for (v, xv) in self.inp.x[i * k..(i + 1) * k].iter().enumerate() {
                    row[2 + v] += xv * wu;
                }
                if let Some(s) = l.logit_t {
                    if tj {
                        let eta = r - e1;
                        row[s] += eta;
                        for (v, xv) in self.inp.x1[i * l.k1..(i + 1) * l.k1].iter().enumerate() {
                            row[s + 1 + v] += xv * eta;
                        }
                    }
                }
                if let Some(s) = l.logit_c {
                    if !tj {
                        let eta = r - e0;
                        row[s] += eta;
                        for (v, xv) in self.inp.x0[i * l.k0..(i + 1) * l.k0].iter().enumerate() {
                            row[s + 1 + v] += xv * eta;
                        }
                    }
                }
                match self.stack {
                    Stack::Ratio(ShareVariant::FromC) => {
                        if !tj {
                            share_sum += r + (1.0 - r) * e1;
                        }
                    }
                    Stack::Ratio(_) => {
                        if tj {
                            share_sum += r + (1.0 - r) * e0;
                        }
                    }
                    _ => {}
                }
                receipt_sum += r;
            }
            let nj = c.size() as f64;
            let itt = xi[0] - xi[1];
            match self.stack {
                Stack::Ratio(variant) => {
                    let (ps, pr) = (l.share.unwrap(), l.ratio.unwrap());
                    let in_arm = match variant {
                        ShareVariant::FromC => !tj,
                        _ => tj,
                    };
                    if in_arm {
                        row[ps] = nj * xi[ps] - share_sum;
                    }
                    row[pr] = itt - xi[pr] * xi[ps];
                }
                Stack::Iv => {
                    let pr = l.ratio.unwrap();
                    if tj {
                        row[pr] = itt * nj - xi[pr] * receipt_sum;
                    }
                }
                _ => {}
            }
            psi.row_mut(j).copy_from_slice(&row);
        }
        Ok(ScoreMatrix { psi })
    }

    /// Analytic `Gamma(xi) = (1/m) sum_j -d psi_j / d xi'`.
    pub fn gamma_hat(&self, xi: &[f64]) -> Result<DMatrix<f64>, VarianceError> {
        self.check(xi)?;
        let l = &self.layout;
        let p = l.dim();
        let k = l.k;
        let mut g = DMatrix::<f64>::zeros(p, p);
        // WLS regressors z = (T, 1-T, X)
        let mut z = vec![0.0; 2 + k];
        let mut z1 = vec![0.0; 1 + l.k1];
        let mut z0 = vec![0.0; 1 + l.k0];
        for c in self.d.clusters() {
            let tj = c.treat;
            let nj = c.size() as f64;
            for i in c.rows.clone() {
                let (e1, e0) = self.propensities(xi, i);
                let (w, c1, c0) = self.weight(i, e1, e0);
                let u = self.residual(xi, i);
                let r = self.inp.receipt[i];
                z[0] = if tj { 1.0 } else { 0.0 };
                z[1] = 1.0 - z[0];
                z[2..].copy_from_slice(&self.inp.x[i * k..(i + 1) * k]);
                // A: d(w u)/d(mu, beta) = -w z
                if w != 0.0 {
                    for a in 0..2 + k {
                        for b in 0..2 + k {
                            g[(a, b)] += w * z[a] * z[b];
                        }
                    }
                }
                if let Some(s) = l.logit_t {
                    z1[0] = 1.0;
                    z1[1..].copy_from_slice(&self.inp.x1[i * l.k1..(i + 1) * l.k1]);
                    // B: weights move with alpha1
                    if c1 != 0.0 {
                        for a in 0..2 + k {
                            for b in 0..1 + l.k1 {
                                g[(a, s + b)] -= c1 * u * z[a] * z1[b];
                            }
                        }
                    }
                    // C: logistic information on the treatment arm
                    if tj {
                        let v = e1 * (1.0 - e1);
                        for a in 0..1 + l.k1 {
                            for b in 0..1 + l.k1 {
                                g[(s + a, s + b)] += v * z1[a] * z1[b];
                            }
                        }
                    }
                }
                if let Some(s) = l.logit_c {
                    z0[0] = 1.0;
                    z0[1..].copy_from_slice(&self.inp.x0[i * l.k0..(i + 1) * l.k0]);
                    if c0 != 0.0 {
                        for a in 0..2 + k {
                            for b in 0..1 + l.k0 {
                                g[(a, s + b)] -= c0 * u * z[a] * z0[b];
                            }
                        }
                    }
                    if !tj {
                        let v = e0 * (1.0 - e0);
                        for a in 0..1 + l.k0 {
                            for b in 0..1 + l.k0 {
                                g[(s + a, s + b)] += v * z0[a] * z0[b];
                            }
                        }
                    }
                }
                if let Stack::Ratio(variant) = self.stack {
                    let ps = l.share.unwrap();
                    match variant {
                        ShareVariant::FromC => {
                            if !tj {
                                let s = l.logit_t.unwrap();
                                let v = (1.0 - r) * e1 * (1.0 - e1);
                                for b in 0..1 + l.k1 {
                                    g[(ps, s + b)] += v * z1[b];
                                }
                            }
                        }
                        _ => {
                            if tj {
                                let s = l.logit_c.unwrap();
                                let v = (1.0 - r) * e0 * (1.0 - e0);
                                for b in 0..1 + l.k0 {
                                    g[(ps, s + b)] += v * z0[b];
                                }
                            }
                        }
                    }
                }
                if matches!(self.stack, Stack::Iv) && tj {
                    g[(l.ratio.unwrap(), l.ratio.unwrap())] += r;
                }
            }
            match self.stack {
                Stack::Ratio(variant) => {
                    let (ps, pr) = (l.share.unwrap(), l.ratio.unwrap());
                    let in_arm = match variant {
                        ShareVariant::FromC => !tj,
                        _ => tj,
                    };
                    if in_arm {
                        g[(ps, ps)] -= nj;
                    }
                    g[(pr, 0)] -= 1.0;
                    g[(pr, 1)] += 1.0;
                    g[(pr, ps)] += xi[pr];
                    g[(pr, pr)] += xi[ps];
                }
                Stack::Iv => {
                    if tj {
                        let pr = l.ratio.unwrap();
                        g[(pr, 0)] -= nj;
                        g[(pr, 1)] += nj;
                    }
                }
                _ => {}
            }
        }
        Ok(g / self.d.n_clusters() as f64)
    }

    /// Full sandwich at `xi` for the layout's default contrast.
    pub fn sandwich(
        &self,
        xi: &[f64],
        g_correction: bool,
    ) -> Result<SandwichVariance, VarianceError> {
        let scores = self.scores(xi)?;
        let gamma = self.gamma_hat(xi)?;
        let g = g_correction.then(|| small_sample_factor(self.d.n_clusters(), self.d.n_rows()));
        sandwich(&scores, &gamma, &self.layout.contrast(), g)
    }

    /// Mean score `(1/m) sum_j psi_j(xi)`; the object differentiated by `gamma_hat`.
    pub fn mean_score(&self, xi: &[f64]) -> Result<Vec<f64>, VarianceError> {
        let s = self.scores(xi)?;
        let m = s.psi.nrows() as f64;
        Ok(s.column_sums().into_iter().map(|v| v / m).collect())
    }
}

/// `g = (m / (m - 1)) ((n - 1) / (n - 2))`.
pub fn small_sample_factor(m: usize, n: usize) -> f64 {
    let (m, n) = (m as f64, n as f64);
    (m / (m - 1.0)) * ((n - 1.0) / (n - 2.0))
}

/// `V = Gamma^-1 Delta Gamma^-T` (scaled by `g` when given) and the
/// variance `lambda V lambda' / m` of the contrast.
pub fn sandwich(
    scores: &ScoreMatrix,
    gamma: &DMatrix<f64>,
    lambda: &[f64],
    g: Option<f64>,
) -> Result<SandwichVariance, VarianceError> {
    let m = scores.psi.nrows() as f64;
    let delta = scores.delta_hat();
    let inv = linalg::invert_checked(gamma).map_err(|e| VarianceError::SingularGamma {
        condition: e.condition,
    })?;
    let mut v = &inv * &delta * inv.transpose();
    if let Some(g) = g {
        v *= g;
    }
    let l = DVector::from_column_slice(lambda);
    let var = (l.transpose() * &v * &l)[(0, 0)] / m;
    Ok(SandwichVariance {
        gamma_hat: gamma.clone(),
        delta_hat: delta,
        v_hat: v,
        variance_of_contrast: var,
        se_of_contrast: var.max(0.0).sqrt(),
        g_correction: g,
    })
}

/// Cluster-level pieces of the known-weights variance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KnownWeightsVariance {
    pub s2_t: f64,
    pub s2_c: f64,
    pub m_t: usize,
    pub m_c: usize,
    pub p_w: f64,
    pub variance: f64,
}

/// Known-weights variance from cluster-aggregated weighted residuals.
///
/// `k` is the number of WLS covariates. Cluster totals are formed as
/// `sum_i w_ij u_ij`, which equals `w_j (ybar_Wj - yhatbar_Wj)` and stays
/// defined for clusters with zero total weight.
pub fn known_weights_variance(
    d: &Dataset,
    wls: &WlsFit,
    w: &[f64],
) -> Result<KnownWeightsVariance, VarianceError> {
    let k = wls.beta.len() as f64;
    let (mut m_t, mut m_c) = (0usize, 0usize);
    let (mut wsum_t, mut wsum_c) = (0.0, 0.0);
    let (mut ss_t, mut ss_c) = (0.0, 0.0);
    for c in d.clusters() {
        let wj: f64 = c.rows.clone().map(|i| w[i]).sum();
        let total: f64 = c.rows.clone().map(|i| w[i] * wls.residuals[i]).sum();
        if c.treat {
            m_t += 1;
            wsum_t += wj;
            ss_t += total * total;
        } else {
            m_c += 1;
            wsum_c += wj;
            ss_c += total * total;
        }
    }
    let p_w = wsum_t / (wsum_t + wsum_c);
    let wbar_t = wsum_t / m_t as f64;
    let wbar_c = wsum_c / m_c as f64;
    let den_t = m_t as f64 - k * p_w - 1.0;
    let den_c = m_c as f64 - k * (1.0 - p_w) - 1.0;
    if !(den_t > 0.0) {
        return Err(VarianceError::TooFewClusters {
            arm: "treatment",
            denominator: den_t,
        });
    }
    if !(den_c > 0.0) {
        return Err(VarianceError::TooFewClusters {
            arm: "control",
            denominator: den_c,
        });
    }
    let s2_t = ss_t / (den_t * wbar_t * wbar_t);
    let s2_c = ss_c / (den_c * wbar_c * wbar_c);
    Ok(KnownWeightsVariance {
        s2_t,
        s2_c,
        m_t,
        m_c,
        p_w,
        variance: s2_t / m_t as f64 + s2_c / m_c as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Inference {
    pub t_stat: f64,
    pub p_value: f64,
    pub critical_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Two-sided t test and interval at confidence `level`.
pub fn inference(
    point: f64,
    variance: f64,
    df: f64,
    level: f64,
) -> Result<Inference, VarianceError> {
    if !(variance > 0.0) {
        return Err(VarianceError::NonPositiveVariance(variance));
    }
    if !(df >= 1.0) {
        return Err(VarianceError::BadDf(df));
    }
    let se = variance.sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|_| VarianceError::BadDf(df))?;
    let t_stat = point / se;
    let p_value = (2.0 * (1.0 - dist.cdf(t_stat.abs()))).min(1.0);
    let critical_value = dist.inverse_cdf(0.5 + level / 2.0);
    Ok(Inference {
        t_stat,
        p_value,
        critical_value,
        ci_low: point - critical_value * se,
        ci_high: point + critical_value * se,
    })
}

/// Writes psi, Gamma and Delta as delimited text blocks.
pub fn write_debug_dump<W: Write>(
    layout: &ParamLayout,
    scores: &ScoreMatrix,
    sw: &SandwichVariance,
    mut out: W,
) -> Result<(), VarianceError> {
    let io = |e: std::io::Error| VarianceError::Io(e.to_string());
    let header = layout.names.join(",");
    let block = |title: &str, m: &DMatrix<f64>, out: &mut W| -> Result<(), VarianceError> {
        writeln!(out, "# {title}").map_err(io)?;
        writeln!(out, "{header}").map_err(io)?;
        for r in m.row_iter() {
            let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(",")).map_err(io)?;
        }
        Ok(())
    };
    block("psi", &scores.psi, &mut out)?;
    block("gamma", &sw.gamma_hat, &mut out)?;
    block("delta", &sw.delta_hat, &mut out)?;
    Ok(())
}
