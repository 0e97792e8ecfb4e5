//! Brute-force oracles and random fixtures shared by the integration tests.
//!
//! None of the arithmetic here goes through the library's solvers: the
//! logit oracle is a refined grid search on the exact log-likelihood, the
//! WLS oracle is a Gauss-Jordan inversion on plain vectors, and quantiles
//! come from a sort.

#![allow(dead_code)]

use cace_core::data::{Dataset, Observation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub quantity: String,
    pub main: f64,
    pub oracle: f64,
    pub abs_gap: f64,
    pub rel_gap: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    pub fn new(quantity: &str, main: f64, oracle: f64, tolerance: f64) -> Self {
        let abs_gap = (main - oracle).abs();
        let rel_gap = abs_gap / oracle.abs().max(f64::MIN_POSITIVE);
        Self {
            quantity: quantity.to_string(),
            main,
            oracle,
            abs_gap,
            rel_gap,
            tolerance,
            pass: abs_gap <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GridError {
    Boundary { bound: f64 },
    TooManyParameters(usize),
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Exact Bernoulli log-likelihood of an intercept-plus-slopes logit.
pub fn logit_loglik(x: &[Vec<f64>], r: &[bool], params: &[f64]) -> f64 {
    x.iter()
        .zip(r)
        .map(|(row, &ri)| {
            let eta = params[0]
                + row
                    .iter()
                    .zip(&params[1..])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            let p = sigmoid(eta);
            if ri {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum()
}

fn grid_search(
    x: &[Vec<f64>],
    r: &[bool],
    centre: &[f64],
    half: f64,
    points: usize,
) -> (Vec<f64>, f64, bool) {
    let dim = centre.len();
    let step = 2.0 * half / (points - 1) as f64;
    let mut best = centre.to_vec();
    let mut best_ll = f64::NEG_INFINITY;
    let mut edge_ll = f64::NEG_INFINITY;
    let mut idx = vec![0usize; dim];
    loop {
        let cand: Vec<f64> = (0..dim)
            .map(|a| centre[a] - half + idx[a] as f64 * step)
            .collect();
        let ll = logit_loglik(x, r, &cand);
        if ll > best_ll {
            best_ll = ll;
            best = cand;
        }
        if idx.iter().any(|&i| i == 0 || i == points - 1) {
            edge_ll = edge_ll.max(ll);
        }
        let mut a = 0;
        loop {
            if a == dim {
                // Ties count as the edge: a flat ridge running off the grid
                // is still an unbounded maximiser.
                let on_edge = edge_ll >= best_ll - 1e-12 * best_ll.abs().max(1.0);
                return (best, best_ll, on_edge);
            }
            idx[a] += 1;
            if idx[a] < points {
                break;
            }
            idx[a] = 0;
            a += 1;
        }
    }
}

/// Refined grid maximiser of the logit likelihood (at most two slopes).
///
/// The first level covers `[-bound, bound]` in every coordinate; each later
/// level re-centres on the incumbent with a window of four previous steps.
/// A first-level maximiser on the edge doubles the bound (up to three
/// times) and then reports `Boundary`.
pub fn oracle_logit_grid(
    x: &[Vec<f64>],
    r: &[bool],
    bound: f64,
    levels: usize,
) -> Result<Vec<f64>, GridError> {
    let dim = 1 + x.first().map_or(0, Vec::len);
    if dim > 3 {
        return Err(GridError::TooManyParameters(dim));
    }
    let points = if dim == 3 { 41 } else { 81 };
    let mut b = bound;
    for attempt in 0..4 {
        let (mut best, _, edge) = grid_search(x, r, &vec![0.0; dim], b, points);
        if edge {
            if attempt == 3 {
                return Err(GridError::Boundary { bound: b });
            }
            b *= 2.0;
            continue;
        }
        let mut step = 2.0 * b / (points - 1) as f64;
        for _ in 1..levels {
            let (nb, _, _) = grid_search(x, r, &best, 2.0 * step, points);
            best = nb;
            step = 4.0 * step / (points - 1) as f64;
        }
        return Ok(best);
    }
    unreachable!()
}

/// `(D'WD)^-1 D'Wy` by Gauss-Jordan inversion with partial pivoting.
pub fn oracle_wls_normal_equations(
    design: &[Vec<f64>],
    weights: &[f64],
    y: &[f64],
) -> Result<Vec<f64>, String> {
    let p = design[0].len();
    let mut a = vec![vec![0.0; p]; p];
    let mut b = vec![0.0; p];
    for ((row, &w), &yi) in design.iter().zip(weights).zip(y) {
        for i in 0..p {
            b[i] += w * row[i] * yi;
            for j in 0..p {
                a[i][j] += w * row[i] * row[j];
            }
        }
    }
    let inv = invert(a)?;
    Ok((0..p)
        .map(|i| (0..p).map(|j| inv[i][j] * b[j]).sum())
        .collect())
}

pub fn invert(mut a: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>, String> {
    let p = a.len();
    let scale = a.iter().flatten().fold(0.0f64, |s, v| s.max(v.abs()));
    let mut inv: Vec<Vec<f64>> = (0..p)
        .map(|i| (0..p).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for c in 0..p {
        let piv = (c..p)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .unwrap();
        if a[piv][c].abs() <= 1e-12 * scale {
            return Err(format!("singular matrix at column {c}"));
        }
        a.swap(c, piv);
        inv.swap(c, piv);
        let d = a[c][c];
        for j in 0..p {
            a[c][j] /= d;
            inv[c][j] /= d;
        }
        for i in 0..p {
            if i != c {
                let f = a[i][c];
                if f != 0.0 {
                    for j in 0..p {
                        a[i][j] -= f * a[c][j];
                        inv[i][j] -= f * inv[c][j];
                    }
                }
            }
        }
    }
    Ok(inv)
}

/// Central-difference `-d mean_score / d xi'` with per-coordinate step
/// `step * max(1, |xi_i|)`.
pub fn oracle_gamma_finite_difference(
    mean_score: impl Fn(&[f64]) -> Vec<f64>,
    xi: &[f64],
    step: f64,
) -> Vec<Vec<f64>> {
    let p = xi.len();
    let mut g = vec![vec![0.0; p]; p];
    for c in 0..p {
        let h = step * xi[c].abs().max(1.0);
        let mut up = xi.to_vec();
        let mut dn = xi.to_vec();
        up[c] += h;
        dn[c] -= h;
        let (su, sd) = (mean_score(&up), mean_score(&dn));
        for r in 0..p {
            g[r][c] = -(su[r] - sd[r]) / (2.0 * h);
        }
    }
    g
}

/// Largest entrywise relative error, with entries below `floor` times the
/// largest analytic entry compared on that scale.
pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>], floor: f64) -> f64 {
    let scale = analytic
        .iter()
        .flatten()
        .fold(0.0f64, |s, v| s.max(v.abs()));
    let mut worst = 0.0f64;
    for (ra, rn) in analytic.iter().zip(numeric) {
        for (a, n) in ra.iter().zip(rn) {
            let den = a.abs().max(floor * scale);
            worst = worst.max((a - n).abs() / den);
        }
    }
    worst
}

/// Type-7 quantile by sorting.
pub fn sort_quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (v.len() as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < v.len() {
        v[lo] * (1.0 - frac) + v[lo + 1] * frac
    } else {
        v[lo]
    }
}

/// Strata shares under independent receipt draws with no covariates:
/// (pi11, pi10, pi01, pi00).
pub fn oracle_strata_shares_closed_form(rbar_t: f64, rbar_c: f64) -> [f64; 4] {
    [
        rbar_t * rbar_c,
        rbar_t * (1.0 - rbar_c),
        (1.0 - rbar_t) * rbar_c,
        (1.0 - rbar_t) * (1.0 - rbar_c),
    ]
}

/// Known-weights components from cluster weighted means, with no
/// covariates: returns (s2_1, s2_0, m1, m0).
pub fn c5_components_no_covariates(
    d: &Dataset,
    w: &[f64],
    mu_t: f64,
    mu_c: f64,
) -> (f64, f64, f64, f64) {
    let mut acc = [(0.0, 0.0, 0usize); 2];
    let mut per_cluster = Vec::new();
    for c in d.clusters() {
        let wj: f64 = c.rows.clone().map(|i| w[i]).sum();
        let ywj: f64 = c.rows.clone().map(|i| w[i] * d.rows()[i].outcome).sum();
        let resid_mean = if wj > 0.0 {
            ywj / wj - if c.treat { mu_t } else { mu_c }
        } else {
            0.0
        };
        per_cluster.push((c.treat, wj, resid_mean));
        let a = &mut acc[usize::from(c.treat)];
        a.0 += wj;
        a.2 += 1;
    }
    let mut ss = [0.0; 2];
    for (t, wj, rm) in per_cluster {
        ss[usize::from(t)] += (wj * rm).powi(2);
    }
    let s2 = |t: usize| {
        let (wsum, _, m) = acc[t];
        let wbar = wsum / m as f64;
        ss[t] / ((m as f64 - 1.0) * wbar * wbar)
    };
    (s2(1), s2(0), acc[1].2 as f64, acc[0].2 as f64)
}

/// Small random clustered dataset with covariates `x1..x{ncov}`. Clusters
/// alternate between arms; receipt follows a logit in the covariates so
/// both receipt values appear in each arm with high probability.
pub fn random_dataset(
    seed: u64,
    m: usize,
    n_per: (usize, usize),
    ncov: usize,
    k: usize,
    k1: usize,
    k0: usize,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Normal::new(0.0, 1.0).unwrap();
    let names: Vec<String> = (1..=ncov).map(|i| format!("x{i}")).collect();
    let mut obs = Vec::new();
    for j in 0..m {
        let t = j % 2 == 0;
        let n = rng.gen_range(n_per.0..=n_per.1);
        let uj = z.sample(&mut rng) * 0.5;
        for _ in 0..n {
            let x: Vec<f64> = (0..ncov).map(|_| z.sample(&mut rng)).collect();
            let eta = 0.3 + 0.8 * x.first().copied().unwrap_or(0.0)
                - 0.5 * x.get(1).copied().unwrap_or(0.0);
            let r = rng.gen::<f64>() < sigmoid(eta);
            let y = 1.0
                + if t { 0.4 } else { 0.0 }
                + 0.6 * x.iter().sum::<f64>()
                + uj
                + z.sample(&mut rng);
            obs.push(Observation {
                cluster_id: format!("k{j}"),
                treat: t,
                receipt: r,
                outcome: y,
                covariates: x,
            });
        }
    }
    Dataset::from_observations(
        obs,
        names.clone(),
        names[..k].to_vec(),
        names[..k1].to_vec(),
        names[..k0].to_vec(),
    )
    .unwrap()
}

/// Dataset whose receipt has variation in every arm (retries seeds).
pub fn random_fittable_dataset(
    seed: u64,
    m: usize,
    n_per: (usize, usize),
    ncov: usize,
    k: usize,
    k1: usize,
    k0: usize,
) -> Dataset {
    for s in 0.. {
        let d = random_dataset(
            seed.wrapping_mul(1_000_003).wrapping_add(s),
            m,
            n_per,
            ncov,
            k,
            k1,
            k0,
        );
        let ok = |t: bool| {
            let rate = d.receipt_rate(t);
            rate > 0.0 && rate < 1.0
        };
        if ok(true) && ok(false) {
            return d;
        }
    }
    unreachable!()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
