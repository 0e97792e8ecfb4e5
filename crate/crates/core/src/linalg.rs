//! Small dense linear-algebra helpers with condition monitoring.

use nalgebra::{DMatrix, DVector};

/// Systems whose 2-norm condition estimate exceeds this are treated as singular.
pub const CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct Singular {
    pub condition: f64,
    /// Right singular vector of the smallest singular value.
    pub null_direction: Vec<f64>,
}

/// Ratio of largest to smallest singular value (infinite when rank deficient).
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

fn singular(a: &DMatrix<f64>, condition: f64) -> Singular {
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let (imin, _) =
        svd.singular_values
            .iter()
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc },
            );
    Singular {
        condition,
        null_direction: v_t.row(imin).iter().copied().collect(),
    }
}

/// Solves `a x = b` after checking the condition estimate.
pub fn solve_checked(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, Singular> {
    let cond = condition_number(a);
    if !(cond <= CONDITION_LIMIT) {
        return Err(singular(a, cond));
    }
    a.clone().lu().solve(b).ok_or_else(|| singular(a, cond))
}

/// Inverse of `a` after checking the condition estimate.
pub fn invert_checked(a: &DMatrix<f64>) -> Result<DMatrix<f64>, Singular> {
    let cond = condition_number(a);
    if !(cond <= CONDITION_LIMIT) {
        return Err(singular(a, cond));
    }
    a.clone().try_inverse().ok_or_else(|| singular(a, cond))
}
