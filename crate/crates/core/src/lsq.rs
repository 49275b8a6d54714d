//! Sign-constrained linear least squares and a numerical rank test.

use nalgebra::{DMatrix, DVector};

/// Admissible sign of one unknown.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarSign {
    /// Pinned to zero.
    Zero,
    NonNeg,
    Free,
}

#[derive(Clone, Debug)]
pub struct LsqSolution {
    pub x: DVector<f64>,
    /// `A x - b`.
    pub residual: DVector<f64>,
    pub iterations: usize,
    /// False if the active-set loop hit its cap.
    pub converged: bool,
}

/// Minimum-norm least-squares solution restricted to the columns in `cols`.
fn subsolve(a: &DMatrix<f64>, b: &DVector<f64>, cols: &[usize]) -> DVector<f64> {
    let mut x = DVector::zeros(a.ncols());
    if cols.is_empty() {
        return x;
    }
    let sub = a.select_columns(cols);
    let svd = sub.svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * 1e-13 * (a.nrows().max(cols.len()) as f64);
    let s = svd.solve(b, eps).expect("svd was computed with u and v");
    for (k, &c) in cols.iter().enumerate() {
        x[c] = s[k];
    }
    x
}

/// Solves `min ||A x - b||_2` with each `x_i` restricted by `signs[i]`.
///
/// Lawson-Hanson active-set method; free variables stay in the passive set
/// throughout.
pub fn sign_constrained_lsq(a: &DMatrix<f64>, b: &DVector<f64>, signs: &[VarSign]) -> LsqSolution {
    assert_eq!(a.ncols(), signs.len(), "one sign per column");
    assert_eq!(a.nrows(), b.len(), "rhs length");
    let n = a.ncols();
    let scale = a.amax().max(1.0) * b.amax().max(1.0);
    let tol = 1e-12 * scale * (n.max(1) as f64);

    let mut passive: Vec<bool> = signs.iter().map(|s| *s == VarSign::Free).collect();
    let cols = |p: &[bool]| -> Vec<usize> { (0..n).filter(|&i| p[i]).collect() };
    let mut x = subsolve(a, b, &cols(&passive));
    let max_iter = 3 * n + 10;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iter {
        iterations += 1;
        let w = a.transpose() * (b - a * &x);
        let pick = (0..n)
            .filter(|&i| signs[i] == VarSign::NonNeg && !passive[i] && w[i] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = pick else {
            converged = true;
            break;
        };
        passive[j] = true;
        loop {
            let s = subsolve(a, b, &cols(&passive));
            let blocking: Vec<usize> = (0..n)
                .filter(|&i| passive[i] && signs[i] == VarSign::NonNeg && s[i] <= 0.0)
                .collect();
            if blocking.is_empty() {
                x = s;
                break;
            }
            let step = blocking
                .iter()
                .map(|&i| {
                    let d = x[i] - s[i];
                    if d > 0.0 {
                        x[i] / d
                    } else {
                        0.0
                    }
                })
                .fold(1.0_f64, f64::min);
            x += (s - &x) * step;
            for i in 0..n {
                if passive[i] && signs[i] == VarSign::NonNeg && x[i] <= tol.min(1e-15) {
                    passive[i] = false;
                    x[i] = 0.0;
                }
            }
        }
    }
    for i in 0..n {
        match signs[i] {
            VarSign::Zero => x[i] = 0.0,
            VarSign::NonNeg => x[i] = x[i].max(0.0),
            VarSign::Free => {}
        }
    }
    let residual = a * &x - b;
    LsqSolution {
        x,
        residual,
        iterations,
        converged,
    }
}

/// Nonnegative least squares.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> LsqSolution {
    sign_constrained_lsq(a, b, &vec![VarSign::NonNeg; a.ncols()])
}

/// Numerical rank of the rows of `m` and the condition number
/// `sigma_max / sigma_min` over the `min(rows, cols)` singular values.
///
/// An empty matrix has full rank and condition number 1.
pub fn row_rank(m: &DMatrix<f64>, rel_tol: f64) -> (usize, f64) {
    if m.nrows() == 0 {
        return (0, 1.0);
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.max();
    if smax == 0.0 {
        return (0, f64::INFINITY);
    }
    let rank = sv.iter().filter(|&&s| s > rel_tol * smax).count();
    let smin = if m.nrows() > m.ncols() { 0.0 } else { sv.min() };
    (rank, if smin > 0.0 { smax / smin } else { f64::INFINITY })
}
