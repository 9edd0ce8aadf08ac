//! Dense linear-algebra helpers shared by the identification and control code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value cutoff factor used for numerical rank decisions.
pub const SVD_CUTOFF: f64 = 1e-12;

pub fn ensure_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub fn ensure_finite_vec(v: &DVector<f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Singular values together with the rank implied by the cutoff
/// `max(rows, cols) * sigma_max * SVD_CUTOFF`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RankReport {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub sigma_max: f64,
    /// Smallest singular value above the cutoff (0 when the matrix is zero).
    pub sigma_min_retained: f64,
    pub full_row_rank: bool,
}

fn cutoff(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * sigma_max * SVD_CUTOFF
}

pub fn rank_report(a: &DMatrix<f64>) -> RankReport {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return RankReport { rows, cols, rank: 0, sigma_max: 0.0, sigma_min_retained: 0.0, full_row_rank: rows == 0 };
    }
    let sv = a.clone().svd(false, false).singular_values;
    let sigma_max = sv.iter().cloned().fold(0.0, f64::max);
    let tol = cutoff(rows, cols, sigma_max);
    let retained: Vec<f64> = sv.iter().cloned().filter(|&s| s > tol && s > 0.0).collect();
    let rank = retained.len();
    let sigma_min_retained = retained.iter().cloned().fold(f64::INFINITY, f64::min);
    RankReport {
        rows,
        cols,
        rank,
        sigma_max,
        sigma_min_retained: if rank == 0 { 0.0 } else { sigma_min_retained },
        full_row_rank: rank == rows,
    }
}

/// Moore-Penrose pseudo-inverse by thin SVD; returns the inverse and the numerical rank.
pub fn pinv(a: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return (DMatrix::zeros(cols, rows), 0);
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let sv = svd.singular_values;
    let sigma_max = sv.iter().cloned().fold(0.0, f64::max);
    let tol = cutoff(rows, cols, sigma_max);
    let mut out = DMatrix::zeros(cols, rows);
    let mut rank = 0;
    for (i, &s) in sv.iter().enumerate() {
        if s > tol && s > 0.0 {
            rank += 1;
            // out += v_i * u_i^T / s
            let vi = v_t.row(i).transpose();
            let ui = u.column(i);
            out.ger(1.0 / s, &vi, &ui, 1.0);
        }
    }
    (out, rank)
}

#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub x: DMatrix<f64>,
    pub rank: usize,
    /// Rows of the regressor `A`; `rank < rows` means the solution is the minimum-norm one.
    pub rows: usize,
    pub rank_deficient: bool,
    pub sigma_max: f64,
}

/// Solves `min_X ||B - X A||_F^2 + ridge ||X||_F^2`.
///
/// With `ridge == 0` the result is `B A^+`; a rank-deficient `A` yields the
/// minimum-norm solution and sets `rank_deficient`.
pub fn solve_least_squares(a: &DMatrix<f64>, b: &DMatrix<f64>, ridge: f64) -> Result<LeastSquares> {
    if a.ncols() != b.ncols() {
        return Err(Error::Dimension(format!(
            "regressor has {} columns but target has {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::InvalidArgument(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    ensure_finite(a, "least-squares regressor")?;
    ensure_finite(b, "least-squares target")?;
    let report = rank_report(a);
    if ridge == 0.0 {
        let (p, rank) = pinv(a);
        let x = b * p;
        if rank < a.nrows() {
            log::warn!("least squares: regressor rank {} < {} rows, returning minimum-norm solution", rank, a.nrows());
        }
        return Ok(LeastSquares {
            x,
            rank,
            rows: a.nrows(),
            rank_deficient: rank < a.nrows(),
            sigma_max: report.sigma_max,
        });
    }
    // X (A A^T + ridge I) = B A^T
    let gram = a * a.transpose() + DMatrix::identity(a.nrows(), a.nrows()) * ridge;
    let rhs = b * a.transpose();
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("ridge Gram matrix is not positive definite".into()))?;
    let x = chol.solve(&rhs.transpose()).transpose();
    Ok(LeastSquares {
        x,
        rank: report.rank,
        rows: a.nrows(),
        rank_deficient: report.rank < a.nrows(),
        sigma_max: report.sigma_max,
    })
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn min_eigenvalue_sym(a: &DMatrix<f64>) -> f64 {
    symmetrize(a).symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Vertically stacks matrices with a common column count.
pub fn vstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.first().map(|b| b.ncols()).unwrap_or(0);
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "vstack: column mismatch");
        out.view_mut((r, 0), b.shape()).copy_from(*b);
        r += b.nrows();
    }
    out
}

pub fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.first().map(|b| b.nrows()).unwrap_or(0);
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        assert_eq!(b.nrows(), rows, "hstack: row mismatch");
        out.view_mut((0, c), b.shape()).copy_from(*b);
        c += b.ncols();
    }
    out
}
