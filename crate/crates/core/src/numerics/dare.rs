//! Discrete algebraic Riccati equation.
//!
//! Solved with the structured doubling algorithm, followed by Newton-Kleinman
//! refinement when the closed-loop residual is above the target accuracy.

use nalgebra::DMatrix;

use super::linalg::{ensure_finite, spectral_radius, symmetrize};
use crate::error::{Error, Result};

pub const DARE_TOL: f64 = 1e-12;
pub const DARE_MAX_ITER: usize = 10_000;
const RESIDUAL_TARGET: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct DareSolution {
    pub p: DMatrix<f64>,
    /// Gain with the sign convention `u = K z`.
    pub k: DMatrix<f64>,
    pub iterations: usize,
    pub closed_loop_radius: f64,
    /// Frobenius norm of `(A+BK)' P (A+BK) - P + Q + K' R K`.
    pub residual: f64,
}

pub fn gain(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let btp = b.transpose() * p;
    let s = r + &btp * b;
    let rhs = &btp * a;
    let lu = s.lu();
    let sol = lu
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidArgument("R + B'PB is singular".into()))?;
    Ok(-sol)
}

/// `(A+BK)' P (A+BK) - P + Q + K' R K`; zero at the Riccati solution.
pub fn lyapunov_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
    k: &DMatrix<f64>,
) -> DMatrix<f64> {
    let acl = a + b * k;
    acl.transpose() * p * &acl - p + q + k.transpose() * r * k
}

fn check_inputs(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<()> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::Dimension(format!(
            "DARE with A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    ensure_finite(a, "A")?;
    ensure_finite(b, "B")?;
    ensure_finite(q, "Q")?;
    ensure_finite(r, "R")?;
    Ok(())
}

/// Solves `P = A'PA - A'PB (R + B'PB)^-1 B'PA + Q` for the stabilizing `P`.
pub fn solve_dare(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DareSolution> {
    check_inputs(a, b, q, r)?;
    let n = a.nrows();
    let r_chol = symmetrize(r)
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("R must be positive definite".into()))?;
    let eye = DMatrix::<f64>::identity(n, n);

    // Structured doubling: A_k, G_k (= B R^-1 B' initially), H_k -> P.
    let mut ak = a.clone();
    let mut gk = b * r_chol.solve(&b.transpose());
    let mut hk = symmetrize(q);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < DARE_MAX_ITER {
        iterations += 1;
        let w = &eye + &gk * &hk;
        let w_lu = w.lu();
        let winv_a = w_lu
            .solve(&ak)
            .ok_or_else(|| Error::NotStabilizable("doubling iteration became singular".into()))?;
        let winv_g = w_lu
            .solve(&gk)
            .ok_or_else(|| Error::NotStabilizable("doubling iteration became singular".into()))?;
        let a_next = &ak * &winv_a;
        let g_next = &gk + &ak * winv_g * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &winv_a;
        let h_next = symmetrize(&h_next);
        if !h_next.iter().all(|v| v.is_finite()) {
            return Err(Error::NotStabilizable("Riccati iterate diverged".into()));
        }
        let delta = (&h_next - &hk).norm();
        let scale = h_next.norm().max(1.0);
        ak = a_next;
        gk = symmetrize(&g_next);
        hk = h_next;
        if delta <= DARE_TOL * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NotConverged { what: "DARE doubling", iterations });
    }

    let mut p = hk;
    let mut k = gain(a, b, r, &p)?;
    let mut residual = lyapunov_residual(a, b, q, r, &p, &k).norm();
    // Newton-Kleinman refinement: P <- solution of the closed-loop Stein equation.
    for _ in 0..4 {
        if residual <= RESIDUAL_TARGET {
            break;
        }
        let acl = a + b * &k;
        let rhs = q + k.transpose() * r * &k;
        let p_new = match solve_stein(&acl, &rhs) {
            Some(p_new) => symmetrize(&p_new),
            None => break,
        };
        let k_new = gain(a, b, r, &p_new)?;
        let res_new = lyapunov_residual(a, b, q, r, &p_new, &k_new).norm();
        if res_new >= residual {
            break;
        }
        p = p_new;
        k = k_new;
        residual = res_new;
    }

    let closed_loop_radius = spectral_radius(&(a + b * &k));
    if closed_loop_radius >= 1.0 {
        return Err(Error::NotStabilizable(format!("closed-loop spectral radius {closed_loop_radius}")));
    }
    Ok(DareSolution { p, k, iterations, closed_loop_radius, residual })
}

/// Solves `X = A' X A + C` through the Kronecker form (small dimensions only).
pub fn solve_stein(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let at = a.transpose();
    let kron = at.kronecker(&at);
    let lhs = DMatrix::<f64>::identity(n * n, n * n) - kron;
    let rhs = nalgebra::DVector::from_column_slice(c.as_slice());
    let sol = lhs.lu().solve(&rhs)?;
    Some(DMatrix::from_column_slice(n, n, sol.as_slice()))
}
