//! Dense convex QP solver: `min 1/2 v'Hv + f'v  s.t.  A v <= b`.
//!
//! Operator splitting (ADMM) on a Ruiz-equilibrated copy of the problem,
//! with over-relaxation and adaptive penalty. Once the iterates are close,
//! the active set guessed from the duals is polished by equality-constrained
//! KKT solves with primal-dual active-set corrections, which recovers
//! solutions accurate to machine precision for MPC-sized problems.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::linalg::ensure_finite;
use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 20_000;
const OVER_RELAXATION: f64 = 1.6;
const SIGMA: f64 = 1e-6;
const RHO_INIT: f64 = 0.1;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const CHECK_EVERY: usize = 25;
const INFEASIBILITY_TOL: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub v_star: DVector<f64>,
    /// Multipliers of `A v <= b` (nonnegative at optimality).
    pub duals: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub polished: bool,
}

/// Scaled KKT residuals. Each entry is normalized by `1 + magnitude` of the
/// terms it compares, so a fixed tolerance works across problem scalings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
    pub dual_sign: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity).max(self.dual_sign)
    }
}

impl QpProblem {
    pub fn new(h: DMatrix<f64>, f: DVector<f64>, a_in: DMatrix<f64>, b_in: DVector<f64>) -> Result<Self> {
        let p = QpProblem { h, f, a_in, b_in };
        p.validate()?;
        Ok(p)
    }

    pub fn num_vars(&self) -> usize {
        self.h.nrows()
    }

    pub fn num_constraints(&self) -> usize {
        self.a_in.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.h.nrows();
        if self.h.ncols() != n || self.f.len() != n || self.a_in.ncols() != n || self.a_in.nrows() != self.b_in.len() {
            return Err(Error::Dimension(format!(
                "QP with H {:?}, f {}, A {:?}, b {}",
                self.h.shape(),
                self.f.len(),
                self.a_in.shape(),
                self.b_in.len()
            )));
        }
        ensure_finite(&self.h, "QP Hessian")?;
        ensure_finite(&self.a_in, "QP constraint matrix")?;
        if !self.f.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("QP linear cost".into()));
        }
        if self.b_in.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("QP bounds".into()));
        }
        let asym = (&self.h - self.h.transpose()).amax();
        if asym > 1e-10 * (1.0 + self.h.amax()) {
            return Err(Error::InvalidArgument(format!("QP Hessian is not symmetric (max asymmetry {asym:e})")));
        }
        Ok(())
    }

    pub fn objective(&self, v: &DVector<f64>) -> f64 {
        0.5 * v.dot(&(&self.h * v)) + self.f.dot(v)
    }

    /// `max_i (A_i v - b_i)`, clipped at zero.
    pub fn max_violation(&self, v: &DVector<f64>) -> f64 {
        let s = &self.a_in * v - &self.b_in;
        s.iter().cloned().fold(0.0, f64::max)
    }

    pub fn kkt_residuals(&self, v: &DVector<f64>, y: &DVector<f64>) -> KktResiduals {
        let hv = &self.h * v;
        let aty = self.a_in.transpose() * y;
        let grad = &hv + &self.f + &aty;
        let stat_scale = 1.0 + hv.amax().max(self.f.amax()).max(aty.amax());
        let av = &self.a_in * v;
        let slack = &av - &self.b_in;
        let finite_b = self.b_in.iter().filter(|b| b.is_finite()).fold(0.0_f64, |m, b| m.max(b.abs()));
        let prim_scale = 1.0 + av.amax().max(finite_b);
        let primal = slack.iter().cloned().fold(0.0, f64::max) / prim_scale;
        let mut comp = 0.0_f64;
        let mut dual_sign = 0.0_f64;
        for i in 0..y.len() {
            if slack[i].is_finite() {
                comp = comp.max((y[i] * slack[i]).abs());
            }
            dual_sign = dual_sign.max(-y[i]);
        }
        let y_scale = 1.0 + y.amax();
        KktResiduals {
            stationarity: grad.amax() / stat_scale,
            primal,
            complementarity: comp / (y_scale * prim_scale),
            dual_sign: dual_sign / y_scale,
        }
    }
}

struct Scaling {
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

fn ruiz(p: &QpProblem, iters: usize) -> Scaling {
    let n = p.num_vars();
    let m = p.num_constraints();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut h = p.h.clone();
    let mut a = p.a_in.clone();
    let clamp = |v: f64| if v < 1e-4 { 1.0 } else { v.min(1e4) };
    for _ in 0..iters {
        let mut dd = DVector::from_element(n, 1.0);
        let mut de = DVector::from_element(m, 1.0);
        for j in 0..n {
            let hn = h.column(j).amax();
            let an = if m > 0 { a.column(j).amax() } else { 0.0 };
            dd[j] = 1.0 / clamp(hn.max(an)).sqrt();
        }
        for i in 0..m {
            de[i] = 1.0 / clamp(a.row(i).amax()).sqrt();
        }
        for j in 0..n {
            for i in 0..n {
                h[(i, j)] *= dd[i] * dd[j];
            }
            for i in 0..m {
                a[(i, j)] *= de[i] * dd[j];
            }
        }
        d.component_mul_assign(&dd);
        e.component_mul_assign(&de);
    }
    let mean_col = if n > 0 { (0..n).map(|j| h.column(j).amax()).sum::<f64>() / n as f64 } else { 1.0 };
    let f_norm = p.f.component_mul(&d).amax();
    let c = 1.0 / clamp(mean_col.max(f_norm));
    Scaling { d, e, c }
}

/// Solves the QP. Returns `Err` only for malformed input; infeasibility and
/// the iteration cap are reported through [`QpStatus`].
pub fn solve_qp(p: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution> {
    p.validate()?;
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("QP tolerance must be positive, got {tol}")));
    }
    let n = p.num_vars();
    let m = p.num_constraints();
    if m == 0 {
        return Ok(unconstrained(p));
    }

    let sc = ruiz(p, 10);
    let h = DMatrix::from_fn(n, n, |i, j| sc.c * sc.d[i] * p.h[(i, j)] * sc.d[j]);
    let f = p.f.component_mul(&sc.d) * sc.c;
    let a = DMatrix::from_fn(m, n, |i, j| sc.e[i] * p.a_in[(i, j)] * sc.d[j]);
    let u = DVector::from_fn(m, |i, _| sc.e[i] * p.b_in[i]);
    let at = a.transpose();

    let mut rho = RHO_INIT;
    let mut factor = factorize(&h, &a, rho);
    let mut x = DVector::<f64>::zeros(n);
    let mut z = DVector::<f64>::zeros(m);
    let mut y = DVector::<f64>::zeros(m);
    let mut y_prev = y.clone();

    let unscale_v = |x: &DVector<f64>| x.component_mul(&sc.d);
    let unscale_y = |y: &DVector<f64>| y.component_mul(&sc.e) / sc.c;

    let mut iterations = 0;
    let mut best: Option<(DVector<f64>, DVector<f64>)> = None;
    while iterations < max_iter {
        iterations += 1;
        let rhs = &x * SIGMA - &f + &at * (&z * rho - &y);
        let x_tilde = factor.solve(&rhs);
        let z_tilde = &a * &x_tilde;
        x = &x_tilde * OVER_RELAXATION + &x * (1.0 - OVER_RELAXATION);
        let z_hat = &z_tilde * OVER_RELAXATION + &z * (1.0 - OVER_RELAXATION);
        let z_next = (&z_hat + &y / rho).zip_map(&u, |w, ub| w.min(ub));
        y_prev.copy_from(&y);
        y += (&z_hat - &z_next) * rho;
        z = z_next;

        if iterations % CHECK_EVERY != 0 && iterations != max_iter {
            continue;
        }
        let v = unscale_v(&x);
        let yy = unscale_y(&y);
        if !v.iter().all(|t| t.is_finite()) {
            break;
        }

        // Residuals on the original problem.
        let av = &p.a_in * &v;
        let z_un = z.component_div(&sc.e);
        let r_prim = (&av - &z_un).amax();
        let hv = &p.h * &v;
        let aty = p.a_in.transpose() * &yy;
        let r_dual = (&hv + &p.f + &aty).amax();
        let prim_scale = av.amax().max(z_un.amax());
        let dual_scale = hv.amax().max(aty.amax()).max(p.f.amax());

        if r_prim <= 1e-3 * (1.0 + prim_scale) && r_dual <= 1e-3 * (1.0 + dual_scale) {
            if let Some((pv, py)) = polish(p, &v, &yy, tol) {
                let objective = p.objective(&pv);
                return Ok(QpSolution { v_star: pv, duals: py, objective, status: QpStatus::Optimal, iterations, polished: true });
            }
        }
        let eps_prim = tol + tol * prim_scale;
        let eps_dual = tol + tol * dual_scale;
        if r_prim <= eps_prim && r_dual <= eps_dual {
            let objective = p.objective(&v);
            return Ok(QpSolution { v_star: v, duals: yy.map(|t| t.max(0.0)), objective, status: QpStatus::Optimal, iterations, polished: false });
        }
        if primal_infeasible(&a, &u, &(&y - &y_prev)) {
            return Ok(QpSolution {
                v_star: v.clone(),
                duals: yy,
                objective: p.objective(&v),
                status: QpStatus::Infeasible,
                iterations,
                polished: false,
            });
        }
        best = Some((v, yy));

        // Penalty adaptation, OSQP style.
        let ratio = ((r_prim / (prim_scale + 1e-30)) / (r_dual / (dual_scale + 1e-30) + 1e-30)).sqrt();
        let new_rho = (rho * ratio).clamp(RHO_MIN, RHO_MAX);
        if ratio.is_finite() && (new_rho > 5.0 * rho || new_rho < 0.2 * rho) {
            rho = new_rho;
            factor = factorize(&h, &a, rho);
        }
    }

    let (v, yy) = best.unwrap_or_else(|| (unscale_v(&x), unscale_y(&y)));
    if let Some((pv, py)) = polish(p, &v, &yy, tol) {
        let objective = p.objective(&pv);
        return Ok(QpSolution { v_star: pv, duals: py, objective, status: QpStatus::Optimal, iterations, polished: true });
    }
    let objective = p.objective(&v);
    Ok(QpSolution { v_star: v, duals: yy, objective, status: QpStatus::MaxIter, iterations, polished: false })
}

fn unconstrained(p: &QpProblem) -> QpSolution {
    let n = p.num_vars();
    let (v, _) = solve_kkt(&p.h, &p.f, &DMatrix::zeros(0, n), &DVector::zeros(0));
    let objective = p.objective(&v);
    let stat = (&p.h * &v + &p.f).amax();
    let status = if stat <= 1e-8 * (1.0 + p.f.amax()) { QpStatus::Optimal } else { QpStatus::MaxIter };
    QpSolution { v_star: v, duals: DVector::zeros(0), objective, status, iterations: 0, polished: true }
}

struct Factor {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl Factor {
    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }
}

fn factorize(h: &DMatrix<f64>, a: &DMatrix<f64>, rho: f64) -> Factor {
    let n = h.nrows();
    let mut k = h + a.transpose() * a * rho;
    for i in 0..n {
        k[(i, i)] += SIGMA;
    }
    let k = (&k + k.transpose()) * 0.5;
    let chol = match k.clone().cholesky() {
        Some(c) => c,
        None => {
            // H is PSD so this only triggers through rounding; bump the diagonal.
            let bump = 1e-10 * (1.0 + k.amax());
            (k + DMatrix::identity(n, n) * bump).cholesky().expect("regularized ADMM matrix is PD")
        }
    };
    Factor { chol }
}

fn primal_infeasible(a: &DMatrix<f64>, u: &DVector<f64>, dy: &DVector<f64>) -> bool {
    let norm = dy.amax();
    if norm < 1e-30 {
        return false;
    }
    if dy.iter().any(|&v| v < -INFEASIBILITY_TOL * norm) {
        return false;
    }
    let aty = a.transpose() * dy;
    let support: f64 = dy.iter().zip(u.iter()).filter(|(d, _)| **d > 0.0).map(|(d, b)| d * b).sum();
    aty.amax() <= INFEASIBILITY_TOL * norm && support < -INFEASIBILITY_TOL * norm
}

/// Solves `[H A'; A 0][v; y] = [-f; b]` with a small regularization and
/// iterative refinement. Returns the primal and dual parts.
fn solve_kkt(h: &DMatrix<f64>, f: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = h.nrows();
    let m = a.nrows();
    let dim = n + m;
    let scale = 1.0 + h.amax().max(if m > 0 { a.amax() } else { 0.0 });
    let delta = 1e-11 * scale;
    let mut k_exact = DMatrix::<f64>::zeros(dim, dim);
    k_exact.view_mut((0, 0), (n, n)).copy_from(h);
    if m > 0 {
        k_exact.view_mut((n, 0), (m, n)).copy_from(a);
        k_exact.view_mut((0, n), (n, m)).copy_from(&a.transpose());
    }
    let mut k_reg = k_exact.clone();
    for i in 0..n {
        k_reg[(i, i)] += delta;
    }
    for i in n..dim {
        k_reg[(i, i)] -= delta;
    }
    let mut rhs = DVector::<f64>::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-f));
    if m > 0 {
        rhs.rows_mut(n, m).copy_from(b);
    }
    let lu = k_reg.lu();
    let mut sol = lu.solve(&rhs).unwrap_or_else(|| DVector::zeros(dim));
    for _ in 0..10 {
        let r = &rhs - &k_exact * &sol;
        if r.amax() <= 1e-15 * (1.0 + rhs.amax()) {
            break;
        }
        match lu.solve(&r) {
            Some(d) => sol += d,
            None => break,
        }
    }
    (sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned())
}

/// Primal active-set method started from a feasible point `v0`. Every iterate
/// stays feasible, so a bounded number of steps always yields a usable plan.
pub fn solve_qp_from_feasible(p: &QpProblem, v0: &DVector<f64>, tol: f64, max_iter: usize) -> Result<QpSolution> {
    p.validate()?;
    let n = p.num_vars();
    let m = p.num_constraints();
    if v0.len() != n {
        return Err(Error::Dimension(format!("start point has {} entries, QP has {n}", v0.len())));
    }
    let start_viol = p.max_violation(v0);
    if start_viol > 1e-6 * (1.0 + p.b_in.amax()) {
        return Err(Error::InvalidArgument(format!("start point violates the constraints by {start_viol:.3e}")));
    }
    let mut v = v0.clone();
    let mut working: Vec<usize> = Vec::new();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let g = &p.h * &v + &p.f;
        let a_w = DMatrix::from_fn(working.len(), n, |r, c| p.a_in[(working[r], c)]);
        let Some((step, y_w)) = null_space_step(&p.h, &g, &a_w) else {
            break;
        };
        if step.amax() <= 1e-12 * (1.0 + v.amax()) {
            let mut duals = DVector::zeros(m);
            for (r, &i) in working.iter().enumerate() {
                duals[i] = y_w[r];
            }
            let worst = working.iter().enumerate().min_by(|a, b| y_w[a.0].total_cmp(&y_w[b.0]));
            match worst {
                Some((r, _)) if y_w[r] < -tol * (1.0 + y_w.amax()) => {
                    working.remove(r);
                    continue;
                }
                _ => {
                    let objective = p.objective(&v);
                    let status = if p.kkt_residuals(&v, &duals).max() <= tol { QpStatus::Optimal } else { QpStatus::MaxIter };
                    return Ok(QpSolution { v_star: v, duals, objective, status, iterations, polished: true });
                }
            }
        }
        let ap = &p.a_in * &step;
        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..m {
            if working.contains(&i) || ap[i] <= 1e-14 * p.a_in.row(i).amax() * step.amax() {
                continue;
            }
            let slack = (p.b_in[i] - p.a_in.row(i).dot(&v.transpose())).max(0.0);
            let t = slack / ap[i];
            if t < alpha {
                alpha = t;
                blocking = Some(i);
            }
        }
        v += &step * alpha;
        if let Some(i) = blocking {
            working.push(i);
        }
    }
    let objective = p.objective(&v);
    Ok(QpSolution { v_star: v, duals: DVector::zeros(m), objective, status: QpStatus::MaxIter, iterations, polished: false })
}

/// Minimizes `1/2 d'Hd + g'd` subject to `A_w d = 0` on the null space of
/// `A_w`, so the working rows stay exactly active. Also returns the
/// least-squares multipliers of the working rows.
fn null_space_step(h: &DMatrix<f64>, g: &DVector<f64>, a_w: &DMatrix<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = h.nrows();
    let w = a_w.nrows();
    let z = if w == 0 {
        DMatrix::identity(n, n)
    } else {
        let mut padded = DMatrix::zeros(n, n.max(w));
        padded.columns_mut(0, w).copy_from(&a_w.transpose());
        let svd = padded.svd(true, false);
        let u = svd.u?;
        let smax = svd.singular_values.max();
        let keep: Vec<usize> = (0..n).filter(|&i| svd.singular_values[i] <= 1e-12 * smax).collect();
        DMatrix::from_fn(n, keep.len(), |r, c| u[(r, keep[c])])
    };
    let step = if z.ncols() == 0 {
        DVector::zeros(n)
    } else {
        let zt = z.transpose();
        let reduced = symmetric_part(&(&zt * h * &z));
        let rhs = -(&zt * g);
        let y = match reduced.clone().cholesky() {
            Some(c) => c.solve(&rhs),
            None => {
                let bump = 1e-14 * (1.0 + reduced.amax());
                (reduced + DMatrix::identity(z.ncols(), z.ncols()) * bump).cholesky()?.solve(&rhs)
            }
        };
        z * y
    };
    let grad = h * &step + g;
    let mult = if w == 0 {
        DVector::zeros(0)
    } else {
        let at = a_w.transpose();
        at.clone().svd(true, true).solve(&(-grad), 1e-14 * at.amax()).ok()?
    };
    (step.iter().chain(mult.iter()).all(|t| t.is_finite())).then_some((step, mult))
}

fn symmetric_part(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Active-set polish seeded by the ADMM iterate.
fn polish(p: &QpProblem, v: &DVector<f64>, y: &DVector<f64>, tol: f64) -> Option<(DVector<f64>, DVector<f64>)> {
    let m = p.num_constraints();
    let n = p.num_vars();
    let slack = &p.b_in - &p.a_in * v;
    let mut active: Vec<bool> = (0..m).map(|i| slack[i].is_finite() && slack[i] < y[i]).collect();
    let max_rounds = 2 * (n + m) + 10;
    for _ in 0..max_rounds {
        let idx: Vec<usize> = (0..m).filter(|&i| active[i]).collect();
        let a_s = DMatrix::from_fn(idx.len(), n, |r, c| p.a_in[(idx[r], c)]);
        let b_s = DVector::from_fn(idx.len(), |r, _| p.b_in[idx[r]]);
        let (pv, ys) = solve_kkt(&p.h, &p.f, &a_s, &b_s);
        if !pv.iter().all(|t| t.is_finite()) {
            return None;
        }
        let mut full_y = DVector::<f64>::zeros(m);
        for (r, &i) in idx.iter().enumerate() {
            full_y[i] = ys[r];
        }
        let res = p.kkt_residuals(&pv, &full_y);
        if res.max() <= tol {
            return Some((pv, full_y));
        }
        // Drop the most negative multiplier first, otherwise add the most violated row.
        let y_scale = 1.0 + full_y.amax();
        let worst_dual = idx.iter().map(|&i| (i, full_y[i])).min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((i, yi)) = worst_dual {
            if yi < -tol * y_scale {
                active[i] = false;
                continue;
            }
        }
        let viol = &p.a_in * &pv - &p.b_in;
        let worst_primal = (0..m).filter(|&i| !active[i]).map(|i| (i, viol[i])).max_by(|a, b| a.1.total_cmp(&b.1));
        match worst_primal {
            Some((i, vi)) if vi > 0.0 => active[i] = true,
            _ => return None,
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_qp(h: f64, f: f64, rows: &[(f64, f64)]) -> QpProblem {
        let a = DMatrix::from_fn(rows.len(), 1, |i, _| rows[i].0);
        let b = DVector::from_fn(rows.len(), |i, _| rows[i].1);
        QpProblem::new(DMatrix::from_element(1, 1, h), DVector::from_element(1, f), a, b).unwrap()
    }

    #[test]
    fn interior_minimum() {
        let p = scalar_qp(2.0, 0.0, &[(1.0, 1.0), (-1.0, 1.0)]);
        let s = solve_qp(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!(s.v_star[0].abs() < 1e-10);
        assert!(s.objective.abs() < 1e-12);
    }

    #[test]
    fn clipped_minimum() {
        let p = scalar_qp(2.0, -4.0, &[(1.0, 1.0)]);
        let s = solve_qp(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.v_star[0] - 1.0).abs() < 1e-10);
        assert!((s.objective - (-3.0)).abs() < 1e-10);
        assert!((s.duals[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn detects_infeasibility() {
        // v <= -1 and -v <= -1 (v >= 1).
        let p = scalar_qp(1.0, 0.0, &[(1.0, -1.0), (-1.0, -1.0)]);
        let s = solve_qp(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
    }

    #[test]
    fn rejects_asymmetric_hessian() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let p = QpProblem::new(h, DVector::zeros(2), DMatrix::zeros(0, 2), DVector::zeros(0));
        assert!(p.is_err());
    }

    #[test]
    fn unconstrained_solves_linear_system() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let f = DVector::from_vec(vec![1.0, -1.0]);
        let p = QpProblem::new(h.clone(), f.clone(), DMatrix::zeros(0, 2), DVector::zeros(0)).unwrap();
        let s = solve_qp(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((&h * &s.v_star + &f).amax() < 1e-12);
    }

    #[test]
    fn iteration_cap_reports_max_iter_or_optimal() {
        let p = scalar_qp(2.0, -4.0, &[(1.0, 1.0)]);
        let s = solve_qp(&p, DEFAULT_TOL, 1).unwrap();
        assert!(matches!(s.status, QpStatus::MaxIter | QpStatus::Optimal));
    }

    #[test]
    fn random_solutions_are_locally_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..30 {
            let n = rng.gen_range(2..9);
            let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let h = &g * g.transpose();
            let f = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
            let mut a = DMatrix::zeros(2 * n + 4, n);
            let mut b = DVector::zeros(2 * n + 4);
            for i in 0..n {
                a[(2 * i, i)] = 1.0;
                a[(2 * i + 1, i)] = -1.0;
                b[2 * i] = 1.0;
                b[2 * i + 1] = 1.0;
            }
            for r in 2 * n..2 * n + 4 {
                for c in 0..n {
                    a[(r, c)] = rng.gen_range(-1.0..1.0);
                }
                b[r] = rng.gen_range(0.1..1.0);
            }
            let p = QpProblem::new(h, f, a, b).unwrap();
            let s = solve_qp(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            assert_eq!(s.status, QpStatus::Optimal);
            assert!(p.kkt_residuals(&s.v_star, &s.duals).max() <= DEFAULT_TOL);
            for _ in 0..100 {
                let d = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)).normalize() * 1e-3;
                let trial = &s.v_star + d;
                if p.max_violation(&trial) <= 0.0 {
                    assert!(p.objective(&trial) - s.objective >= -1e-9);
                }
            }
        }
    }

    #[test]
    fn active_set_from_feasible_matches_admm() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = 6;
            let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let h = &g * g.transpose() + DMatrix::identity(n, n) * 0.1;
            let f = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
            let a_gen = DMatrix::from_fn(8, n, |_, _| rng.gen_range(-1.0..1.0));
            let mut a = DMatrix::zeros(8 + 2 * n, n);
            a.rows_mut(0, 8).copy_from(&a_gen);
            let mut b = DVector::from_element(8 + 2 * n, 1.0);
            for j in 0..n {
                a[(8 + 2 * j, j)] = 1.0;
                a[(9 + 2 * j, j)] = -1.0;
                b[8 + 2 * j] = 2.0;
                b[9 + 2 * j] = 2.0;
            }
            let p = QpProblem::new(h, f, a, b).unwrap();
            let admm = solve_qp(&p, 1e-10, 20000).unwrap();
            let act = solve_qp_from_feasible(&p, &DVector::zeros(n), 1e-10, 500).unwrap();
            assert_eq!(act.status, QpStatus::Optimal);
            assert!(p.max_violation(&act.v_star) <= 1e-12);
            assert!((act.objective - admm.objective).abs() <= 1e-8 * (1.0 + admm.objective.abs()));
        }
    }

    #[test]
    fn active_set_rejects_infeasible_start() {
        let p = scalar_qp(2.0, -4.0, &[(1.0, 1.0)]);
        assert!(solve_qp_from_feasible(&p, &DVector::from_element(1, 3.0), 1e-8, 10).is_err());
        let s = solve_qp_from_feasible(&p, &DVector::from_element(1, -3.0), 1e-8, 10).unwrap();
        assert!((s.v_star[0] - 1.0).abs() < 1e-12);
    }
}
