//! Nonlinear MPC comparator on the true plant model: single shooting,
//! finite-difference gradients, projected quasi-Newton iterations.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::solve_dare;
use crate::plants::{PlantModel, Trajectory};
use crate::terminal::BoxSet;

#[derive(Debug, Clone, PartialEq)]
pub struct NmpcConfig {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub u_box: BoxSet,
    pub horizon: usize,
    pub max_iter: usize,
    /// Stop when the projected gradient falls below this (relative to `1 + |J|`).
    pub tol: f64,
    pub fd_step: f64,
}

#[derive(Debug, Clone)]
pub struct NmpcRun {
    pub trajectory: Trajectory,
    /// Optimal open-loop cost at each step.
    pub costs: Vec<f64>,
    pub iterations: Vec<usize>,
    /// Steps where the line search gave up and the best iterate was kept.
    pub line_search_failures: usize,
}

/// Jacobians of `f` at `(x, u)` by central differences.
pub fn linearize(plant: &dyn PlantModel, x: &DVector<f64>, u: &DVector<f64>, h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = plant.state_dim();
    let m = plant.input_dim();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, m);
    for j in 0..n {
        let mut xp = x.clone();
        xp[j] += h;
        let mut xm = x.clone();
        xm[j] -= h;
        a.set_column(j, &((plant.step(&xp, u) - plant.step(&xm, u)) / (2.0 * h)));
    }
    for j in 0..m {
        let mut up = u.clone();
        up[j] += h;
        let mut um = u.clone();
        um[j] -= h;
        b.set_column(j, &((plant.step(x, &up) - plant.step(x, &um)) / (2.0 * h)));
    }
    (a, b)
}

/// Terminal weight from the Riccati solution of the linearization at the origin.
pub fn terminal_weight(plant: &dyn PlantModel, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let x0 = DVector::zeros(plant.state_dim());
    let u0 = DVector::zeros(plant.input_dim());
    let (a, b) = linearize(plant, &x0, &u0, 1e-6);
    Ok(solve_dare(&a, &b, q, r)?.p)
}

struct Shooting<'a> {
    plant: &'a dyn PlantModel,
    cfg: &'a NmpcConfig,
    x0: DVector<f64>,
}

impl Shooting<'_> {
    fn cost(&self, u: &DVector<f64>) -> f64 {
        let m = self.plant.input_dim();
        let mut x = self.x0.clone();
        let mut j = 0.0;
        for i in 0..self.cfg.horizon {
            let ui = u.rows(i * m, m).into_owned();
            j += x.dot(&(&self.cfg.q * &x)) + ui.dot(&(&self.cfg.r * &ui));
            x = self.plant.step(&x, &ui);
        }
        let j = j + x.dot(&(&self.cfg.p * &x));
        if j.is_finite() {
            j
        } else {
            f64::INFINITY
        }
    }

    fn grad(&self, u: &DVector<f64>) -> DVector<f64> {
        let h = self.cfg.fd_step;
        DVector::from_fn(u.len(), |i, _| {
            let mut up = u.clone();
            up[i] += h;
            let mut um = u.clone();
            um[i] -= h;
            (self.cost(&up) - self.cost(&um)) / (2.0 * h)
        })
    }

    fn project(&self, u: &mut DVector<f64>) {
        let m = self.plant.input_dim();
        for (i, v) in u.iter_mut().enumerate() {
            *v = v.clamp(self.cfg.u_box.lo[i % m], self.cfg.u_box.hi[i % m]);
        }
    }

    fn bound_flags(&self, u: &DVector<f64>, g: &DVector<f64>) -> Vec<bool> {
        let m = self.plant.input_dim();
        (0..u.len())
            .map(|i| {
                let (lo, hi) = (self.cfg.u_box.lo[i % m], self.cfg.u_box.hi[i % m]);
                let eps = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
                (u[i] <= lo + eps && g[i] > 0.0) || (u[i] >= hi - eps && g[i] < 0.0)
            })
            .collect()
    }

    fn projected_grad_norm(&self, u: &DVector<f64>, g: &DVector<f64>) -> f64 {
        let mut t = u - g;
        self.project(&mut t);
        (u - t).amax()
    }

    /// Returns the optimized sequence, its cost, iteration count and whether
    /// the line search stalled.
    fn solve(&self, mut u: DVector<f64>) -> (DVector<f64>, f64, usize, bool) {
        self.project(&mut u);
        let n = u.len();
        let mut j = self.cost(&u);
        let mut g = self.grad(&u);
        let mut hinv = DMatrix::<f64>::identity(n, n);
        let mut stalled = false;
        let mut it = 0;
        while it < self.cfg.max_iter {
            if self.projected_grad_norm(&u, &g) <= self.cfg.tol * (1.0 + j.abs()) {
                break;
            }
            it += 1;
            let fixed = self.bound_flags(&u, &g);
            let mut d = -(&hinv * &g);
            for i in 0..n {
                if fixed[i] {
                    d[i] = 0.0;
                }
            }
            // Fall back to steepest descent when the quasi-Newton direction is not a descent direction.
            if d.dot(&g) >= 0.0 {
                hinv = DMatrix::identity(n, n);
                d = -&g;
                for i in 0..n {
                    if fixed[i] {
                        d[i] = 0.0;
                    }
                }
            }
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let mut trial = &u + &d * alpha;
                self.project(&mut trial);
                let jt = self.cost(&trial);
                if jt <= j + 1e-4 * g.dot(&(&trial - &u)) {
                    accepted = Some((trial, jt));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((u_new, j_new)) = accepted else {
                stalled = true;
                break;
            };
            let g_new = self.grad(&u_new);
            let s = &u_new - &u;
            let y = &g_new - &g;
            let sy = s.dot(&y);
            if sy > 1e-12 * s.norm() * y.norm() {
                let rho = 1.0 / sy;
                let id = DMatrix::<f64>::identity(n, n);
                let left = &id - &s * y.transpose() * rho;
                let right = &id - &y * s.transpose() * rho;
                hinv = &left * &hinv * &right + &s * s.transpose() * rho;
            }
            let progress = j - j_new;
            u = u_new;
            j = j_new;
            g = g_new;
            if progress <= 1e-15 * (1.0 + j.abs()) && s.amax() <= 1e-12 {
                break;
            }
        }
        (u, j, it, stalled)
    }
}

/// Receding-horizon NMPC run from `x0` for `steps` steps.
pub fn nmpc_baseline(plant: &dyn PlantModel, cfg: &NmpcConfig, x0: &DVector<f64>, steps: usize) -> Result<NmpcRun> {
    let n = plant.state_dim();
    let m = plant.input_dim();
    if cfg.horizon == 0 {
        return Err(Error::InvalidArgument("NMPC horizon must be at least 1".into()));
    }
    if x0.len() != n || cfg.q.shape() != (n, n) || cfg.p.shape() != (n, n) || cfg.r.shape() != (m, m) || cfg.u_box.dim() != m {
        return Err(Error::Dimension("NMPC weights do not match the plant".into()));
    }
    let mut x = x0.clone();
    let mut warm = DVector::zeros(cfg.horizon * m);
    let mut xs = vec![x.clone()];
    let mut ys = vec![plant.output(&x)];
    let mut us = Vec::with_capacity(steps);
    let mut costs = Vec::with_capacity(steps);
    let mut iterations = Vec::with_capacity(steps);
    let mut failures = 0;
    for k in 0..steps {
        let problem = Shooting { plant, cfg, x0: x.clone() };
        let (u_opt, j, it, stalled) = problem.solve(warm.clone());
        if stalled {
            warn!("NMPC step {k}: line search failed; keeping the best iterate");
            failures += 1;
        }
        let u0 = u_opt.rows(0, m).into_owned();
        x = plant.step(&x, &u0);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged { step: k });
        }
        // Shift the plan for the next warm start.
        warm.rows_mut(0, (cfg.horizon - 1) * m).copy_from(&u_opt.rows(m, (cfg.horizon - 1) * m));
        warm.rows_mut((cfg.horizon - 1) * m, m).fill(0.0);
        us.push(u0);
        xs.push(x.clone());
        ys.push(plant.output(&x));
        costs.push(j);
        iterations.push(it);
    }
    Ok(NmpcRun {
        trajectory: Trajectory::new(us, ys, Some(xs))?,
        costs,
        iterations,
        line_search_failures: failures,
    })
}

/// `Σ x'Qx + u'Ru` over the applied inputs and the states they act on.
pub fn stage_cost(states: &[DVector<f64>], inputs: &[DVector<f64>], q: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    states.iter().zip(inputs).map(|(x, u)| x.dot(&(q * x)) + u.dot(&(r * u))).sum()
}
