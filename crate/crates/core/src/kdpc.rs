//! Koopman data-driven predictive controller with interpolated initial state.
//!
//! Each step solves a condensed QP in `v = (u_0, ..., u_{N-1}, ξ)`, where the
//! initial lifted state is `z_0 = φ + ξ e` with `e = z*_{1|k-1} - φ`.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::datapipe::IniWindow;
use crate::error::{Error, Result};
use crate::numerics::linalg::{ensure_finite_vec, min_eigenvalue_sym, symmetrize};
use crate::numerics::qp::{DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::numerics::{solve_qp, solve_qp_from_feasible, QpProblem, QpSolution, QpStatus};
use crate::observables::ObservableMap;
use crate::plants::{fmt_f64, PlantModel};
use crate::predictor::{MultiStepPredictor, PredictionForm};
use crate::terminal::{BoxSet, Polyhedron, TerminalIngredients};

/// Weight on `ξ²` that breaks the tie when `e = 0`.
pub const XI_TIE_WEIGHT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularization {
    /// `λ ||z_0 - φ||²`.
    #[default]
    Deviation,
    /// `λ ξ² ||e||²`; equal to the deviation form after condensing.
    XiError,
    /// `λ ξ²`.
    LegacyXi,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdpcConfig {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub lambda: f64,
    pub horizon: usize,
    pub u_box: BoxSet,
    pub xz: BoxSet,
    pub terminal: Polyhedron,
    pub regularization: Regularization,
    pub form: PredictionForm,
    /// Also require `z_0 ∈ X_z`.
    pub constrain_z0: bool,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
}

impl KdpcConfig {
    pub fn from_terminal(t: &TerminalIngredients, lambda: f64, horizon: usize) -> Self {
        KdpcConfig {
            q: t.q.clone(),
            r: t.r.clone(),
            p: t.p.clone(),
            k: t.k.clone(),
            lambda,
            horizon,
            u_box: t.u_box.clone(),
            xz: t.xz.clone(),
            terminal: t.set.clone(),
            regularization: Regularization::default(),
            form: PredictionForm::default(),
            constrain_z0: false,
            qp_tol: DEFAULT_TOL,
            qp_max_iter: DEFAULT_MAX_ITER,
        }
    }

    pub fn validate(&self, l: usize, m: usize) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("λ must be finite and >= 0, got {}", self.lambda)));
        }
        let shapes_ok = self.q.shape() == (l, l)
            && self.p.shape() == (l, l)
            && self.r.shape() == (m, m)
            && self.k.shape() == (m, l)
            && self.u_box.dim() == m
            && self.xz.dim() == l
            && self.terminal.dim() == l;
        if !shapes_ok {
            return Err(Error::Dimension(format!("controller weights do not match L = {l}, m = {m}")));
        }
        if min_eigenvalue_sym(&symmetrize(&self.q)) < -1e-12 || min_eigenvalue_sym(&symmetrize(&self.r)) <= 0.0 {
            return Err(Error::InvalidArgument("Q must be PSD and R PD".into()));
        }
        Ok(())
    }
}

/// Condensed QP together with what is needed to decode its solution.
#[derive(Debug, Clone)]
pub struct CondensedQp {
    pub qp: QpProblem,
    /// `z_[1,N] = offset + map v`.
    pub z_offset: DVector<f64>,
    pub z_map: DMatrix<f64>,
    pub phi: DVector<f64>,
    pub e: DVector<f64>,
    /// Cost terms independent of `v`.
    pub constant: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub u_seq: DVector<f64>,
    pub xi: f64,
    pub z0: DVector<f64>,
    /// `z_1 .. z_N` stacked.
    pub z_traj: DVector<f64>,
}

/// `(1 - ξ) φ + ξ z_prev`.
pub fn interpolate_initial(phi: &DVector<f64>, prev_z1: &DVector<f64>, xi: f64) -> Result<DVector<f64>> {
    if !(0.0..=1.0).contains(&xi) {
        return Err(Error::InvalidArgument(format!("ξ must lie in [0, 1], got {xi}")));
    }
    if phi.len() != prev_z1.len() {
        return Err(Error::Dimension("φ and z_prev differ in length".into()));
    }
    Ok(phi * (1.0 - xi) + prev_z1 * xi)
}

pub struct Kdpc {
    pub cfg: KdpcConfig,
    pub map: ObservableMap,
    psi: DMatrix<f64>,
    gamma: DMatrix<f64>,
    lambda_min_q: f64,
}

impl Kdpc {
    pub fn new(cfg: KdpcConfig, pred: &MultiStepPredictor, map: ObservableMap) -> Result<Self> {
        let l = pred.lifted_dim();
        let m = pred.input_dim();
        cfg.validate(l, m)?;
        if map.lifted_dim() != l || map.m != m {
            return Err(Error::Dimension("observable map does not match the predictor".into()));
        }
        if cfg.horizon != pred.horizon {
            return Err(Error::Dimension(format!("controller horizon {} vs predictor {}", cfg.horizon, pred.horizon)));
        }
        let (psi, gamma) = pred.matrices(cfg.form);
        let lambda_min_q = min_eigenvalue_sym(&symmetrize(&cfg.q));
        Ok(Kdpc { cfg, map, psi, gamma, lambda_min_q })
    }

    pub fn lifted_dim(&self) -> usize {
        self.psi.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.cfg.r.nrows()
    }

    pub fn num_vars(&self) -> usize {
        self.cfg.horizon * self.input_dim() + 1
    }

    pub fn lambda_min_q(&self) -> f64 {
        self.lambda_min_q
    }

    fn xi_weight(&self, e: &DVector<f64>) -> f64 {
        match self.cfg.regularization {
            Regularization::Deviation | Regularization::XiError => self.cfg.lambda * e.norm_squared(),
            Regularization::LegacyXi => self.cfg.lambda,
        }
    }

    pub fn build_qp(&self, phi: &DVector<f64>, prev_z1: &DVector<f64>) -> Result<CondensedQp> {
        let l = self.lifted_dim();
        let m = self.input_dim();
        let n = self.cfg.horizon;
        if phi.len() != l || prev_z1.len() != l {
            return Err(Error::Dimension(format!("lifted vectors must have length {l}")));
        }
        let nu = n * m;
        let nv = nu + 1;
        let e = prev_z1 - phi;

        // z_[1,N] = Ψ φ + [Γ  Ψe] v
        let psi_e = &self.psi * &e;
        let mut s = DMatrix::zeros(n * l, nv);
        s.columns_mut(0, nu).copy_from(&self.gamma);
        s.column_mut(nu).copy_from(&psi_e);
        let c0 = &self.psi * phi;

        let mut qbar = DMatrix::zeros(n * l, n * l);
        for i in 0..n {
            let w = if i + 1 == n { &self.cfg.p } else { &self.cfg.q };
            qbar.view_mut((i * l, i * l), (l, l)).copy_from(w);
        }
        let q = &self.cfg.q;
        let sq = s.transpose() * &qbar;
        let mut h = &sq * &s;
        let mut f = &sq * &c0;
        for i in 0..n {
            {
                let mut blk = h.view_mut((i * m, i * m), (m, m));
                blk += &self.cfg.r;
            }
        }
        // z_0 = φ + ξ e
        h[(nu, nu)] += e.dot(&(q * &e)) + self.xi_weight(&e) + XI_TIE_WEIGHT;
        f[nu] += e.dot(&(q * phi));
        let h = symmetrize(&(h * 2.0));
        let f = f * 2.0;
        let constant = phi.dot(&(q * phi)) + c0.dot(&(&qbar * &c0));

        let t = &self.cfg.terminal;
        let z0_rows = if self.cfg.constrain_z0 { 2 * l } else { 0 };
        let rows = 2 * nu + 2 * n * l + t.rows() + 2 + z0_rows;
        let mut a = DMatrix::zeros(rows, nv);
        let mut b = DVector::zeros(rows);
        let mut r = 0;
        for i in 0..n {
            for j in 0..m {
                a[(r, i * m + j)] = 1.0;
                b[r] = self.cfg.u_box.hi[j];
                a[(r + 1, i * m + j)] = -1.0;
                b[r + 1] = -self.cfg.u_box.lo[j];
                r += 2;
            }
        }
        for i in 0..n * l {
            let c = i % l;
            a.row_mut(r).copy_from(&s.row(i));
            b[r] = self.cfg.xz.hi[c] - c0[i];
            a.row_mut(r + 1).copy_from(&(-s.row(i)));
            b[r + 1] = c0[i] - self.cfg.xz.lo[c];
            r += 2;
        }
        let s_n = s.rows((n - 1) * l, l);
        let c_n = c0.rows((n - 1) * l, l);
        let ms = &t.m * s_n;
        a.rows_mut(r, t.rows()).copy_from(&ms);
        b.rows_mut(r, t.rows()).copy_from(&(&t.b - &t.m * c_n));
        r += t.rows();
        a[(r, nu)] = 1.0;
        b[r] = 1.0;
        a[(r + 1, nu)] = -1.0;
        b[r + 1] = 0.0;
        r += 2;
        if self.cfg.constrain_z0 {
            for c in 0..l {
                a[(r, nu)] = e[c];
                b[r] = self.cfg.xz.hi[c] - phi[c];
                a[(r + 1, nu)] = -e[c];
                b[r + 1] = phi[c] - self.cfg.xz.lo[c];
                r += 2;
            }
        }
        debug_assert_eq!(r, rows);
        let qp = QpProblem::new(h, f, a, b)?;
        Ok(CondensedQp { qp, z_offset: c0, z_map: s, phi: phi.clone(), e, constant })
    }

    pub fn decode(&self, cq: &CondensedQp, v: &DVector<f64>) -> Decoded {
        let nu = self.num_vars() - 1;
        let xi = v[nu];
        Decoded {
            u_seq: v.rows(0, nu).into_owned(),
            xi,
            z0: &cq.phi + &cq.e * xi,
            z_traj: &cq.z_offset + &cq.z_map * v,
        }
    }

    /// Cost of a decoded plan, computed from the trajectories.
    pub fn plan_cost(&self, d: &Decoded, e: &DVector<f64>) -> f64 {
        let l = self.lifted_dim();
        let m = self.input_dim();
        let n = self.cfg.horizon;
        let q = &self.cfg.q;
        let quad = |w: &DMatrix<f64>, x: &DVector<f64>| x.dot(&(w * x));
        let mut cost = quad(q, &d.z0);
        for i in 0..n {
            let u = d.u_seq.rows(i * m, m).into_owned();
            cost += quad(&self.cfg.r, &u);
            let z = d.z_traj.rows(i * l, l).into_owned();
            cost += if i + 1 == n { quad(&self.cfg.p, &z) } else { quad(q, &z) };
        }
        cost + match self.cfg.regularization {
            Regularization::Deviation => self.cfg.lambda * (&d.z0 - (&d.z0 - e * d.xi)).norm_squared(),
            Regularization::XiError => self.cfg.lambda * d.xi * d.xi * e.norm_squared(),
            Regularization::LegacyXi => self.cfg.lambda * d.xi * d.xi,
        }
    }

    /// Shifted plan `(u_1, ..., u_{N-1}, K z_N)` with `ξ = 1`.
    pub fn shifted_candidate(&self, prev: &Decoded) -> DVector<f64> {
        let m = self.input_dim();
        let l = self.lifted_dim();
        let n = self.cfg.horizon;
        let mut v = DVector::zeros(self.num_vars());
        if n > 1 {
            v.rows_mut(0, (n - 1) * m).copy_from(&prev.u_seq.rows(m, (n - 1) * m));
        }
        let z_n = prev.z_traj.rows((n - 1) * l, l);
        v.rows_mut((n - 1) * m, m).copy_from(&(&self.cfg.k * z_n));
        v[n * m] = 1.0;
        v
    }

    pub fn new_state(&self) -> ControllerState {
        ControllerState::new(self.map.t_ini, self.input_dim(), self.map.p)
    }

    /// Records `(u(k-1), y(k))`, lifts the past window and solves the QP.
    pub fn step(&self, state: &mut ControllerState, y_new: &DVector<f64>, u_prev: &DVector<f64>) -> Result<StepResult> {
        ensure_finite_vec(y_new, "measurement")?;
        ensure_finite_vec(u_prev, "previous input")?;
        state.record(u_prev, y_new)?;
        let window = state.window()?;
        let phi = self.map.lift(&window.stacked())?;
        let prev_z1 = state.prev_z1.clone().unwrap_or_else(|| phi.clone());
        let cq = self.build_qp(&phi, &prev_z1)?;
        let candidate = state.prev_plan.as_ref().map(|p| self.shifted_candidate(p));
        let candidate_violation = candidate.as_ref().map(|v| cq.qp.max_violation(v));
        let mut sol = solve_qp(&cq.qp, self.cfg.qp_tol, self.cfg.qp_max_iter)?;
        let mut refined = false;
        if sol.status != QpStatus::Optimal {
            if let Some(cand) = &candidate {
                // The shifted candidate is feasible, so an active-set pass from it can finish the solve.
                let admm_iterations = sol.iterations;
                match solve_qp_from_feasible(&cq.qp, cand, self.cfg.qp_tol, self.cfg.qp_max_iter) {
                    Ok(s) if s.status == QpStatus::Optimal => {
                        debug!("step {}: ADMM returned {:?}; active-set refinement converged", state.k, sol.status);
                        sol = QpSolution { iterations: admm_iterations + s.iterations, ..s };
                        refined = true;
                    }
                    Ok(s) => warn!(
                        "step {}: active-set refinement returned {:?} after {} iterations (KKT {:?})",
                        state.k,
                        s.status,
                        s.iterations,
                        cq.qp.kkt_residuals(&s.v_star, &s.duals)
                    ),
                    Err(e) => warn!("step {}: active-set refinement failed: {e}", state.k),
                }
            }
        }
        let (v, feasible, fallback) = select_plan(sol.status, &sol.v_star, candidate, state.k)?;
        let plan = self.decode(&cq, &v);
        let value = self.plan_cost(&plan, &cq.e);
        let l = self.lifted_dim();
        let m = self.input_dim();
        let z1 = plan.z_traj.rows(0, l).into_owned();
        let u_applied = plan.u_seq.rows(0, m).into_owned();
        let result = StepResult {
            k: state.k,
            y: y_new.clone(),
            u_applied,
            u_seq: plan.u_seq.clone(),
            xi: plan.xi,
            phi,
            z0: plan.z0.clone(),
            z1: z1.clone(),
            z_n: plan.z_traj.rows((self.cfg.horizon - 1) * l, l).into_owned(),
            e: cq.e.clone(),
            value,
            feasible,
            fallback,
            refined,
            qp_status: sol.status,
            qp_iterations: sol.iterations,
            candidate_violation,
            terminal_violation: self.cfg.terminal.max_violation(&plan.z_traj.rows((self.cfg.horizon - 1) * l, l).into_owned()),
        };
        debug!("k={} u={:.4} ξ={:.3e} V={:.4e} |e|={:.2e}", state.k, result.u_applied[0], plan.xi, value, cq.e.norm());
        state.prev_z1 = Some(z1);
        state.prev_plan = Some(plan);
        state.k += 1;
        Ok(result)
    }
}

/// Picks the solver output when optimal, otherwise the shifted candidate.
/// Returns `(v, feasible, fallback)`.
pub fn select_plan(
    status: QpStatus,
    v_star: &DVector<f64>,
    candidate: Option<DVector<f64>>,
    k: usize,
) -> Result<(DVector<f64>, bool, bool)> {
    match (status, candidate) {
        (QpStatus::Optimal, _) => Ok((v_star.clone(), true, false)),
        (status, Some(cand)) => {
            warn!("step {k}: QP returned {status:?}; applying the shifted candidate");
            Ok((cand, false, true))
        }
        (status, None) => Err(Error::Controller(format!("QP at the first step returned {status:?}"))),
    }
}

/// Past data buffer and the carried one-step prediction.
#[derive(Debug, Clone)]
pub struct ControllerState {
    pub t_ini: usize,
    pub m: usize,
    pub p: usize,
    u_hist: VecDeque<DVector<f64>>,
    y_hist: VecDeque<DVector<f64>>,
    pub prev_z1: Option<DVector<f64>>,
    pub prev_plan: Option<Decoded>,
    pub k: usize,
}

impl ControllerState {
    pub fn new(t_ini: usize, m: usize, p: usize) -> Self {
        ControllerState {
            t_ini,
            m,
            p,
            u_hist: VecDeque::with_capacity(t_ini),
            y_hist: VecDeque::with_capacity(t_ini),
            prev_z1: None,
            prev_plan: None,
            k: 0,
        }
    }

    /// Loads a full window `u(k-T_ini+1..k-2)` ... as produced by [`IniWindow`], minus
    /// the newest input/output pair that the next [`Kdpc::step`] call supplies.
    pub fn preload(&mut self, u: &[DVector<f64>], y: &[DVector<f64>]) -> Result<()> {
        if u.len() + 1 != y.len() {
            return Err(Error::InvalidArgument("preload needs one more output than inputs".into()));
        }
        self.push_output(&y[0])?;
        for (ui, yi) in u.iter().zip(&y[1..]) {
            self.record(ui, yi)?;
        }
        Ok(())
    }

    pub fn push_output(&mut self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.p {
            return Err(Error::Dimension(format!("output has {} entries, expected {}", y.len(), self.p)));
        }
        self.y_hist.push_back(y.clone());
        while self.y_hist.len() > self.t_ini {
            self.y_hist.pop_front();
        }
        Ok(())
    }

    pub fn record(&mut self, u: &DVector<f64>, y: &DVector<f64>) -> Result<()> {
        if u.len() != self.m {
            return Err(Error::Dimension(format!("input has {} entries, expected {}", u.len(), self.m)));
        }
        self.u_hist.push_back(u.clone());
        while self.u_hist.len() + 1 > self.t_ini {
            self.u_hist.pop_front();
        }
        self.push_output(y)
    }

    pub fn is_full(&self) -> bool {
        self.u_hist.len() + 1 == self.t_ini && self.y_hist.len() == self.t_ini
    }

    pub fn window(&self) -> Result<IniWindow> {
        if !self.is_full() {
            return Err(Error::Controller(format!(
                "history holds {} inputs and {} outputs, need {} and {}",
                self.u_hist.len(),
                self.y_hist.len(),
                self.t_ini - 1,
                self.t_ini
            )));
        }
        let stack = |v: &VecDeque<DVector<f64>>, dim: usize| {
            let mut out = DVector::zeros(v.len() * dim);
            for (i, x) in v.iter().enumerate() {
                out.rows_mut(i * dim, dim).copy_from(x);
            }
            out
        };
        Ok(IniWindow::new(stack(&self.u_hist, self.m), stack(&self.y_hist, self.p)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub k: usize,
    pub y: DVector<f64>,
    pub u_applied: DVector<f64>,
    /// Whole planned input sequence `(u_0, ..., u_{N-1})`.
    pub u_seq: DVector<f64>,
    pub xi: f64,
    pub phi: DVector<f64>,
    pub z0: DVector<f64>,
    pub z1: DVector<f64>,
    pub z_n: DVector<f64>,
    pub e: DVector<f64>,
    pub value: f64,
    pub feasible: bool,
    pub fallback: bool,
    /// ADMM stopped early and the active-set pass from the candidate finished the solve.
    pub refined: bool,
    pub qp_status: QpStatus,
    pub qp_iterations: usize,
    /// Largest constraint violation of the shifted candidate (absent at the first step).
    pub candidate_violation: Option<f64>,
    pub terminal_violation: f64,
}

/// `r_k = V_{k+1} - V_k + λmin(Q)||z0*_k||² - σ(e(k+1))` for each consecutive pair,
/// with `σ = λ||e||²`, or the constant `λ` for the legacy regularization.
pub fn value_decrease_check(history: &[StepResult], lambda: f64, lambda_min_q: f64, reg: Regularization) -> Vec<f64> {
    history
        .windows(2)
        .map(|w| {
            let sigma = match reg {
                Regularization::LegacyXi => lambda,
                _ => lambda * w[1].e.norm_squared(),
            };
            w[1].value - w[0].value + lambda_min_q * w[0].z0.norm_squared() - sigma
        })
        .collect()
}

/// One CSV row per step: `k,u_1..,y_1..,xi,V,e_norm,feasible,qp_iterations`.
pub fn step_log_csv(history: &[StepResult]) -> String {
    let mut out = String::new();
    let (m, p) = history.first().map(|s| (s.u_applied.len(), s.y.len())).unwrap_or((1, 1));
    let mut header = vec!["k".to_string()];
    header.extend((1..=m).map(|i| format!("u_{i}")));
    header.extend((1..=p).map(|i| format!("y_{i}")));
    header.extend(["xi", "V", "e_norm", "feasible", "qp_iterations"].map(String::from));
    out.push_str(&header.join(","));
    out.push('\n');
    for s in history {
        let mut row = vec![s.k.to_string()];
        row.extend(s.u_applied.iter().map(|&v| fmt_f64(v)));
        row.extend(s.y.iter().map(|&v| fmt_f64(v)));
        row.push(fmt_f64(s.xi));
        row.push(fmt_f64(s.value));
        row.push(fmt_f64(s.e.norm()));
        row.push(s.feasible.to_string());
        row.push(s.qp_iterations.to_string());
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

pub fn write_step_log(path: &Path, history: &[StepResult]) -> Result<()> {
    artifact::write_text(path, &step_log_csv(history))
}

/// Closed-loop run record: plant trajectory plus controller diagnostics.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub states: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub steps: Vec<StepResult>,
}

/// Runs `steps` controller steps from `x0`. `history` holds the states
/// visited before `x0` together with the inputs applied between them
/// (`inputs.len() == states.len()`, the last input leading to `x0`).
pub fn run_closed_loop(
    ctrl: &Kdpc,
    plant: &dyn PlantModel,
    x0: &DVector<f64>,
    history: (&[DVector<f64>], &[DVector<f64>]),
    steps: usize,
) -> Result<ClosedLoop> {
    let (hist_x, hist_u) = history;
    if hist_x.len() + 1 != ctrl.map.t_ini || hist_u.len() != hist_x.len() {
        return Err(Error::InvalidArgument(format!("need {} past states and inputs", ctrl.map.t_ini - 1)));
    }
    let mut state = ctrl.new_state();
    let mut u_prev = DVector::zeros(ctrl.input_dim());
    if let Some((x_first, rest)) = hist_x.split_first() {
        state.push_output(&plant.output(x_first))?;
        for (i, x) in rest.iter().enumerate() {
            state.record(&hist_u[i], &plant.output(x))?;
        }
        u_prev = hist_u[hist_u.len() - 1].clone();
    }
    let mut x = x0.clone();
    let mut out = ClosedLoop { states: vec![x.clone()], outputs: vec![], inputs: vec![], steps: vec![] };
    for k in 0..steps {
        let y = plant.output(&x);
        let res = ctrl.step(&mut state, &y, &u_prev)?;
        u_prev = res.u_applied.clone();
        x = plant.step(&x, &u_prev);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged { step: k });
        }
        out.outputs.push(y);
        out.inputs.push(u_prev.clone());
        out.states.push(x.clone());
        out.steps.push(res);
    }
    Ok(out)
}
