//! Terminal ingredients: cost `P`, gain `K` (`u = K z`), the lifted-state
//! box `X_z`, and an invariant terminal set `X_T` for `z' = (Ã + B̃K) z`.

use std::path::Path;

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, matrix_from_rows_shaped, matrix_rows, vector_from, Header};
use crate::error::{Error, Result};
use crate::numerics::dare::lyapunov_residual;
use crate::numerics::linalg::{min_eigenvalue_sym, symmetrize};
use crate::numerics::lp::is_redundant;
use crate::numerics::solve_dare;
use crate::observables::ObservableMap;

pub const TERMINAL_FORMAT: &str = "kdpc-terminal";
pub const TERMINAL_VERSION: u32 = 1;

/// `{z : M z <= b}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyhedron {
    pub m: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Polyhedron {
    pub fn new(m: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if m.nrows() != b.len() {
            return Err(Error::Dimension(format!("{} rows but {} bounds", m.nrows(), b.len())));
        }
        if !b.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("polyhedron bounds".into()));
        }
        Ok(Polyhedron { m, b })
    }

    pub fn dim(&self) -> usize {
        self.m.ncols()
    }

    pub fn rows(&self) -> usize {
        self.m.nrows()
    }

    /// `max_i (M_i z - b_i)`; non-positive inside.
    pub fn max_violation(&self, z: &DVector<f64>) -> f64 {
        (&self.m * z - &self.b).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, z: &DVector<f64>, tol: f64) -> bool {
        self.rows() == 0 || self.max_violation(z) <= tol
    }

    /// Radius of the largest origin-centred ball inside the set.
    pub fn interior_radius(&self) -> f64 {
        (0..self.rows())
            .map(|i| {
                let n = self.m.row(i).norm();
                if n > 0.0 {
                    self.b[i] / n
                } else if self.b[i] >= 0.0 {
                    f64::INFINITY
                } else {
                    f64::NEG_INFINITY
                }
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Hit-and-run samples started at the origin (which must be interior).
    /// Requires a bounded set.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Uniform::new(-1.0, 1.0);
        let dim = self.dim();
        let mut z = DVector::zeros(dim);
        let burn = 20;
        let mut out = Vec::with_capacity(count);
        for step in 0..(count + burn) {
            let mut d = DVector::from_fn(dim, |_, _| normal.sample(&mut rng));
            let nd = d.norm();
            if nd == 0.0 {
                continue;
            }
            d /= nd;
            let md = &self.m * &d;
            let slack = &self.b - &self.m * &z;
            let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
            for i in 0..self.rows() {
                if md[i] > 1e-14 {
                    hi = hi.min(slack[i] / md[i]);
                } else if md[i] < -1e-14 {
                    lo = lo.max(slack[i] / md[i]);
                }
            }
            if lo.is_finite() && hi.is_finite() && hi > lo {
                let t: f64 = rng.gen_range(lo..=hi);
                z += d * t;
            }
            if step >= burn {
                out.push(z.clone());
            }
        }
        out
    }

    /// Drops rows implied by the others, scanning from the last row so that
    /// of two equivalent rows the earlier one survives.
    pub fn prune(&self, tol: f64) -> Polyhedron {
        let mut keep: Vec<bool> = vec![true; self.rows()];
        let start = DVector::zeros(self.dim());
        for i in (0..self.rows()).rev() {
            let others: Vec<usize> = (0..self.rows()).filter(|&j| j != i && keep[j]).collect();
            let m = DMatrix::from_fn(others.len(), self.dim(), |r, c| self.m[(others[r], c)]);
            let b = DVector::from_fn(others.len(), |r, _| self.b[others[r]]);
            let a = self.m.row(i).transpose();
            if is_redundant(&a, self.b[i], &m, &b, &start, tol) {
                keep[i] = false;
            }
        }
        self.select(&keep)
    }

    fn select(&self, keep: &[bool]) -> Polyhedron {
        let idx: Vec<usize> = (0..self.rows()).filter(|&i| keep[i]).collect();
        Polyhedron {
            m: DMatrix::from_fn(idx.len(), self.dim(), |r, c| self.m[(idx[r], c)]),
            b: DVector::from_fn(idx.len(), |r, _| self.b[idx[r]]),
        }
    }
}

/// Axis-aligned box `lo <= z <= hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxSet {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.iter().zip(&hi).any(|(l, h)| !(l <= h)) {
            return Err(Error::InvalidArgument("box needs lo <= hi componentwise".into()));
        }
        Ok(BoxSet { lo, hi })
    }

    pub fn symmetric(dim: usize, bound: f64) -> Self {
        BoxSet { lo: vec![-bound; dim], hi: vec![bound; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, z: &DVector<f64>, tol: f64) -> bool {
        z.iter().enumerate().all(|(i, &v)| v >= self.lo[i] - tol && v <= self.hi[i] + tol)
    }

    /// Rows `[I; -I] z <= [hi; -lo]`.
    pub fn to_polyhedron(&self) -> Polyhedron {
        let n = self.dim();
        let mut m = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for i in 0..n {
            m[(2 * i, i)] = 1.0;
            b[2 * i] = self.hi[i];
            m[(2 * i + 1, i)] = -1.0;
            b[2 * i + 1] = -self.lo[i];
        }
        Polyhedron { m, b }
    }

    /// Largest `|z_i|` bound per coordinate.
    fn radius(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| self.lo[i].abs().max(self.hi[i].abs()))
    }
}

/// Per-coordinate range of `φ` over uniformly sampled past windows, grown to
/// include the origin and inflated by `margin`.
pub fn estimate_xz(
    map: &ObservableMap,
    u_box: &BoxSet,
    y_box: &BoxSet,
    samples: usize,
    margin: f64,
    seed: u64,
) -> Result<BoxSet> {
    if samples < 1000 {
        return Err(Error::InvalidArgument(format!("need at least 1000 samples, got {samples}")));
    }
    if !(margin >= 1.0) {
        return Err(Error::InvalidArgument(format!("margin must be >= 1, got {margin}")));
    }
    if u_box.dim() != map.m || y_box.dim() != map.p {
        return Err(Error::Dimension("input/output boxes do not match the map".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = map.lifted_dim();
    let mut lo = vec![0.0f64; l];
    let mut hi = vec![0.0f64; l];
    let nu = (map.t_ini - 1) * map.m;
    let mut x = DVector::zeros(map.input_dim());
    for _ in 0..samples {
        for i in 0..nu {
            let c = i % map.m;
            x[i] = rng.gen_range(u_box.lo[c]..=u_box.hi[c]);
        }
        for i in 0..map.t_ini * map.p {
            let c = i % map.p;
            x[nu + i] = rng.gen_range(y_box.lo[c]..=y_box.hi[c]);
        }
        let z = map.lift(&x)?;
        for i in 0..l {
            lo[i] = lo[i].min(z[i]);
            hi[i] = hi[i].max(z[i]);
        }
    }
    // Inflate about the centre of the range, then make sure the origin keeps
    // a clearance of (margin - 1) / 2 of the range on both sides.
    let floor = 1e-6;
    let pad: Vec<f64> = (0..l).map(|i| ((margin - 1.0) * 0.5 * (hi[i] - lo[i])).max(floor)).collect();
    let lo = (0..l).map(|i| (lo[i] - pad[i]).min(-pad[i])).collect();
    let hi = (0..l).map(|i| (hi[i] + pad[i]).max(pad[i])).collect();
    BoxSet::new(lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetRepresentation {
    /// Maximal constraint-admissible invariant polyhedron.
    MaximalInvariant,
    /// Box inscribed in the largest admissible ellipsoid `z'Pz <= c`.
    EllipsoidInnerBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalOptions {
    pub max_iterations: usize,
    /// Above this lifted dimension the ellipsoidal set is used.
    pub max_exact_dim: usize,
    pub redundancy_tol: f64,
    /// The gain is computed with input weight `gain_weight * R` (>= 1). Larger
    /// values give a gentler `K` and a larger admissible set; `P` still
    /// satisfies the decrease condition for the original `R`.
    #[serde(default = "unit")]
    pub gain_weight: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for TerminalOptions {
    fn default() -> Self {
        TerminalOptions { max_iterations: 200, max_exact_dim: 12, redundancy_tol: 1e-9, gain_weight: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalIngredients {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub a_cl: DMatrix<f64>,
    pub set: Polyhedron,
    pub representation: SetRepresentation,
    /// Ellipsoid level `c` when the ellipsoidal fallback is active.
    pub level: Option<f64>,
    pub xz: BoxSet,
    pub u_box: BoxSet,
    pub closed_loop_radius: f64,
    /// Largest eigenvalue of `(A+BK)'P(A+BK) - P + Q + K'RK` (must be <= 0).
    pub lyapunov_max_eig: f64,
    pub dare_residual: f64,
    pub iterations: usize,
}

/// Admissible constraint rows `{z ∈ X_z, K z ∈ U}`.
fn admissible_rows(k: &DMatrix<f64>, xz: &BoxSet, u_box: &BoxSet) -> Polyhedron {
    let zb = xz.to_polyhedron();
    let ub = u_box.to_polyhedron();
    let ku = &ub.m * k;
    let l = k.ncols();
    let mut m = DMatrix::zeros(zb.rows() + ku.nrows(), l);
    m.rows_mut(0, zb.rows()).copy_from(&zb.m);
    m.rows_mut(zb.rows(), ku.nrows()).copy_from(&ku);
    let mut b = DVector::zeros(m.nrows());
    b.rows_mut(0, zb.rows()).copy_from(&zb.b);
    b.rows_mut(zb.rows(), ub.rows()).copy_from(&ub.b);
    normalize_rows(&Polyhedron { m, b })
}

fn normalize_rows(p: &Polyhedron) -> Polyhedron {
    let mut m = p.m.clone();
    let mut b = p.b.clone();
    for i in 0..m.nrows() {
        let n = m.row(i).norm();
        if n > 0.0 {
            m.row_mut(i).scale_mut(1.0 / n);
            b[i] /= n;
        }
    }
    Polyhedron { m, b }
}

/// Maximal invariant subset of `admissible` for `z' = a_cl z`, by repeated
/// pre-images `M a_cl^t` with per-row LP redundancy tests. Only rows found
/// non-redundant propagate further.
pub fn maximal_invariant_set(
    a_cl: &DMatrix<f64>,
    admissible: &Polyhedron,
    bound: &BoxSet,
    opts: &TerminalOptions,
) -> Result<(Polyhedron, usize)> {
    let l = a_cl.nrows();
    let start = DVector::zeros(l);
    let radius = bound.radius();
    let mut set = admissible.prune(opts.redundancy_tol);
    let mut frontier: Vec<usize> = (0..set.rows()).collect();
    for iteration in 1..=opts.max_iterations {
        let mut added_m: Vec<DVector<f64>> = Vec::new();
        let mut added_b: Vec<f64> = Vec::new();
        for &i in &frontier {
            let mut row = (set.m.row(i) * a_cl).transpose();
            let mut beta = set.b[i];
            let n = row.norm();
            if n == 0.0 {
                continue;
            }
            row /= n;
            beta /= n;
            // Cheap bound over the enclosing box before the LP.
            if row.abs().dot(&radius) <= beta {
                continue;
            }
            let grown = stack(&set, &added_m, &added_b);
            if !is_redundant(&row, beta, &grown.m, &grown.b, &start, opts.redundancy_tol) {
                added_m.push(row);
                added_b.push(beta);
            }
        }
        if added_m.is_empty() {
            let final_set = set.prune(opts.redundancy_tol);
            debug!("invariant set converged after {iteration} iterations with {} rows", final_set.rows());
            return Ok((final_set, iteration));
        }
        let first_new = set.rows();
        set = stack(&set, &added_m, &added_b);
        frontier = (first_new..set.rows()).collect();
        debug!("invariant set iteration {iteration}: {} rows", set.rows());
    }
    Err(Error::InvariantSetGrowth { iterations: opts.max_iterations, rows: set.rows() })
}

fn stack(set: &Polyhedron, rows: &[DVector<f64>], b: &[f64]) -> Polyhedron {
    if rows.is_empty() {
        return set.clone();
    }
    let l = set.dim();
    let mut m = DMatrix::zeros(set.rows() + rows.len(), l);
    m.rows_mut(0, set.rows()).copy_from(&set.m);
    for (j, r) in rows.iter().enumerate() {
        m.row_mut(set.rows() + j).copy_from(&r.transpose());
    }
    let mut bb = DVector::zeros(set.rows() + rows.len());
    bb.rows_mut(0, set.rows()).copy_from(&set.b);
    for (j, v) in b.iter().enumerate() {
        bb[set.rows() + j] = *v;
    }
    Polyhedron { m, b: bb }
}

/// `c = min_i g_i² / (h_i P⁻¹ h_i')` so that `z'Pz <= c` satisfies every row,
/// and a box inscribed in the ellipsoid.
fn ellipsoid_set(p: &DMatrix<f64>, admissible: &Polyhedron) -> Result<(Polyhedron, f64)> {
    let p_inv = p.clone().try_inverse().ok_or_else(|| Error::InvalidArgument("terminal cost is singular".into()))?;
    let mut c = f64::INFINITY;
    for i in 0..admissible.rows() {
        let h = admissible.m.row(i).transpose();
        let s = (h.transpose() * &p_inv * &h)[(0, 0)];
        if s > 0.0 {
            c = c.min(admissible.b[i] * admissible.b[i] / s);
        }
    }
    // On the cube |z_i| <= r: z'Pz <= λmax(P) L r².
    let l = p.nrows();
    let lam_max = symmetrize(p).symmetric_eigenvalues().max();
    let r = (c / (lam_max * l as f64)).sqrt();
    Ok((BoxSet::symmetric(l, r).to_polyhedron(), c))
}

pub fn compute_terminal(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    xz: &BoxSet,
    u_box: &BoxSet,
    opts: &TerminalOptions,
) -> Result<TerminalIngredients> {
    if xz.dim() != a.nrows() || u_box.dim() != b.ncols() {
        return Err(Error::Dimension("constraint boxes do not match (Ã, B̃)".into()));
    }
    if !(opts.gain_weight >= 1.0) || !opts.gain_weight.is_finite() {
        return Err(Error::InvalidArgument(format!("gain weight must be >= 1, got {}", opts.gain_weight)));
    }
    let dare = solve_dare(a, b, q, &(r * opts.gain_weight))?;
    let (p, k) = (dare.p, dare.k);
    let a_cl = a + b * &k;
    let lyap = symmetrize(&lyapunov_residual(a, b, q, r, &p, &k));
    let lyapunov_max_eig = -min_eigenvalue_sym(&(-lyap));
    let admissible = admissible_rows(&k, xz, u_box);
    if admissible.b.iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidArgument("the origin is not interior to the admissible set".into()));
    }
    let (set, representation, level, iterations) = if a.nrows() <= opts.max_exact_dim {
        let (set, it) = maximal_invariant_set(&a_cl, &admissible, xz, opts)?;
        (set, SetRepresentation::MaximalInvariant, None, it)
    } else {
        warn!("lifted dimension {} above {}; using the ellipsoidal terminal set", a.nrows(), opts.max_exact_dim);
        let (set, c) = ellipsoid_set(&p, &admissible)?;
        (set, SetRepresentation::EllipsoidInnerBox, Some(c), 0)
    };
    info!(
        "terminal set: {} rows, ρ(A+BK) = {:.4}, DARE residual {:.2e}",
        set.rows(),
        dare.closed_loop_radius,
        dare.residual
    );
    Ok(TerminalIngredients {
        p,
        k,
        q: q.clone(),
        r: r.clone(),
        a_cl,
        set,
        representation,
        level,
        xz: xz.clone(),
        u_box: u_box.clone(),
        closed_loop_radius: dare.closed_loop_radius,
        lyapunov_max_eig,
        dare_residual: dare.residual,
        iterations,
    })
}

/// Violation counts over sampled terminal states.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub samples: usize,
    pub invariance_violations: usize,
    pub input_violations: usize,
    pub state_violations: usize,
    pub lyapunov_violations: usize,
}

impl InvarianceReport {
    pub fn total(&self) -> usize {
        self.invariance_violations + self.input_violations + self.state_violations + self.lyapunov_violations
    }
}

impl TerminalIngredients {
    pub fn check_samples(&self, count: usize, seed: u64, tol: f64) -> InvarianceReport {
        let mut rep = InvarianceReport { samples: count, ..Default::default() };
        let lyap = self.a_cl.transpose() * &self.p * &self.a_cl - &self.p + &self.q + self.k.transpose() * &self.r * &self.k;
        for z in self.set.sample(count, seed) {
            let next = &self.a_cl * &z;
            if !self.set.contains(&next, tol) {
                rep.invariance_violations += 1;
            }
            if !self.u_box.contains(&(&self.k * &z), tol) {
                rep.input_violations += 1;
            }
            if !self.xz.contains(&z, tol) {
                rep.state_violations += 1;
            }
            if (z.transpose() * &lyap * &z)[(0, 0)] > 1e-8 * z.norm_squared() {
                rep.lyapunov_violations += 1;
            }
        }
        rep
    }

    pub fn to_file(&self) -> TerminalFile {
        TerminalFile {
            header: Header::new(TERMINAL_FORMAT, TERMINAL_VERSION),
            lifted_dim: self.p.nrows(),
            input_dim: self.k.nrows(),
            p: matrix_rows(&self.p),
            k: matrix_rows(&self.k),
            q: matrix_rows(&self.q),
            r: matrix_rows(&self.r),
            a_cl: matrix_rows(&self.a_cl),
            m_n: matrix_rows(&self.set.m),
            b_n: self.set.b.as_slice().to_vec(),
            representation: self.representation,
            level: self.level,
            xz: self.xz.clone(),
            u_box: self.u_box.clone(),
            diagnostics: TerminalDiagnostics {
                closed_loop_radius: self.closed_loop_radius,
                lyapunov_max_eig: self.lyapunov_max_eig,
                dare_residual: self.dare_residual,
                iterations: self.iterations,
                rows: self.set.rows(),
                interior_radius: self.set.interior_radius(),
            },
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_json(path, &self.to_file())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: TerminalFile = artifact::read_json(path)?;
        file.into_ingredients().map_err(|e| Error::format(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalDiagnostics {
    pub closed_loop_radius: f64,
    pub lyapunov_max_eig: f64,
    pub dare_residual: f64,
    pub iterations: usize,
    pub rows: usize,
    pub interior_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalFile {
    #[serde(flatten)]
    pub header: Header,
    pub lifted_dim: usize,
    pub input_dim: usize,
    pub p: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub a_cl: Vec<Vec<f64>>,
    pub m_n: Vec<Vec<f64>>,
    pub b_n: Vec<f64>,
    pub representation: SetRepresentation,
    pub level: Option<f64>,
    pub xz: BoxSet,
    pub u_box: BoxSet,
    pub diagnostics: TerminalDiagnostics,
}

impl TerminalFile {
    pub fn into_ingredients(self) -> Result<TerminalIngredients> {
        self.header.expect(TERMINAL_FORMAT, TERMINAL_VERSION)?;
        let (l, m) = (self.lifted_dim, self.input_dim);
        Ok(TerminalIngredients {
            p: matrix_from_rows_shaped(&self.p, l)?,
            k: matrix_from_rows_shaped(&self.k, l)?,
            q: matrix_from_rows_shaped(&self.q, l)?,
            r: matrix_from_rows_shaped(&self.r, m)?,
            a_cl: matrix_from_rows_shaped(&self.a_cl, l)?,
            set: Polyhedron::new(matrix_from_rows_shaped(&self.m_n, l)?, vector_from(&self.b_n))?,
            representation: self.representation,
            level: self.level,
            xz: self.xz,
            u_box: self.u_box,
            closed_loop_radius: self.diagnostics.closed_loop_radius,
            lyapunov_max_eig: self.diagnostics.lyapunov_max_eig,
            dare_residual: self.diagnostics.dare_residual,
            iterations: self.diagnostics.iterations,
        })
    }
}
