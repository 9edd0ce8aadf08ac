//! Discrete-time benchmark plants and trajectory records.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A discrete-time plant `x(k+1) = f(x(k), u(k))`, `y(k) = h(x(k))`.
pub trait PlantModel {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn sample_time(&self) -> f64;
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn output(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// Cart with a nonlinear spring (`k0 e^{-x1} x1`) and a linear damper.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CartSpringDamper {
    pub k0: f64,
    pub damping: f64,
    pub mass: f64,
    pub ts: f64,
}

impl Default for CartSpringDamper {
    fn default() -> Self {
        CartSpringDamper { k0: 0.33, damping: 1.1, mass: 1.0, ts: 0.4 }
    }
}

impl CartSpringDamper {
    pub fn step_raw(&self, x: [f64; 2], u: f64) -> [f64; 2] {
        let Self { k0, damping, mass, ts } = *self;
        [
            x[0] + ts * x[1],
            x[1] - ts * k0 / mass * (-x[0]).exp() * x[0] - ts * damping / mass * x[1] + ts / mass * u,
        ]
    }
}

impl PlantModel for CartSpringDamper {
    fn state_dim(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn sample_time(&self) -> f64 {
        self.ts
    }
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let n = self.step_raw([x[0], x[1]], u[0]);
        DVector::from_column_slice(&n)
    }
    fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, x[0])
    }
}

/// Damped pendulum; state is (angular velocity, angle), output the angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Pendulum {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub friction: f64,
    pub ts: f64,
}

impl Default for Pendulum {
    fn default() -> Self {
        Pendulum { mass: 1.0, length: 1.0, gravity: 9.81, friction: 0.1, ts: 1.0 / 30.0 }
    }
}

impl Pendulum {
    pub fn inertia(&self) -> f64 {
        self.mass * self.length * self.length / 3.0
    }

    pub fn step_raw(&self, x: [f64; 2], u: f64) -> [f64; 2] {
        let j = self.inertia();
        let Self { mass, length, gravity, friction, ts } = *self;
        [
            (1.0 - friction * ts / j) * x[0] + ts / j * u - mass * length * gravity * ts / (2.0 * j) * x[1].sin(),
            ts * x[0] + x[1],
        ]
    }
}

impl PlantModel for Pendulum {
    fn state_dim(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn sample_time(&self) -> f64 {
        self.ts
    }
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let n = self.step_raw([x[0], x[1]], u[0]);
        DVector::from_column_slice(&n)
    }
    fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, x[1])
    }
}

/// Linear plant `x' = A x + B u`, `y = C x`, used as an exact oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiPlant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub ts: f64,
}

impl LtiPlant {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || c.ncols() != n {
            return Err(Error::Dimension(format!("LTI plant A {:?}, B {:?}, C {:?}", a.shape(), b.shape(), c.shape())));
        }
        Ok(LtiPlant { a, b, c, ts: 1.0 })
    }

    pub fn scalar(a: f64, b: f64) -> Self {
        LtiPlant {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, b),
            c: DMatrix::from_element(1, 1, 1.0),
            ts: 1.0,
        }
    }
}

impl PlantModel for LtiPlant {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    fn output_dim(&self) -> usize {
        self.c.nrows()
    }
    fn sample_time(&self) -> f64 {
        self.ts
    }
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
    fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c * x
    }
}

/// Serializable plant selection used by experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantSpec {
    CartSpringDamper(CartSpringDamper),
    Pendulum(Pendulum),
    Lti { a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, c: Vec<Vec<f64>> },
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map(|row| row.len()).unwrap_or(0);
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl PlantSpec {
    pub fn build(&self) -> Result<Box<dyn PlantModel + Send + Sync>> {
        Ok(match self {
            PlantSpec::CartSpringDamper(p) => Box::new(*p),
            PlantSpec::Pendulum(p) => Box::new(*p),
            PlantSpec::Lti { a, b, c } => {
                Box::new(LtiPlant::new(matrix_from_rows(a)?, matrix_from_rows(b)?, matrix_from_rows(c)?)?)
            }
        })
    }
}

/// Time-indexed record of a plant run.
///
/// `y` (and `x`, when present) hold one sample per visited state; `u` holds
/// the inputs applied between them, so `u.len()` is either `y.len()` or
/// `y.len() - 1` (the final state has no applied input yet).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub u: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub x: Option<Vec<DVector<f64>>>,
}

impl Trajectory {
    pub fn new(u: Vec<DVector<f64>>, y: Vec<DVector<f64>>, x: Option<Vec<DVector<f64>>>) -> Result<Self> {
        let t = Trajectory { u, y, x };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let ny = self.y.len();
        if self.u.len() != ny && self.u.len() + 1 != ny {
            return Err(Error::Dimension(format!("trajectory has {} inputs for {} outputs", self.u.len(), ny)));
        }
        if let Some(x) = &self.x {
            if x.len() != ny {
                return Err(Error::Dimension(format!("trajectory has {} states for {} outputs", x.len(), ny)));
            }
        }
        let finite = |v: &Vec<DVector<f64>>| v.iter().all(|s| s.iter().all(|e| e.is_finite()));
        if !finite(&self.u) || !finite(&self.y) || !self.x.as_ref().map(finite).unwrap_or(true) {
            return Err(Error::NonFinite("trajectory".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.u.first().map(|v| v.len()).unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.y.first().map(|v| v.len()).unwrap_or(0)
    }

    /// Number of samples carrying both an input and an output.
    pub fn len(&self) -> usize {
        self.u.len().min(self.y.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops trailing samples so every channel has the same length.
    pub fn aligned(&self) -> Trajectory {
        let n = self.len();
        Trajectory {
            u: self.u[..n].to_vec(),
            y: self.y[..n].to_vec(),
            x: self.x.as_ref().map(|x| x[..n].to_vec()),
        }
    }

    /// Samples `[start, end)` of an aligned copy.
    pub fn slice(&self, start: usize, end: usize) -> Trajectory {
        let a = self.aligned();
        Trajectory {
            u: a.u[start..end].to_vec(),
            y: a.y[start..end].to_vec(),
            x: a.x.as_ref().map(|x| x[start..end].to_vec()),
        }
    }

    pub fn to_csv(&self) -> String {
        let m = self.input_dim();
        let p = self.output_dim();
        let n = self.x.as_ref().and_then(|x| x.first()).map(|v| v.len()).unwrap_or(0);
        let mut out = String::from("k");
        for i in 1..=m {
            let _ = write!(out, ",u_{i}");
        }
        for i in 1..=p {
            let _ = write!(out, ",y_{i}");
        }
        if self.x.is_some() {
            for i in 1..=n {
                let _ = write!(out, ",x_{i}");
            }
        }
        out.push('\n');
        for k in 0..self.y.len() {
            let _ = write!(out, "{k}");
            for i in 0..m {
                match self.u.get(k) {
                    Some(u) => {
                        let _ = write!(out, ",{}", fmt_f64(u[i]));
                    }
                    None => out.push(','),
                }
            }
            for i in 0..p {
                let _ = write!(out, ",{}", fmt_f64(self.y[k][i]));
            }
            if let Some(x) = &self.x {
                for i in 0..n {
                    let _ = write!(out, ",{}", fmt_f64(x[k][i]));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Trajectory> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::InvalidArgument("empty trajectory CSV".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"k") {
            return Err(Error::InvalidArgument("trajectory CSV must start with column `k`".into()));
        }
        let count = |prefix: &str| cols.iter().filter(|c| c.starts_with(prefix)).count();
        let (m, p, n) = (count("u_"), count("y_"), count("x_"));
        let mut u = Vec::new();
        let mut y = Vec::new();
        let mut x = Vec::new();
        for (row, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 1 + m + p + n {
                return Err(Error::InvalidArgument(format!("trajectory CSV row {row} has {} fields", fields.len())));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|e| Error::InvalidArgument(format!("row {row}: {e}")))
            };
            if fields[1..1 + m].iter().all(|s| !s.trim().is_empty()) {
                let vals: Result<Vec<f64>> = fields[1..1 + m].iter().map(|s| parse(s)).collect();
                u.push(DVector::from_vec(vals?));
            }
            let vals: Result<Vec<f64>> = fields[1 + m..1 + m + p].iter().map(|s| parse(s)).collect();
            y.push(DVector::from_vec(vals?));
            if n > 0 {
                let vals: Result<Vec<f64>> = fields[1 + m + p..].iter().map(|s| parse(s)).collect();
                x.push(DVector::from_vec(vals?));
            }
        }
        Trajectory::new(u, y, if n > 0 { Some(x) } else { None })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::artifact::write_text(path, &self.to_csv())
    }

    pub fn read_csv(path: &Path) -> Result<Trajectory> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Trajectory::from_csv(&text).map_err(|e| Error::format(path, e))
    }
}

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Applies `u_seq` from `x0`. States and outputs have `u_seq.len() + 1` entries.
pub fn simulate(plant: &dyn PlantModel, x0: &DVector<f64>, u_seq: &[DVector<f64>]) -> Result<Trajectory> {
    if u_seq.is_empty() {
        return Err(Error::InvalidArgument("input sequence must not be empty".into()));
    }
    if x0.len() != plant.state_dim() {
        return Err(Error::Dimension(format!("initial state has {} entries, plant has {}", x0.len(), plant.state_dim())));
    }
    let mut xs = Vec::with_capacity(u_seq.len() + 1);
    let mut ys = Vec::with_capacity(u_seq.len() + 1);
    let mut x = x0.clone();
    for (k, u) in u_seq.iter().enumerate() {
        if u.len() != plant.input_dim() {
            return Err(Error::Dimension(format!("input {k} has {} entries, plant has {}", u.len(), plant.input_dim())));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged { step: k });
        }
        ys.push(plant.output(&x));
        let next = plant.step(&x, u);
        xs.push(x);
        x = next;
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Diverged { step: u_seq.len() });
    }
    ys.push(plant.output(&x));
    xs.push(x);
    Ok(Trajectory { u: u_seq.to_vec(), y: ys, x: Some(xs) })
}

/// States `x(-count), ..., x(-1)` that reach `x0` under zero input, found by
/// Newton iterations on `f(x_prev, 0) = x_next` with a finite-difference Jacobian.
/// Returns the states and the (zero) inputs applied between them.
pub fn zero_input_history(plant: &dyn PlantModel, x0: &DVector<f64>, count: usize) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let n = plant.state_dim();
    let u0 = DVector::zeros(plant.input_dim());
    let mut states = Vec::with_capacity(count);
    let mut next = x0.clone();
    for back in 0..count {
        let mut x = next.clone();
        let mut converged = false;
        for _ in 0..50 {
            let r = plant.step(&x, &u0) - &next;
            if r.amax() <= 1e-13 * (1.0 + next.amax()) {
                converged = true;
                break;
            }
            let mut jac = DMatrix::zeros(n, n);
            for j in 0..n {
                let h = 1e-7 * (1.0 + x[j].abs());
                let mut xp = x.clone();
                xp[j] += h;
                let mut xm = x.clone();
                xm[j] -= h;
                jac.set_column(j, &((plant.step(&xp, &u0) - plant.step(&xm, &u0)) / (2.0 * h)));
            }
            let dx = jac.lu().solve(&r).ok_or_else(|| Error::NotConverged { what: "backward step (singular Jacobian)", iterations: back + 1 })?;
            x -= dx;
            if !x.iter().all(|v| v.is_finite()) {
                break;
            }
        }
        if !converged {
            return Err(Error::NotConverged { what: "backward step", iterations: back + 1 });
        }
        states.push(x.clone());
        next = x;
    }
    states.reverse();
    Ok((states, vec![u0; count]))
}
