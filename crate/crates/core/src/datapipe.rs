//! Past/future windows and the Hankel data matrices used for identification.
//!
//! Column `t` of every matrix belongs to time `k = t + T_ini - 1`: the past
//! window holds inputs `u(k-T_ini+1..k-1)` and outputs `y(k-T_ini+1..k)`, the
//! future window inputs `u(k..k+N-1)` and outputs `y(k+1..k+N)`. The lifted
//! sequence `z(t)` is the lift of the past window of column `t`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::linalg::{rank_report, vstack, RankReport};
use crate::plants::{fmt_f64, Trajectory};

/// `col(v(k), ..., v(k+j-1))`.
pub fn window(v: &[DVector<f64>], k: usize, j: usize) -> Result<DVector<f64>> {
    if j == 0 {
        return Ok(DVector::zeros(0));
    }
    if k + j > v.len() {
        return Err(Error::InvalidArgument(format!("window [{k}, {}) exceeds signal length {}", k + j, v.len())));
    }
    let dim = v[k].len();
    let mut out = DVector::zeros(dim * j);
    for i in 0..j {
        out.rows_mut(i * dim, dim).copy_from(&v[k + i]);
    }
    Ok(out)
}

/// Past data at time `k`: `T_ini - 1` inputs and `T_ini` outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct IniWindow {
    pub u_ini: DVector<f64>,
    pub y_ini: DVector<f64>,
}

impl IniWindow {
    pub fn new(u_ini: DVector<f64>, y_ini: DVector<f64>) -> Self {
        IniWindow { u_ini, y_ini }
    }

    pub fn zeros(t_ini: usize, m: usize, p: usize) -> Self {
        IniWindow { u_ini: DVector::zeros((t_ini - 1) * m), y_ini: DVector::zeros(t_ini * p) }
    }

    pub fn at(traj: &Trajectory, k: usize, t_ini: usize) -> Result<Self> {
        if t_ini == 0 || k + 1 < t_ini {
            return Err(Error::InvalidArgument(format!("need {t_ini} samples of history at time {k}")));
        }
        let start = k + 1 - t_ini;
        Ok(IniWindow { u_ini: window(&traj.u, start, t_ini - 1)?, y_ini: window(&traj.y, start, t_ini)? })
    }

    /// `col(u_ini, y_ini)`.
    pub fn stacked(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.u_ini.len() + self.y_ini.len());
        out.rows_mut(0, self.u_ini.len()).copy_from(&self.u_ini);
        out.rows_mut(self.u_ini.len(), self.y_ini.len()).copy_from(&self.y_ini);
        out
    }

    /// Most recent output `y(k)`.
    pub fn current_output(&self, p: usize) -> DVector<f64> {
        self.y_ini.rows(self.y_ini.len() - p, p).into_owned()
    }
}

pub fn ini_dim(t_ini: usize, m: usize, p: usize) -> usize {
    (t_ini - 1) * m + t_ini * p
}

#[derive(Debug, Clone, PartialEq)]
pub struct HankelSet {
    pub u_p: DMatrix<f64>,
    pub y_p: DMatrix<f64>,
    pub z_p: Option<DMatrix<f64>>,
    pub u_f: DMatrix<f64>,
    pub y_f: DMatrix<f64>,
    pub z_f: Option<DMatrix<f64>>,
    pub t_ini: usize,
    pub horizon: usize,
    /// Number of columns minus one.
    pub t: usize,
}

impl HankelSet {
    pub fn columns(&self) -> usize {
        self.t + 1
    }

    /// `[U_p; Y_p]`, one stacked past window per column.
    pub fn past(&self) -> DMatrix<f64> {
        vstack(&[&self.u_p, &self.y_p])
    }

    /// Writes one CSV per matrix (debugging aid).
    pub fn export_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut mats: Vec<(&str, &DMatrix<f64>)> =
            vec![("U_p", &self.u_p), ("Y_p", &self.y_p), ("U_f", &self.u_f), ("Y_f", &self.y_f)];
        if let Some(z) = &self.z_p {
            mats.push(("Z_p", z));
        }
        if let Some(z) = &self.z_f {
            mats.push(("Z_f", z));
        }
        for (name, m) in mats {
            let path = dir.join(format!("{name}.csv"));
            std::fs::write(&path, matrix_csv(m)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

pub fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| fmt_f64(m[(r, c)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Minimum column count `(m + p) T_ini + m N` (plus one, since columns run 0..=T).
pub fn min_columns(t_ini: usize, horizon: usize, m: usize, p: usize) -> usize {
    (m + p) * t_ini + m * horizon + 1
}

/// Largest `T` such that every window of the Hankel matrices fits in `traj`.
pub fn max_t(traj: &Trajectory, t_ini: usize, horizon: usize) -> Option<usize> {
    let by_y = traj.y.len().checked_sub(t_ini + horizon)?;
    let by_u = (traj.u.len() + 1).checked_sub(t_ini + horizon)?;
    Some(by_y.min(by_u))
}

/// Stacked past windows `[u_ini; y_ini]` for columns `0..count`.
pub fn past_windows(traj: &Trajectory, t_ini: usize, count: usize) -> Result<DMatrix<f64>> {
    let m = traj.input_dim();
    let p = traj.output_dim();
    let dim = ini_dim(t_ini, m, p);
    let mut out = DMatrix::zeros(dim, count);
    for t in 0..count {
        let w = IniWindow::at(traj, t + t_ini - 1, t_ini)?;
        out.column_mut(t).copy_from(&w.stacked());
    }
    Ok(out)
}

/// Number of lifted samples needed by [`build_hankels`] for a given `T`.
pub fn lifted_len(t: usize, horizon: usize) -> usize {
    t + horizon + 1
}

pub fn build_hankels(
    traj: &Trajectory,
    lifted: Option<&[DVector<f64>]>,
    t_ini: usize,
    horizon: usize,
) -> Result<HankelSet> {
    if t_ini == 0 || horizon == 0 {
        return Err(Error::InvalidArgument("T_ini and N must be at least 1".into()));
    }
    traj.validate()?;
    let m = traj.input_dim();
    let p = traj.output_dim();
    let needed_cols = min_columns(t_ini, horizon, m, p);
    let required = needed_cols - 1 + t_ini + horizon;
    let t = match max_t(traj, t_ini, horizon) {
        Some(t) if t + 1 >= needed_cols => t,
        _ => return Err(Error::InsufficientData { required, available: traj.y.len() }),
    };
    let cols = t + 1;
    let mut u_p = DMatrix::zeros((t_ini - 1) * m, cols);
    let mut y_p = DMatrix::zeros(t_ini * p, cols);
    let mut u_f = DMatrix::zeros(horizon * m, cols);
    let mut y_f = DMatrix::zeros(horizon * p, cols);
    for c in 0..cols {
        u_p.column_mut(c).copy_from(&window(&traj.u, c, t_ini - 1)?);
        y_p.column_mut(c).copy_from(&window(&traj.y, c, t_ini)?);
        u_f.column_mut(c).copy_from(&window(&traj.u, t_ini - 1 + c, horizon)?);
        y_f.column_mut(c).copy_from(&window(&traj.y, t_ini + c, horizon)?);
    }
    let (z_p, z_f) = match lifted {
        None => (None, None),
        Some(z) => {
            if z.len() < lifted_len(t, horizon) {
                return Err(Error::Dimension(format!(
                    "lifted sequence has {} samples, need {}",
                    z.len(),
                    lifted_len(t, horizon)
                )));
            }
            let l = z[0].len();
            let mut z_p = DMatrix::zeros(l, cols);
            let mut z_f = DMatrix::zeros(horizon * l, cols);
            for c in 0..cols {
                z_p.column_mut(c).copy_from(&z[c]);
                z_f.column_mut(c).copy_from(&window(z, c + 1, horizon)?);
            }
            (Some(z_p), Some(z_f))
        }
    };
    Ok(HankelSet { u_p, y_p, z_p, u_f, y_f, z_f, t_ini, horizon, t })
}

/// Numerical rank of `[Z_p; U_f]`.
pub fn check_excitation(z_p: &DMatrix<f64>, u_f: &DMatrix<f64>) -> Result<RankReport> {
    if z_p.ncols() != u_f.ncols() {
        return Err(Error::Dimension(format!("Z_p has {} columns, U_f has {}", z_p.ncols(), u_f.ncols())));
    }
    Ok(rank_report(&vstack(&[z_p, u_f])))
}

/// Splits an aligned trajectory at `floor(fraction * len)` without shuffling.
pub fn split_train_test(traj: &Trajectory, fraction: f64) -> Result<(Trajectory, Trajectory, usize)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("train fraction must be in (0, 1), got {fraction}")));
    }
    let n = traj.len();
    let split = (fraction * n as f64).floor() as usize;
    Ok((traj.slice(0, split), traj.slice(split, n), split))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub t_ini: usize,
    pub horizon: usize,
    pub samples: usize,
    pub split_index: usize,
    pub train_t: usize,
    pub test_t: usize,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_seq(vals: impl IntoIterator<Item = f64>) -> Vec<DVector<f64>> {
        vals.into_iter().map(|v| DVector::from_element(1, v)).collect()
    }

    fn ramp_traj(len: usize) -> Trajectory {
        // u(k) = k, y(k) = 100 + k so indices are readable from the values.
        Trajectory::new(scalar_seq((0..len).map(|k| k as f64)), scalar_seq((0..len).map(|k| 100.0 + k as f64)), None)
            .unwrap()
    }

    #[test]
    fn windows() {
        let v = scalar_seq([1.0, 2.0, 3.0, 4.0]);
        assert_eq!(window(&v, 0, 2).unwrap().as_slice(), &[1.0, 2.0]);
        assert_eq!(window(&v, 2, 2).unwrap().as_slice(), &[3.0, 4.0]);
        assert_eq!(window(&v, 1, 1).unwrap().as_slice(), &[2.0]);
        assert!(window(&v, 3, 2).is_err());
    }

    #[test]
    fn hankel_indices_small_case() {
        // Ten samples, T_ini = 2, N = 2; needs T + 1 >= 2*2 + 2 + 1 = 7 columns.
        let traj = ramp_traj(10);
        let h = build_hankels(&traj, None, 2, 2).unwrap();
        assert_eq!(h.t, 6);
        assert_eq!(h.columns(), 7);
        for c in 0..7 {
            let cf = c as f64;
            // U_p column c = u(c); Y_p = y(c), y(c+1).
            assert_eq!(h.u_p.column(c).as_slice(), &[cf]);
            assert_eq!(h.y_p.column(c).as_slice(), &[100.0 + cf, 101.0 + cf]);
            // U_f = u(c+1), u(c+2); Y_f = y(c+2), y(c+3).
            assert_eq!(h.u_f.column(c).as_slice(), &[cf + 1.0, cf + 2.0]);
            assert_eq!(h.y_f.column(c).as_slice(), &[102.0 + cf, 103.0 + cf]);
        }
    }

    #[test]
    fn future_outputs_start_at_t_ini_plus_column() {
        let traj = ramp_traj(60);
        let h = build_hankels(&traj, None, 5, 15).unwrap();
        for c in 0..h.columns() {
            assert_eq!(h.y_f[(0, c)], 100.0 + (5 + c) as f64);
        }
    }

    #[test]
    fn constant_signal_gives_identical_columns() {
        let traj = Trajectory::new(scalar_seq([2.0; 30]), scalar_seq([-1.0; 30]), None).unwrap();
        let h = build_hankels(&traj, None, 3, 4).unwrap();
        for c in 1..h.columns() {
            assert_eq!(h.past().column(c), h.past().column(0));
            assert_eq!(h.u_f.column(c), h.u_f.column(0));
            assert_eq!(h.y_f.column(c), h.y_f.column(0));
        }
    }

    #[test]
    fn insufficient_data_reports_minimum() {
        let traj = ramp_traj(8);
        match build_hankels(&traj, None, 2, 2) {
            Err(Error::InsufficientData { required, available }) => {
                assert_eq!(required, 10);
                assert_eq!(available, 8);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lifted_matrices_follow_column_index() {
        let traj = ramp_traj(12);
        let h0 = build_hankels(&traj, None, 2, 2).unwrap();
        let z = scalar_seq((0..lifted_len(h0.t, 2)).map(|t| 1000.0 + t as f64));
        let h = build_hankels(&traj, Some(&z), 2, 2).unwrap();
        let z_p = h.z_p.clone().unwrap();
        let z_f = h.z_f.clone().unwrap();
        for c in 0..h.columns() {
            assert_eq!(z_p[(0, c)], 1000.0 + c as f64);
            assert_eq!(z_f.column(c).as_slice(), &[1001.0 + c as f64, 1002.0 + c as f64]);
        }
    }

    #[test]
    fn shifting_start_shifts_columns() {
        let traj = ramp_traj(40);
        let shifted = traj.slice(1, 40);
        let a = build_hankels(&traj, None, 3, 4).unwrap();
        let b = build_hankels(&shifted, None, 3, 4).unwrap();
        for c in 0..b.columns() {
            assert_eq!(b.past().column(c), a.past().column(c + 1));
            assert_eq!(b.y_f.column(c), a.y_f.column(c + 1));
            assert_eq!(b.u_f.column(c), a.u_f.column(c + 1));
        }
    }

    #[test]
    fn future_window_matches_lti_simulation() {
        use crate::plants::{simulate, LtiPlant};
        let plant = LtiPlant::scalar(0.5, 1.0);
        let u = scalar_seq((0..50).map(|k| ((k * 7 % 11) as f64) - 5.0));
        let traj = simulate(&plant, &DVector::from_element(1, 0.3), &u).unwrap();
        let states = traj.x.clone().unwrap();
        let h = build_hankels(&traj, None, 2, 3).unwrap();
        for c in 0..h.columns() {
            let k = c + 1;
            let mut x = states[k][0];
            for i in 0..3 {
                x = 0.5 * x + h.u_f[(i, c)];
                assert!((h.y_f[(i, c)] - x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn excitation_rank() {
        let eye = DMatrix::<f64>::identity(3, 3);
        let z = eye.rows(0, 2).into_owned();
        let u = eye.rows(2, 1).into_owned();
        assert!(check_excitation(&z, &u).unwrap().full_row_rank);
        let zero_u = DMatrix::zeros(2, 3);
        assert!(!check_excitation(&z, &zero_u).unwrap().full_row_rank);
    }

    #[test]
    fn split_is_ordered() {
        let traj = ramp_traj(100);
        let (train, test, idx) = split_train_test(&traj, 0.7).unwrap();
        assert_eq!(idx, 70);
        assert_eq!(train.len(), 70);
        assert_eq!(test.y[0][0], 170.0);
    }
}
