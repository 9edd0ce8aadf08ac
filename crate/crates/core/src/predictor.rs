//! Stage-2 least-squares fit of the lifted multi-step predictor
//! `z_[1,N] = Ψ z_0 + Γ u_[0,N-1]` and the one-step pair `(Ã, B̃)`.

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::artifact::{self, matrix_from_rows_shaped, matrix_rows, Header};
use crate::error::{Error, Result};
use crate::numerics::linalg::{rank_report, solve_least_squares, vstack, RankReport};

pub const PREDICTOR_FORMAT: &str = "kdpc-predictor";
pub const PREDICTOR_VERSION: u32 = 1;

/// Relative ridge `1e-8 σ_max²` used when the fallback is enabled.
pub const RIDGE_FACTOR: f64 = 1e-8;

/// Which prediction matrices the controller condenses with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionForm {
    /// The independently fitted `Ψ^LS`, `Γ^LS`.
    LeastSquares,
    /// `Ψ(Ã)`, `Γ(Ã, B̃)` rebuilt from the extracted one-step pair.
    #[default]
    Structured,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiStepPredictor {
    pub psi: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub horizon: usize,
    /// Frobenius norm of `Z_f - Ψ Z_p - Γ U_f`.
    pub residual: f64,
    pub rank: RankReport,
    /// Ridge actually applied (0 for the plain pseudo-inverse).
    pub ridge: f64,
}

/// `Ψ(A) = [A; A²; ...; A^N]` and the block lower-triangular Toeplitz `Γ(A, B)`.
pub fn structured_matrices(a: &DMatrix<f64>, b: &DMatrix<f64>, horizon: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    if !a.is_square() || b.nrows() != a.nrows() {
        return Err(Error::Dimension(format!("A is {:?}, B is {:?}", a.shape(), b.shape())));
    }
    let (l, m) = b.shape();
    let mut psi = DMatrix::zeros(horizon * l, l);
    // powers[i] = A^i
    let mut powers = vec![DMatrix::identity(l, l)];
    for i in 1..=horizon {
        let next = a * &powers[i - 1];
        psi.view_mut(((i - 1) * l, 0), (l, l)).copy_from(&next);
        powers.push(next);
    }
    let mut gamma = DMatrix::zeros(horizon * l, horizon * m);
    for i in 0..horizon {
        for j in 0..=i {
            let blk = &powers[i - j] * b;
            gamma.view_mut((i * l, j * m), (l, m)).copy_from(&blk);
        }
    }
    Ok((psi, gamma))
}

/// `[Ψ^LS Γ^LS] = Z_f [Z_p; U_f]^†`.
///
/// A rank-deficient regressor is an error unless `ridge_fallback` is set, in
/// which case a ridge of `1e-8 σ_max²` regularizes the fit.
pub fn fit_predictor(
    z_p: &DMatrix<f64>,
    z_f: &DMatrix<f64>,
    u_f: &DMatrix<f64>,
    c: &DMatrix<f64>,
    ridge_fallback: bool,
) -> Result<MultiStepPredictor> {
    let l = z_p.nrows();
    if l == 0 || z_f.nrows() % l != 0 {
        return Err(Error::Dimension(format!("Z_f has {} rows, not a multiple of L = {l}", z_f.nrows())));
    }
    let horizon = z_f.nrows() / l;
    if u_f.nrows() % horizon != 0 || u_f.nrows() == 0 {
        return Err(Error::Dimension(format!("U_f has {} rows for horizon {horizon}", u_f.nrows())));
    }
    let m = u_f.nrows() / horizon;
    if z_p.ncols() != z_f.ncols() || z_p.ncols() != u_f.ncols() {
        return Err(Error::Dimension("Z_p, Z_f and U_f must share their column count".into()));
    }
    if c.ncols() != l {
        return Err(Error::Dimension(format!("C has {} columns, L = {l}", c.ncols())));
    }
    let reg = vstack(&[z_p, u_f]);
    let rank = rank_report(&reg);
    let ridge = if rank.full_row_rank {
        0.0
    } else if ridge_fallback {
        let r = RIDGE_FACTOR * rank.sigma_max * rank.sigma_max;
        warn!("regressor rank {} < {} rows; applying ridge {r:.3e}", rank.rank, rank.rows);
        r
    } else {
        return Err(Error::RankDeficient { rank: rank.rank, rows: rank.rows });
    };
    let ls = solve_least_squares(&reg, z_f, ridge)?;
    let psi = ls.x.columns(0, l).into_owned();
    let gamma = ls.x.columns(l, horizon * m).into_owned();
    let residual = (z_f - &psi * z_p - &gamma * u_f).norm();
    let a = psi.rows(0, l).into_owned();
    let b = gamma.view((0, 0), (l, m)).into_owned();
    Ok(MultiStepPredictor { psi, gamma, a, b, c: c.clone(), horizon, residual, rank, ridge })
}

impl MultiStepPredictor {
    pub fn lifted_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn structured(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        structured_matrices(&self.a, &self.b, self.horizon).expect("dimensions checked at fit time")
    }

    pub fn matrices(&self, form: PredictionForm) -> (DMatrix<f64>, DMatrix<f64>) {
        match form {
            PredictionForm::LeastSquares => (self.psi.clone(), self.gamma.clone()),
            PredictionForm::Structured => self.structured(),
        }
    }

    /// Relative Frobenius distances of `Ψ^LS`, `Γ^LS` from their structured counterparts.
    pub fn structure_mismatch(&self) -> (f64, f64) {
        let (ps, gs) = self.structured();
        let rel = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).norm() / b.norm().max(f64::MIN_POSITIVE);
        (rel(&self.psi, &ps), rel(&self.gamma, &gs))
    }

    /// `z_[1,N] = Ψ^LS z0 + Γ^LS u`.
    pub fn predict(&self, z0: &DVector<f64>, u_seq: &DVector<f64>) -> Result<DVector<f64>> {
        if z0.len() != self.lifted_dim() || u_seq.len() != self.horizon * self.input_dim() {
            return Err(Error::Dimension(format!(
                "z0 has {} entries (L = {}), u has {} (N m = {})",
                z0.len(),
                self.lifted_dim(),
                u_seq.len(),
                self.horizon * self.input_dim()
            )));
        }
        Ok(&self.psi * z0 + &self.gamma * u_seq)
    }

    /// `C` applied to every block of a stacked lifted trajectory.
    pub fn outputs(&self, z_traj: &DMatrix<f64>) -> DMatrix<f64> {
        let l = self.lifted_dim();
        let p = self.output_dim();
        let steps = z_traj.nrows() / l;
        let mut out = DMatrix::zeros(steps * p, z_traj.ncols());
        for i in 0..steps {
            out.rows_mut(i * p, p).copy_from(&(&self.c * z_traj.rows(i * l, l)));
        }
        out
    }

    pub fn to_file(&self) -> PredictorFile {
        let (psi_mismatch, gamma_mismatch) = self.structure_mismatch();
        PredictorFile {
            header: Header::new(PREDICTOR_FORMAT, PREDICTOR_VERSION),
            horizon: self.horizon,
            lifted_dim: self.lifted_dim(),
            input_dim: self.input_dim(),
            output_dim: self.output_dim(),
            psi: matrix_rows(&self.psi),
            gamma: matrix_rows(&self.gamma),
            a: matrix_rows(&self.a),
            b: matrix_rows(&self.b),
            c: matrix_rows(&self.c),
            residual: self.residual,
            rank: self.rank.clone(),
            ridge: self.ridge,
            psi_structure_mismatch: psi_mismatch,
            gamma_structure_mismatch: gamma_mismatch,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_json(path, &self.to_file())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: PredictorFile = artifact::read_json(path)?;
        file.into_predictor().map_err(|e| Error::format(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorFile {
    #[serde(flatten)]
    pub header: Header,
    pub horizon: usize,
    pub lifted_dim: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub psi: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub residual: f64,
    pub rank: RankReport,
    pub ridge: f64,
    pub psi_structure_mismatch: f64,
    pub gamma_structure_mismatch: f64,
}

impl PredictorFile {
    pub fn into_predictor(self) -> Result<MultiStepPredictor> {
        self.header.expect(PREDICTOR_FORMAT, PREDICTOR_VERSION)?;
        let (n, l, m) = (self.horizon, self.lifted_dim, self.input_dim);
        let pred = MultiStepPredictor {
            psi: matrix_from_rows_shaped(&self.psi, l)?,
            gamma: matrix_from_rows_shaped(&self.gamma, n * m)?,
            a: matrix_from_rows_shaped(&self.a, l)?,
            b: matrix_from_rows_shaped(&self.b, m)?,
            c: matrix_from_rows_shaped(&self.c, l)?,
            horizon: n,
            residual: self.residual,
            rank: self.rank,
            ridge: self.ridge,
        };
        if pred.psi.nrows() != n * l || pred.gamma.nrows() != n * l || pred.a.nrows() != l || pred.b.nrows() != l {
            return Err(Error::Dimension("predictor matrices disagree with the recorded dimensions".into()));
        }
        Ok(pred)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Lifted data from `z' = a z + b u`, arranged as Z_p, Z_f, U_f.
    fn linear_data(a: &DMatrix<f64>, b: &DMatrix<f64>, horizon: usize, cols: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, m) = b.shape();
        let len = cols + horizon + 1;
        let u: Vec<DVector<f64>> = (0..len).map(|_| DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0))).collect();
        let mut z = vec![DVector::from_fn(l, |_, _| rng.gen_range(-1.0..1.0))];
        for k in 0..len {
            let next = a * &z[k] + b * &u[k];
            z.push(next);
        }
        let mut z_p = DMatrix::zeros(l, cols);
        let mut z_f = DMatrix::zeros(horizon * l, cols);
        let mut u_f = DMatrix::zeros(horizon * m, cols);
        for c in 0..cols {
            z_p.column_mut(c).copy_from(&z[c]);
            for i in 0..horizon {
                z_f.view_mut((i * l, c), (l, 1)).copy_from(&z[c + i + 1]);
                u_f.view_mut((i * m, c), (m, 1)).copy_from(&u[c + i]);
            }
        }
        (z_p, z_f, u_f)
    }

    #[test]
    fn structured_scalar_examples() {
        let a = DMatrix::from_element(1, 1, 2.0);
        let b = DMatrix::from_element(1, 1, 1.0);
        let (psi, _) = structured_matrices(&a, &b, 3).unwrap();
        assert_eq!(psi.as_slice(), &[2.0, 4.0, 8.0]);
        let (_, gamma) = structured_matrices(&a, &b, 2).unwrap();
        assert_eq!(gamma, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 2.0, 1.0]));
        assert!(structured_matrices(&a, &b, 0).is_err());
    }

    #[test]
    fn structured_block_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let b = DMatrix::from_fn(3, 1, |_, _| rng.gen_range(-1.0..1.0));
        let (psi, gamma) = structured_matrices(&a, &b, 4).unwrap();
        for i in 1..4 {
            let prev = psi.rows((i - 1) * 3, 3).into_owned();
            assert!((psi.rows(i * 3, 3) - &a * prev).amax() < 1e-14);
            for j in 0..i {
                let expect = &a * gamma.view(((i - 1) * 3, j), (3, 1));
                assert!((gamma.view((i * 3, j), (3, 1)) - expect).amax() < 1e-14);
            }
            assert_eq!(gamma.view((i * 3, i), (3, 1)), b.view((0, 0), (3, 1)));
            for j in i + 1..4 {
                assert!(gamma.view((i * 3, j), (3, 1)).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn recovers_scalar_generating_pair() {
        let a = DMatrix::from_element(1, 1, 0.9);
        let b = DMatrix::from_element(1, 1, 0.5);
        let (z_p, z_f, u_f) = linear_data(&a, &b, 5, 60, 2);
        let pred = fit_predictor(&z_p, &z_f, &u_f, &DMatrix::identity(1, 1), false).unwrap();
        for i in 0..5 {
            assert!((pred.psi[(i, 0)] - 0.9f64.powi(i as i32 + 1)).abs() < 1e-9);
            for j in 0..5 {
                let expect = if j <= i { 0.5 * 0.9f64.powi((i - j) as i32) } else { 0.0 };
                assert!((pred.gamma[(i, j)] - expect).abs() < 1e-9);
            }
        }
        assert!(pred.residual < 1e-9);
        assert_eq!(pred.a[(0, 0)], pred.psi[(0, 0)]);
        assert_eq!(pred.b[(0, 0)], pred.gamma[(0, 0)]);
        let (dp, dg) = pred.structure_mismatch();
        assert!(dp < 1e-8 && dg < 1e-8);
    }

    #[test]
    fn multivariable_fit_matches_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-0.5..0.5));
        let b = DMatrix::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0));
        let (z_p, z_f, u_f) = linear_data(&a, &b, 4, 80, 5);
        let pred = fit_predictor(&z_p, &z_f, &u_f, &DMatrix::identity(1, 3), false).unwrap();
        let (ps, gs) = structured_matrices(&a, &b, 4).unwrap();
        assert!((&pred.psi - ps).amax() < 1e-8);
        assert!((&pred.gamma - gs).amax() < 1e-8);
    }

    #[test]
    fn zero_input_is_rank_deficient() {
        let a = DMatrix::from_element(1, 1, 0.8);
        let b = DMatrix::from_element(1, 1, 0.0);
        let (z_p, z_f, mut u_f) = linear_data(&a, &b, 3, 20, 6);
        u_f.fill(0.0);
        match fit_predictor(&z_p, &z_f, &u_f, &DMatrix::identity(1, 1), false) {
            Err(Error::RankDeficient { rank, rows }) => assert!(rank < rows),
            other => panic!("expected rank error, got {other:?}"),
        }
        let pred = fit_predictor(&z_p, &z_f, &u_f, &DMatrix::identity(1, 1), true).unwrap();
        assert!(pred.ridge > 0.0);
    }

    #[test]
    fn predict_is_linear_and_first_block_is_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-0.7..0.7));
        let b = DMatrix::from_fn(2, 1, |_, _| rng.gen_range(-1.0..1.0));
        let (z_p, z_f, u_f) = linear_data(&a, &b, 3, 40, 8);
        let pred = fit_predictor(&z_p, &z_f, &u_f, &DMatrix::identity(1, 2), false).unwrap();
        let z0 = DVector::from_vec(vec![0.3, -0.1]);
        let z1 = DVector::from_vec(vec![-1.0, 2.0]);
        let u0 = DVector::from_vec(vec![0.5, 0.1, -0.2]);
        let u1 = DVector::from_vec(vec![1.0, -1.0, 0.0]);
        let sum = pred.predict(&(&z0 + &z1), &(&u0 + &u1)).unwrap();
        let parts = pred.predict(&z0, &u0).unwrap() + pred.predict(&z1, &u1).unwrap();
        assert!((sum - parts).amax() < 1e-14);
        assert!(pred.predict(&DVector::zeros(2), &DVector::zeros(3)).unwrap().iter().all(|&v| v == 0.0));
        let first = pred.predict(&z0, &u0).unwrap().rows(0, 2).into_owned();
        let one_step = &pred.a * &z0 + &pred.b * u0.rows(0, 1);
        assert!((first - one_step).amax() < 1e-15);
        // The fixture is exactly linear, so prediction matches iterating the generating pair.
        let mut z = z0.clone();
        let full = pred.predict(&z0, &u0).unwrap();
        for i in 0..3 {
            z = &a * &z + &b * u0.rows(i, 1);
            assert!((full.rows(2 * i, 2) - &z).amax() < 1e-9);
        }
    }

    #[test]
    fn horizon_one_is_bit_exact_one_step() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.3]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.5]);
        let (z_p, z_f, u_f) = linear_data(&a, &b, 1, 30, 9);
        let pred = fit_predictor(&z_p, &z_f, &u_f, &DMatrix::identity(1, 2), false).unwrap();
        let z0 = DVector::from_vec(vec![0.7, -0.4]);
        let u = DVector::from_element(1, 0.25);
        assert_eq!(pred.predict(&z0, &u).unwrap(), &pred.a * &z0 + &pred.b * &u);
    }

    #[test]
    fn predictor_file_round_trip() {
        let a = DMatrix::from_element(1, 1, 0.9);
        let b = DMatrix::from_element(1, 1, 0.5);
        let (z_p, z_f, u_f) = linear_data(&a, &b, 3, 30, 10);
        let pred = fit_predictor(&z_p, &z_f, &u_f, &DMatrix::identity(1, 1), false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictor.json");
        pred.save(&path).unwrap();
        assert_eq!(MultiStepPredictor::load(&path).unwrap(), pred);
    }
}
