//! Small dense LP: `max c'z  s.t.  M z <= b` over free `z`, started from a
//! feasible point. Primal active-set (simplex on free variables) with
//! lowest-index tie breaking.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { value: f64, z: DVector<f64> },
    Unbounded,
}

const EPS: f64 = 1e-11;

/// `start` must satisfy `M start <= b`. The origin works for every set that
/// contains it.
pub fn maximize(c: &DVector<f64>, m: &DMatrix<f64>, b: &DVector<f64>, start: &DVector<f64>) -> LpOutcome {
    let dim = c.len();
    let rows = m.nrows();
    let mut z = start.clone();
    let mut active: Vec<usize> = Vec::new();
    let c_scale = 1.0 + c.amax();
    let max_iter = 50 * (rows + dim) + 100;

    for _ in 0..max_iter {
        let direction = if active.is_empty() {
            Some(c.clone())
        } else {
            let mw = DMatrix::from_fn(active.len(), dim, |r, col| m[(active[r], col)]);
            // Multipliers of c in the span of the active rows.
            let gram = &mw * mw.transpose();
            let mu = gram.clone().lu().solve(&(&mw * c)).unwrap_or_else(|| DVector::zeros(active.len()));
            let residual = c - mw.transpose() * &mu;
            if residual.amax() > EPS * c_scale {
                Some(residual)
            } else {
                // c lies in the active row space: optimal unless some multiplier is negative.
                let neg = (0..active.len()).filter(|&j| mu[j] < -EPS * c_scale).min_by_key(|&j| active[j]);
                match neg {
                    None => {
                        return LpOutcome::Optimal { value: c.dot(&z), z };
                    }
                    Some(j) => {
                        // Leave row j while keeping the others tight.
                        let mut rhs = DVector::zeros(active.len());
                        rhs[j] = -1.0;
                        let d = if active.len() == dim {
                            mw.clone().lu().solve(&rhs)
                        } else {
                            // Minimum-norm direction with M_W d = rhs.
                            gram.lu().solve(&rhs).map(|w| mw.transpose() * w)
                        };
                        active.remove(j);
                        d
                    }
                }
            }
        };
        let d = match direction {
            Some(d) if d.amax() > 0.0 => d,
            _ => return LpOutcome::Optimal { value: c.dot(&z), z },
        };
        // Ratio test.
        let md = m * &d;
        let slack = b - m * &z;
        let mut step = f64::INFINITY;
        let mut block = None;
        for i in 0..rows {
            if active.contains(&i) {
                continue;
            }
            let row_scale = 1.0 + m.row(i).amax() * d.amax();
            if md[i] > EPS * row_scale {
                let t = slack[i].max(0.0) / md[i];
                if t < step - 1e-15 {
                    step = t;
                    block = Some(i);
                }
            }
        }
        match block {
            None => return LpOutcome::Unbounded,
            Some(i) => {
                z += &d * step;
                active.push(i);
                if active.len() > dim {
                    // Keep the working set independent: drop the oldest row.
                    active.remove(0);
                }
            }
        }
    }
    LpOutcome::Optimal { value: c.dot(&z), z }
}

/// True when `a'z <= beta` is implied by `M z <= b` (within `tol`).
pub fn is_redundant(a: &DVector<f64>, beta: f64, m: &DMatrix<f64>, b: &DVector<f64>, start: &DVector<f64>, tol: f64) -> bool {
    match maximize(a, m, b, start) {
        LpOutcome::Optimal { value, .. } => value <= beta + tol * (1.0 + beta.abs()),
        LpOutcome::Unbounded => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box(dim: usize) -> (DMatrix<f64>, DVector<f64>) {
        let mut m = DMatrix::zeros(2 * dim, dim);
        for i in 0..dim {
            m[(2 * i, i)] = 1.0;
            m[(2 * i + 1, i)] = -1.0;
        }
        (m, DVector::from_element(2 * dim, 1.0))
    }

    #[test]
    fn box_maximum_is_l1_norm_of_c() {
        let (m, b) = unit_box(3);
        let c = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        match maximize(&c, &m, &b, &DVector::zeros(3)) {
            LpOutcome::Optimal { value, .. } => assert!((value - 3.5).abs() < 1e-12),
            LpOutcome::Unbounded => panic!("box is bounded"),
        }
    }

    #[test]
    fn half_space_is_unbounded() {
        let m = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let b = DVector::from_vec(vec![1.0]);
        let c = DVector::from_vec(vec![0.0, 1.0]);
        assert_eq!(maximize(&c, &m, &b, &DVector::zeros(2)), LpOutcome::Unbounded);
    }

    #[test]
    fn triangle_vertex() {
        // x >= 0, y >= 0, x + y <= 1; maximize x + 2y -> 2 at (0, 1).
        let m = DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        let c = DVector::from_vec(vec![1.0, 2.0]);
        match maximize(&c, &m, &b, &DVector::zeros(2)) {
            LpOutcome::Optimal { value, z } => {
                assert!((value - 2.0).abs() < 1e-12);
                assert!((z[1] - 1.0).abs() < 1e-12);
            }
            LpOutcome::Unbounded => panic!(),
        }
    }

    #[test]
    fn redundancy() {
        let (m, b) = unit_box(2);
        let a = DVector::from_vec(vec![1.0, 1.0]);
        assert!(is_redundant(&a, 2.0, &m, &b, &DVector::zeros(2), 1e-9));
        assert!(!is_redundant(&a, 1.5, &m, &b, &DVector::zeros(2), 1e-9));
    }

    #[test]
    fn matches_vertex_enumeration_on_random_polytopes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let (mut m, mut b) = unit_box(2);
            let extra = rng.gen_range(1..6);
            for _ in 0..extra {
                let r = m.nrows();
                m = m.insert_row(r, 0.0);
                m[(r, 0)] = rng.gen_range(-1.0..1.0);
                m[(r, 1)] = rng.gen_range(-1.0..1.0);
                let len = b.len();
                b = b.insert_row(len, rng.gen_range(0.2..1.0));
            }
            let c = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            // Oracle: enumerate intersections of every row pair.
            let mut best = f64::NEG_INFINITY;
            for i in 0..m.nrows() {
                for j in i + 1..m.nrows() {
                    let mm = DMatrix::from_row_slice(2, 2, &[m[(i, 0)], m[(i, 1)], m[(j, 0)], m[(j, 1)]]);
                    if mm.determinant().abs() < 1e-12 {
                        continue;
                    }
                    let v = mm.lu().solve(&DVector::from_vec(vec![b[i], b[j]])).unwrap();
                    if (&m * &v - &b).max() <= 1e-9 {
                        best = best.max(c.dot(&v));
                    }
                }
            }
            match maximize(&c, &m, &b, &DVector::zeros(2)) {
                LpOutcome::Optimal { value, .. } => assert!((value - best).abs() < 1e-9, "{value} vs {best}"),
                LpOutcome::Unbounded => panic!(),
            }
        }
    }
}
