use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, one matrix per parameter block.
#[derive(Debug, Clone)]
pub struct AdamMoments {
    pub first: Vec<DMatrix<f64>>,
    pub second: Vec<DMatrix<f64>>,
}

impl AdamMoments {
    pub fn zeros_like(params: &[DMatrix<f64>]) -> Self {
        let zeros: Vec<_> = params.iter().map(|p| DMatrix::zeros(p.nrows(), p.ncols())).collect();
        AdamMoments { first: zeros.clone(), second: zeros }
    }
}

/// One bias-corrected Adam update; `step` counts from 1.
pub fn adam_step(
    params: &mut [DMatrix<f64>],
    grads: &[DMatrix<f64>],
    moments: &mut AdamMoments,
    lr: f64,
    step: u64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != moments.first.len() || params.len() != moments.second.len() {
        return Err(Error::Dimension(format!(
            "adam: {} parameter blocks, {} gradients, {} moments",
            params.len(),
            grads.len(),
            moments.first.len()
        )));
    }
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    if step == 0 {
        return Err(Error::InvalidArgument("adam step counter starts at 1".into()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || moments.first[i].shape() != p.shape() || moments.second[i].shape() != p.shape() {
            return Err(Error::Dimension(format!("adam: shape mismatch in parameter block {i}")));
        }
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter block {i}")));
        }
    }
    let bc1 = 1.0 - BETA1.powi(step as i32);
    let bc2 = 1.0 - BETA2.powi(step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        let m = &mut moments.first[i];
        let v = &mut moments.second[i];
        for k in 0..p.len() {
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut params = vec![scalar(1.5)];
        let mut moments = AdamMoments { first: vec![scalar(0.2)], second: vec![scalar(0.3)] };
        adam_step(&mut params, &[scalar(0.0)], &mut moments, 0.01, 5).unwrap();
        assert!((moments.first[0][0] - 0.18).abs() < 1e-15);
        assert!((moments.second[0][0] - 0.2997).abs() < 1e-15);
        // With fresh moments a zero gradient is a fixed point.
        let mut p2 = vec![scalar(2.0)];
        let mut m2 = AdamMoments::zeros_like(&p2);
        adam_step(&mut p2, &[scalar(0.0)], &mut m2, 0.01, 1).unwrap();
        assert_eq!(p2[0][0], 2.0);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = vec![scalar(0.0)];
        let mut moments = AdamMoments::zeros_like(&params);
        adam_step(&mut params, &[scalar(1.0)], &mut moments, 0.01, 1).unwrap();
        assert!((params[0][0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn descends_a_quadratic() {
        // Independent scalar recursion of the same update rule.
        let (mut w, mut m, mut v) = (1.0_f64, 0.0_f64, 0.0_f64);
        let lr = 0.1;
        for t in 1..=10 {
            let g = 2.0 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9_f64.powi(t));
            let vh = v / (1.0 - 0.999_f64.powi(t));
            w -= lr * mh / (vh.sqrt() + 1e-8);
        }
        let mut params = vec![scalar(1.0)];
        let mut moments = AdamMoments::zeros_like(&params);
        for t in 1..=10 {
            let g = scalar(2.0 * params[0][0]);
            adam_step(&mut params, &[g], &mut moments, lr, t).unwrap();
        }
        assert!(params[0][0].abs() < 1.0);
        assert!((params[0][0] - w).abs() < 1e-14);
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut params = vec![scalar(0.0), scalar(0.0)];
        let mut moments = AdamMoments::zeros_like(&params);
        let err = adam_step(&mut params, &[scalar(0.0), scalar(f64::NAN)], &mut moments, 0.01, 1).unwrap_err();
        assert!(err.to_string().contains("block 1"));
    }
}
