//! Trainable parameters and the Adam optimizer with a cosine learning-rate
//! schedule. One `Param` owns its value, accumulated gradient, and Adam
//! moments — the complete per-tensor training state, so memory accounting
//! can count it directly.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Param<T: Scalar = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub step_count: u64,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        Param {
            value,
            grad: Tensor::zeros(&shape),
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
            step_count: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::ZERO);
    }

    /// Total elements held by this parameter's training state
    /// (value + grad + two Adam moments).
    pub fn state_elems(&self) -> usize {
        4 * self.value.len()
    }
}

/// One Adam update with bias correction; increments step_count and zeroes
/// the gradient afterwards so accumulation always starts clean.
pub fn adam_step<T: Scalar>(p: &mut Param<T>, lr: T) -> Result<()> {
    for (i, g) in p.grad.data().iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFinite {
                origin: "adam_step",
                detail: Some(format!(
                    "gradient element {i} of {:?} is {g}; \
                     likely divergence or excessive injected noise — aborting step",
                    p.grad.shape()
                )),
            });
        }
    }
    p.step_count += 1;
    let t = p.step_count as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let lr = lr.to_f64();
    let (m, v, w, g) = (
        p.adam_m.data_mut(),
        p.adam_v.data_mut(),
        p.value.data_mut(),
        p.grad.data_mut(),
    );
    for i in 0..w.len() {
        let gi = g[i].to_f64();
        let mi = ADAM_BETA1 * m[i].to_f64() + (1.0 - ADAM_BETA1) * gi;
        let vi = ADAM_BETA2 * v[i].to_f64() + (1.0 - ADAM_BETA2) * gi * gi;
        m[i] = T::from_f64(mi);
        v[i] = T::from_f64(vi);
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        w[i] = T::from_f64(w[i].to_f64() - lr * m_hat / (v_hat.sqrt() + ADAM_EPS));
        g[i] = T::ZERO;
    }
    Ok(())
}

/// base_lr · ½(1 + cos(π·step/total_steps)).
pub fn cosine_lr(base_lr: f64, step: u64, total_steps: u64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::config("cosine schedule needs total_steps > 0"));
    }
    debug_assert!(step <= total_steps);
    let frac = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_is_value_noop() {
        let mut p: Param<f64> = Param::new(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let before = p.value.clone();
        for _ in 0..5 {
            adam_step(&mut p, 1e-3).unwrap();
        }
        assert_eq!(p.value.data(), before.data());
        assert_eq!(p.step_count, 5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p: Param<f64> = Param::new(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        p.grad = Tensor::from_vec(&[2], vec![0.3, -7.0]).unwrap();
        adam_step(&mut p, 0.01).unwrap();
        // Bias-corrected first step: m̂/√v̂ = g/|g|, up to ε.
        assert!((p.value.data()[0] + 0.01).abs() < 1e-6);
        assert!((p.value.data()[1] - 0.01).abs() < 1e-6);
        // Gradient is zeroed after the step.
        assert_eq!(p.grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let mut p: Param<f64> = Param::new(Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let mut prev = 1.0;
        for _ in 0..3 {
            p.grad = Tensor::from_vec(&[1], vec![2.5]).unwrap();
            adam_step(&mut p, 0.1).unwrap();
            assert!(p.value.data()[0] < prev);
            prev = p.value.data()[0];
        }
    }

    #[test]
    fn non_finite_grad_aborts_with_diagnostic() {
        let mut p: Param<f64> = Param::new(Tensor::zeros(&[2]));
        p.grad.data_mut()[1] = f64::INFINITY;
        let before = p.value.clone();
        let err = adam_step(&mut p, 0.1).unwrap_err();
        assert!(err.to_string().contains("noise") || err.to_string().contains("divergence"));
        assert_eq!(p.value.data(), before.data());
        assert_eq!(p.step_count, 0);
    }

    #[test]
    fn cosine_boundaries() {
        assert_eq!(cosine_lr(1e-3, 0, 100).unwrap(), 1e-3);
        assert!((cosine_lr(1e-3, 100, 100).unwrap()).abs() < 1e-19);
        assert!((cosine_lr(1e-3, 50, 100).unwrap() - 5e-4).abs() < 1e-12);
        assert!(cosine_lr(1e-3, 0, 0).is_err());
    }
}
