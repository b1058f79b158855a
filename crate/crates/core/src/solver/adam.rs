//! Adam optimizer with a step-halving learning-rate schedule.

use crate::{Error, Real, Result};

/// `lr0 * 0.5^floor(epoch / halve_every)`.
pub fn learning_rate(lr0: f64, halve_every: usize, epoch: usize) -> f64 {
    if halve_every == 0 {
        return lr0;
    }
    lr0 * 0.5f64.powi((epoch / halve_every) as i32)
}

#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, m: vec![T::zero(); len], v: vec![T::zero(); len], t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One bias-corrected update of `theta` in place.
    pub fn step(&mut self, theta: &mut [T], grad: &[T], lr: f64) -> Result<()> {
        if theta.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::ShapeMismatch("optimizer state size".into()));
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let one = T::one();
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = T::of(lr / c1);
        let inv_c2 = T::of(1.0 / c2);
        let eps = T::of(self.eps);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let upd = step * self.m[i] / ((self.v[i] * inv_c2).sqrt() + eps);
            if !upd.is_finite() {
                return Err(Error::NonFinite(format!("optimizer update of parameter {i}")));
            }
            theta[i] -= upd;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        assert_eq!(learning_rate(1e-3, 1000, 0), 1e-3);
        assert_eq!(learning_rate(1e-3, 1000, 999), 1e-3);
        assert_eq!(learning_rate(1e-3, 1000, 1000), 5e-4);
        assert_eq!(learning_rate(1e-3, 1000, 1499), 5e-4);
        assert_eq!(learning_rate(1e-3, 1000, 2000), 2.5e-4);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut opt = Adam::<f64>::new(3, 0.9, 0.999, 1e-8);
        let mut theta = vec![1.0, -2.0, 0.5];
        opt.step(&mut theta, &[0.0; 3], 1e-3).unwrap();
        assert_eq!(theta, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let mut opt = Adam::<f64>::new(2, 0.9, 0.999, 1e-8);
        let mut theta = vec![0.0, 0.0];
        let mut prev = theta.clone();
        for _ in 0..200 {
            opt.step(&mut theta, &[0.3, -2.0], 1e-2).unwrap();
            assert!(theta[0] < prev[0] && theta[1] > prev[1]);
            prev = theta.clone();
        }
        // bias-corrected Adam moves by about lr per step on a constant gradient
        assert!((theta[0] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut opt = Adam::<f64>::new(1, 0.9, 0.999, 1e-8);
        let mut theta = vec![0.0];
        assert!(opt.step(&mut theta, &[f64::NAN], 1e-3).is_err());
    }
}
