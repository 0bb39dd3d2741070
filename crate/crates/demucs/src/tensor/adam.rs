//! Adam optimizer with bias correction.

use super::param::Param;
use super::{Result, Scalar, TensorError};

/// Per-parameter first/second moment state plus the step counter.
/// Betas are the standard 0.9 / 0.999, epsilon 1e-8.
pub struct Adam<S: Scalar = f32> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment buffers, for state-invariance checks.
    pub fn moments(&self) -> (&[Vec<S>], &[Vec<S>]) {
        (&self.m, &self.v)
    }

    /// One update over `params` (order must be stable across calls).
    /// Gradients are read, not cleared; the caller zeroes them.
    pub fn step(&mut self, params: &[Param<S>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![S::ZERO; p.numel()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "param list changed under the optimizer");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = S::from_f64(1.0 - self.beta1.powi(t));
        let bc2 = S::from_f64(1.0 - self.beta2.powi(t));
        let (b1, b2) = (S::from_f64(self.beta1), S::from_f64(self.beta2));
        let one_b1 = S::from_f64(1.0 - self.beta1);
        let one_b2 = S::from_f64(1.0 - self.beta2);
        let eps = S::from_f64(self.eps);
        let lr = S::from_f64(self.lr);

        for (i, p) in params.iter().enumerate() {
            let grad = p.tensor().grad().ok_or_else(|| {
                TensorError::Contract(format!("adam step with missing gradient for {}", p.name()))
            })?;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.tensor().update_data(|data| {
                for (((x, g), mi), vi) in data.iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = b1 * *mi + one_b1 * *g;
                    *vi = b2 * *vi + one_b2 * *g * *g;
                    let m_hat = *mi / bc1;
                    let v_hat = *vi / bc2;
                    *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }

    /// Clear gradients of all `params`.
    pub fn zero_grad(params: &[Param<S>]) {
        for p in params {
            p.zero_grad();
        }
    }
}
