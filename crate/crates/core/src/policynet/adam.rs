use serde::{Deserialize, Serialize};

use crate::error::NetError;

/// Adam optimizer state for one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `sgd_adam_step`: one bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<(), NetError> {
        for (context, actual) in [("adam parameters", params.len()), ("adam gradients", grads.len())] {
            if actual != self.m.len() {
                return Err(NetError::Shape {
                    context,
                    expected: self.m.len(),
                    actual,
                });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Rescales `grads` in place so its L2 norm is at most `max_norm`; returns
/// the norm before scaling.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = Adam::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..10 {
            adam.step(&mut p, &[0.0; 3], 1e-2).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut adam = Adam::new(2);
        let mut p = vec![1.0, 2.0];
        adam.step(&mut p, &[3.0, -4.0], 0.0).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr_times_sign() {
        // Iterating the recurrence by hand: with constant g, m̂ = g and
        // v̂ = g² after bias correction, so each step is lr·g/(|g| + eps).
        let lr = 1e-3;
        let mut adam = Adam::new(2);
        let mut p = vec![0.0, 0.0];
        let g = [0.25, -4.0];
        let mut prev = p.clone();
        for _ in 0..200 {
            adam.step(&mut p, &g, lr).unwrap();
            for i in 0..2 {
                let step = prev[i] - p[i];
                let expected = lr * g[i] / (g[i].abs() + 1e-8);
                assert!((step - expected).abs() < 1e-9 * lr.max(1.0));
            }
            prev.clone_from(&p);
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut adam = Adam::new(2);
        assert!(adam.step(&mut [0.0; 3], &[0.0; 3], 0.1).is_err());
        assert!(adam.step(&mut [0.0; 2], &[0.0; 1], 0.1).is_err());
    }

    #[test]
    fn grad_norm_clipping() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut small = vec![0.1, 0.1];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1, 0.1]);
    }
}
