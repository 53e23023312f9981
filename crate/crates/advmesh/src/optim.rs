//! Adam with bias correction, over lists of named parameter arrays.

use crate::autodiff::Array;

/// Standard Adam: beta1 0.9, beta2 0.999, eps 1e-8.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        assert!(lr > 0.0, "Adam: learning rate must be positive");
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. `params` and `grads` must line up one-to-one and keep the
    /// same shapes across calls.
    pub fn step(&mut self, params: &mut [Array], grads: &[Array]) {
        assert_eq!(params.len(), grads.len(), "Adam: {} params vs {} grads", params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.data.len(), g.data.len(), "Adam: param/grad length mismatch");
            for i in 0..p.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g.data[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g.data[i] * g.data[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // with bias correction, the first update is lr * g / (|g| + eps)
        let mut adam = Adam::new(0.02);
        let mut p = vec![Array::from_vec(&[2], vec![1.0, -3.0])];
        let g = vec![Array::from_vec(&[2], vec![0.5, -2.0])];
        adam.step(&mut p, &g);
        assert!((p[0].data[0] - (1.0 - 0.02)).abs() < 1e-6);
        assert!((p[0].data[1] - (-3.0 + 0.02)).abs() < 1e-6);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut adam = Adam::new(0.05);
        let mut p = vec![Array::from_vec(&[1], vec![5.0])];
        for _ in 0..500 {
            let g = vec![Array::from_vec(&[1], vec![2.0 * p[0].data[0]])];
            adam.step(&mut p, &g);
        }
        assert!(p[0].data[0].abs() < 1e-2, "{}", p[0].data[0]);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut adam = Adam::new(0.02);
        let mut p = vec![Array::from_vec(&[3], vec![1.0, 2.0, 3.0])];
        let g = vec![Array::zeros(&[3])];
        adam.step(&mut p, &g);
        assert_eq!(p[0].data, vec![1.0, 2.0, 3.0]);
    }
}
