//! Adaptive-moment optimizer over flat parameter vectors.

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update; `lr(i)` is the step size for element `i`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: impl Fn(usize) -> f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr(i) * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    /// Forgets the moments of `range`, e.g. after a primitive is relocated.
    pub fn reset(&mut self, range: std::ops::Range<usize>) {
        self.m[range.clone()].fill(0.0);
        self.v[range].fill(0.0);
    }
}

/// Rescales `grads` so its Euclidean norm is at most `max_norm`.
pub fn clip_norm(grads: &mut [f64], max_norm: f64) {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converges_on_separable_quadratic() {
        let curv = [1.0, 10.0, 0.1, 100.0, 3.0];
        let target = [0.5, -2.0, 1.25, 0.0, 3.0];
        let mut x = vec![0.0; 5];
        let mut adam = Adam::new(5);
        for _ in 0..5000 {
            let g: Vec<f64> = (0..5).map(|i| curv[i] * (x[i] - target[i])).collect();
            adam.step(&mut x, &g, |_| 0.01);
        }
        for i in 0..5 {
            assert!((x[i] - target[i]).abs() < 1e-6, "{i}: {}", x[i]);
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut x = vec![1.0, 1.0];
        let mut adam = Adam::new(2);
        adam.step(&mut x, &[4.0, -0.001], |i| [0.1, 0.2][i]);
        assert!((x[0] - 0.9).abs() < 1e-12);
        assert!((x[1] - 1.2).abs() < 1e-9);
    }

    #[test]
    fn clipping() {
        let mut g = vec![30.0, 40.0];
        clip_norm(&mut g, 10.0);
        assert!((g[0] - 6.0).abs() < 1e-12 && (g[1] - 8.0).abs() < 1e-12);
        let mut small = vec![0.1, 0.2];
        clip_norm(&mut small, 10.0);
        assert_eq!(small, vec![0.1, 0.2]);
    }
}
