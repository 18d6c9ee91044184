use serde::{Deserialize, Serialize};

use super::tensor::Matrix;

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(lr: f64, params: &[Matrix]) -> Self {
        let zeros = |p: &[Matrix]| p.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p.data[i]);
            }
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Matrix::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_assign(s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut p = vec![Matrix::row_vector(vec![3.0, -2.0])];
        let mut opt = AdamW::new(0.1, &p);
        opt.weight_decay = 0.0;
        for _ in 0..500 {
            let g = vec![Matrix::row_vector(p[0].data.iter().map(|x| 2.0 * x).collect())];
            opt.step(&mut p, &g);
        }
        assert!(p[0].data.iter().all(|x| x.abs() < 1e-2));
        assert_eq!(opt.steps_taken(), 500);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Matrix::scalar(1.0)];
        let mut opt = AdamW::new(0.01, &p);
        opt.weight_decay = 0.0;
        opt.step(&mut p, &[Matrix::scalar(5.0)]);
        assert!((p[0].item() - 0.99).abs() < 1e-9);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Matrix::row_vector(vec![3.0, 4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data[0] - 0.6).abs() < 1e-12);
        let mut small = vec![Matrix::scalar(0.5)];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].item(), 0.5);
    }
}
