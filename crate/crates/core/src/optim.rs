//! Adam with bias correction, cosine learning-rate decay and global-norm
//! clipping.

use crate::error::{Error, Result};
use crate::nets::NetworkParams;
use crate::tensor::Matrix;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &NetworkParams, betas: [f64; 2]) -> Result<Self> {
        for b in betas {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("adam beta {b} outside [0, 1)")));
            }
        }
        Ok(Adam {
            beta1: betas[0],
            beta2: betas[1],
            eps: ADAM_EPS,
            step: 0,
            m: params.zeros_like_grads(),
            v: params.zeros_like_grads(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Matrix], &[Matrix]) {
        (&self.m, &self.v)
    }

    /// Restores moment estimates and the step counter, e.g. from a checkpoint.
    pub fn restore(&mut self, step: u64, m: Vec<Matrix>, v: Vec<Matrix>) -> Result<()> {
        let shapes = |xs: &[Matrix]| xs.iter().map(Matrix::shape).collect::<Vec<_>>();
        if shapes(&m) != shapes(&self.m) || shapes(&v) != shapes(&self.v) {
            return Err(Error::InvalidConfig(
                "optimizer state does not match network shape".into(),
            ));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    pub fn update(&mut self, params: &mut NetworkParams, grads: &[Matrix], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "gradient count");
        self.step += 1;
        let k = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(k);
        let c2 = 1.0 - self.beta2.powi(k);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            let ps = p.as_mut_slice();
            let (ms, vs) = (m.as_mut_slice(), v.as_mut_slice());
            for i in 0..ps.len() {
                let gi = g.as_slice()[i];
                ms[i] = b1 * ms[i] + (1.0 - b1) * gi;
                vs[i] = b2 * vs[i] + (1.0 - b2) * gi * gi;
                let mh = ms[i] / c1;
                let vh = vs[i] / c2;
                ps[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// `lr(k) = lr_final + ½(lr0 − lr_final)(1 + cos(πk/K))`, clamped at `k ≥ K`.
pub fn cosine_lr(lr0: f64, lr_final: f64, k: u64, total: u64) -> f64 {
    if total == 0 || k >= total {
        return lr_final;
    }
    if k == 0 {
        return lr0;
    }
    let phase = std::f64::consts::PI * k as f64 / total as f64;
    lr_final + 0.5 * (lr0 - lr_final) * (1.0 + phase.cos())
}

pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(Matrix::norm_sq).sum::<f64>().sqrt()
}

/// Rescales `grads` so their joint norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.as_mut_slice() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_are_exact() {
        assert_eq!(cosine_lr(2e-4, 5e-5, 0, 1000), 2e-4);
        assert_eq!(cosine_lr(2e-4, 5e-5, 1000, 1000), 5e-5);
        let mid = cosine_lr(2e-4, 5e-5, 500, 1000);
        assert!((mid - 1.25e-4).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for k in 0..=100 {
            let lr = cosine_lr(1.0, 0.1, k, 100);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = NetworkParams::zeros(&[1, 1]).unwrap();
        let mut opt = Adam::new(&p, [0.0, 0.9]).unwrap();
        let grads = vec![Matrix::scalar(4.0), Matrix::scalar(-0.5)];
        opt.update(&mut p, &grads, 0.1);
        assert!((p.weights()[0].item() + 0.1).abs() < 1e-8);
        assert!((p.biases()[0].item() - 0.1).abs() < 1e-8);
    }

    #[test]
    fn zero_lr_keeps_bits() {
        let mut p = NetworkParams::zeros(&[2, 2]).unwrap();
        p.set_flat(&[1.5, -0.0, 3.25, 1e-300, 7.0, -2.0]);
        let before = p.clone();
        let mut opt = Adam::new(&p, [0.9, 0.999]).unwrap();
        let grads: Vec<Matrix> = p.tensors().iter().map(|t| t.map(|_| 0.3)).collect();
        for _ in 0..5 {
            opt.update(&mut p, &grads, 0.0);
        }
        let bits = |p: &NetworkParams| p.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&before));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Matrix::from_rows(&[vec![3.0, 4.0]]), Matrix::scalar(12.0)];
        let pre = clip_global_norm(&mut g, 1.0);
        assert_eq!(pre, 13.0);
        assert!(global_norm(&g) <= 1.0 + 1e-12);
        let mut small = vec![Matrix::scalar(0.5)];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].item(), 0.5);
    }

    #[test]
    fn rejects_bad_betas() {
        let p = NetworkParams::zeros(&[1, 1]).unwrap();
        assert!(Adam::new(&p, [1.0, 0.9]).is_err());
        assert!(Adam::new(&p, [0.0, -0.1]).is_err());
    }
}
