use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// Adam with decoupled weight decay: each step first shrinks the parameter by
/// `lr * weight_decay`, then applies the bias-corrected Adam update.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Scalar>(config: AdamWConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Scalar>(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>]) {
        assert_eq!(params.len(), grads.len(), "params/grads misaligned");
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powf(self.step as f64);
        let bc2 = 1.0 - c.beta2.powf(self.step as f64);
        let decay = 1.0 - c.lr * c.weight_decay;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.numel(), g.len(), "param {i}: grad length mismatch");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                let gj = g[j].as_f64();
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let mut x = p.data[j].as_f64() * decay;
                x -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                p.data[j] = T::from_f64(x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::new(&[1], vec![v]).unwrap()]
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut p = scalar(0.7);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        for _ in 0..5 {
            opt.step(&mut p, &[vec![0.0]]);
        }
        assert_eq!(p[0].data[0], 0.7);
    }

    #[test]
    fn first_step_is_bias_corrected() {
        let mut p = scalar(1.0);
        let cfg = AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[vec![1.0]]);
        let expected = 1.0 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p[0].data[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_only() {
        let mut p = scalar(2.0);
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[vec![0.0]]);
        assert!((p[0].data[0] - 2.0 * 0.999).abs() < 1e-15);
    }
}
