use serde::{Deserialize, Serialize};

use super::{Param, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are allocated on the first step
/// and matched to parameters by position.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, config: AdamConfig) -> Self {
        Adam {
            lr,
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update using the accumulated gradients scaled by `grad_scale`,
    /// then clear the gradients.
    pub fn step(&mut self, params: Vec<&mut Param<T>>, grad_scale: f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed between steps");
        self.step += 1;
        let c = self.config;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let scale = T::from_f64_lossy(grad_scale);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = T::from_f64_lossy(self.lr * bc2.sqrt() / bc1);
        let eps = T::from_f64_lossy(c.eps * bc2.sqrt());
        for ((p, m), v) in params.into_iter().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            for i in 0..p.value.len() {
                let g = p.grad[i] * scale;
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                p.value[i] = p.value[i] - step_size * m[i] / (v[i].sqrt() + eps);
                p.grad[i] = T::zero();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Param::<f64>::zeros(&[3]);
        p.grad = vec![2.0, -0.5, 0.0];
        let mut opt = Adam::new(0.01, AdamConfig::default());
        opt.step(vec![&mut p], 1.0);
        assert!((p.value[0] + 0.01).abs() < 1e-9);
        assert!((p.value[1] - 0.01).abs() < 1e-9);
        assert_eq!(p.value[2], 0.0);
        assert!(p.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn minimises_quadratic() {
        let mut p = Param::<f64>::zeros(&[1]);
        p.value[0] = 5.0;
        let mut opt = Adam::new(0.1, AdamConfig::default());
        for _ in 0..500 {
            p.grad[0] = 2.0 * (p.value[0] - 1.0);
            opt.step(vec![&mut p], 1.0);
        }
        assert!((p.value[0] - 1.0).abs() < 1e-2);
    }
}
