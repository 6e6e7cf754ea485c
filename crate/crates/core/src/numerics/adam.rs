use serde::{Deserialize, Serialize};

use super::{dim_err, Module, Real, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Adam with bias correction. Moment buffers are allocated on the first
/// step from the parameter shapes; a parameter without a gradient is updated
/// as if its gradient were zero.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        assert!(config.learning_rate > 0.0, "learning rate must be positive");
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.v
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return dim_err(
                "adam",
                format!("state for {} tensors, got {}", self.m.len(), params.len()),
            );
        }
        for (i, p) in params.iter().enumerate() {
            if p.numel() != self.m[i].len() || p.grad.as_ref().is_some_and(|g| g.len() != p.numel()) {
                return dim_err(
                    "adam",
                    format!("tensor {i} has {} elements, state {}", p.numel(), self.m[i].len()),
                );
            }
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one, lr, eps) = (T::one(), T::from_f64(c.learning_rate), T::from_f64(c.epsilon));
        let t = self.step as i32;
        let bc1 = T::from_f64(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(t));
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad.take();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
            p.grad = grad;
        }
        Ok(())
    }

    pub fn step_module<M: Module<T> + ?Sized>(&mut self, module: &mut M) -> Result<()> {
        let mut params = module.params_mut();
        self.step(&mut params)
    }
}
