//! Adam and AdamW.

use std::collections::BTreeMap;

use crate::nn::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Decoupled weight decay (AdamW) instead of L2 added to the gradient.
    pub decoupled: bool,
}

impl AdamConfig {
    pub fn adam() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled: false,
        }
    }

    pub fn adamw(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            decoupled: true,
            ..Self::adam()
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T: Scalar> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    step: u64,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` to every unfrozen parameter
    /// holding a gradient, then clears the gradients.
    pub fn step(&mut self, params: &[&Param<T>], lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one, eps) = (T::one(), T::lit(c.eps));
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let wd = T::lit(c.weight_decay);
        let decay = T::lit(1.0 - lr * c.weight_decay);
        for p in params {
            if p.is_frozen() {
                continue;
            }
            let Some(grad) = p.grad().clone() else {
                continue;
            };
            let mut value = p.value();
            let moments = self
                .state
                .entry(p.name().to_string())
                .or_insert_with(|| Moments {
                    m: Tensor::zeros(grad.shape()),
                    v: Tensor::zeros(grad.shape()),
                });
            let (m, v) = (moments.m.data_mut(), moments.v.data_mut());
            let w = value.data_mut();
            for i in 0..w.len() {
                let mut g = grad.data()[i];
                if c.decoupled {
                    w[i] *= decay;
                } else if c.weight_decay != 0.0 {
                    g += wd * w[i];
                }
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                w[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
            p.set_value(value).expect("optimizer preserves shapes");
            p.zero_grad();
        }
    }

    /// Moments keyed by parameter name, for checkpointing.
    pub fn state(&self) -> &BTreeMap<String, Moments<T>> {
        &self.state
    }

    pub fn restore(&mut self, step: u64, state: BTreeMap<String, Moments<T>>) {
        self.step = step;
        self.state = state;
    }
}
