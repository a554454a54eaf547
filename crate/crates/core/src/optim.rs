//! Adam with L2 weight decay folded into the gradient.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    cfg: AdamConfig,
    steps: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

/// Serializable optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub steps: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Forgets all moments and the step counter.
    pub fn reset(&mut self) {
        self.steps = 0;
        self.m.clear();
        self.v.clear();
    }

    /// Applies one update to every parameter slot whose `mask` entry is set.
    /// Masked-out slots are left untouched bit for bit.
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut Vec<T>>,
        grads: &[Vec<T>],
        mask: &[bool],
    ) -> Result<()> {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != grads.len() || mask.len() != grads.len() {
            return Err(Error::shape("Adam::step", self.m.len(), grads.len()));
        }
        self.steps += 1;
        let c = &self.cfg;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powf(self.steps as f64));
        let bc2 = T::lit(1.0 - c.beta2.powf(self.steps as f64));
        let lr = T::lit(c.learning_rate);
        let wd = T::lit(c.weight_decay);
        let eps = T::lit(c.eps);
        let one = T::one();
        for (i, p) in params.enumerate() {
            if i >= grads.len() {
                return Err(Error::shape("Adam::step", grads.len(), i + 1));
            }
            if !mask[i] {
                continue;
            }
            let (g, m, v) = (&grads[i], &mut self.m[i], &mut self.v[i]);
            if g.len() != p.len() {
                return Err(Error::shape("Adam::step", p.len(), g.len()));
            }
            for j in 0..p.len() {
                let gj = g[j] + wd * p[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn state(&self) -> AdamState {
        let conv = |x: &Vec<Vec<T>>| x.iter().map(|r| r.iter().map(|v| v.as_f64()).collect()).collect();
        AdamState {
            steps: self.steps,
            m: conv(&self.m),
            v: conv(&self.v),
        }
    }

    pub fn restore(cfg: AdamConfig, state: &AdamState) -> Self {
        let conv = |x: &Vec<Vec<f64>>| x.iter().map(|r| r.iter().map(|&v| T::lit(v)).collect()).collect();
        Self {
            cfg,
            steps: state.steps,
            m: conv(&state.m),
            v: conv(&state.v),
        }
    }
}
