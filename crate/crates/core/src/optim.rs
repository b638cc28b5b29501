//! Adam with serializable moment buffers.

use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn gan(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    /// Per-parameter step counts; a parameter without a gradient is left untouched.
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, cfg: AdamConfig) -> Result<Self> {
        let m = params
            .iter()
            .map(|(_, p)| p.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        let steps = vec![0; params.len()];
        Ok(Self { cfg, params, m, v, steps })
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        for i in 0..self.params.len() {
            let p = &self.params[i].1;
            let Some(g) = grads.get(p.as_tensor()) else { continue };
            // gradients of variables come back attached to the forward graph;
            // folding them into the moments would keep every step's graph alive
            let g = &g.detach();
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let m = ((&self.m[i] * beta1)? + (g * (1.0 - beta1))?)?;
            let v = ((&self.v[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&m / (1.0 - beta1.powi(t)))?;
            let v_hat = (&v / (1.0 - beta2.powi(t)))?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            p.set(&(p.as_tensor().detach() - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// Moment buffers keyed `{prefix}{param}.m` / `.v`.
    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.params.len());
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.push((format!("{prefix}{name}.m"), self.m[i].clone()));
            out.push((format!("{prefix}{name}.v"), self.v[i].clone()));
        }
        out
    }

    pub fn step_counts(&self) -> HashMap<String, u64> {
        self.params
            .iter()
            .zip(&self.steps)
            .map(|((n, _), s)| (n.clone(), *s))
            .collect()
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, prefix: &str, steps: &HashMap<String, u64>) -> Result<()> {
        for (i, (name, p)) in self.params.iter().enumerate() {
            for (suffix, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("{prefix}{name}.{suffix}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Shape(format!("missing optimizer tensor `{key}`")))?;
                if t.dims() != p.dims() {
                    return Err(Error::Shape(format!("optimizer tensor `{key}` has shape {:?}", t.dims())));
                }
                *slot = t.to_dtype(p.dtype())?;
            }
            self.steps[i] = *steps
                .get(name)
                .ok_or_else(|| Error::Shape(format!("missing optimizer step count for `{name}`")))?;
        }
        Ok(())
    }
}
