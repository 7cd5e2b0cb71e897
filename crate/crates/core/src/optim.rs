//! Adam with warmup then inverse-square-root decay.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup_steps: 500,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: Some(5.0),
        }
    }
}

impl OptimizerConfig {
    /// Learning rate at 1-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let step = step.max(1) as f64;
        let warmup = self.warmup_steps.max(1) as f64;
        self.lr * (step / warmup).min((warmup / step).sqrt())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: OptimizerConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    pub grad_norm: f64,
    pub updated: usize,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Applies one update to every variable of `store` that has a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<StepStats> {
        self.step += 1;
        let lr = self.cfg.lr_at(self.step);
        let present: Vec<(&String, &candle_core::Var, &Tensor)> = store
            .vars()
            .filter_map(|(name, var)| grads.get(var.as_tensor()).map(|g| (name, var, g)))
            .collect();
        let mut sq = 0.0f64;
        for (_, _, g) in &present {
            sq += g
                .sqr()?
                .sum_all()?
                .to_dtype(DType::F64)?
                .to_scalar::<f64>()?;
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::invalid_state(format!(
                "non-finite gradient norm at step {}",
                self.step
            )));
        }
        let scale = match self.cfg.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bias1 = 1.0 - b1.powi(self.step as i32);
        let bias2 = 1.0 - b2.powi(self.step as i32);
        for (name, var, g) in &present {
            let g = if scale != 1.0 {
                g.affine(scale, 0.0)?
            } else {
                (*g).clone()
            };
            let m = match self.first.get(*name) {
                Some(m) => ((m * b1)? + (&g * (1.0 - b1))?)?,
                None => (&g * (1.0 - b1))?,
            };
            let v = match self.second.get(*name) {
                Some(v) => ((v * b2)? + (g.sqr()? * (1.0 - b2))?)?,
                None => (g.sqr()? * (1.0 - b2))?,
            };
            let denom = ((&v / bias2)?.sqrt()? + self.cfg.eps)?;
            let update = ((&m / bias1)? / denom)?;
            let new = (var.as_tensor().detach() - (update * lr)?)?;
            var.set(&new)?;
            self.first.insert((*name).clone(), m.detach());
            self.second.insert((*name).clone(), v.detach());
        }
        Ok(StepStats {
            lr,
            grad_norm,
            updated: present.len(),
        })
    }

    /// Moment tensors keyed `adam.m.<param>` / `adam.v.<param>`.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.first {
            out.insert(format!("adam.m.{k}"), v.clone());
        }
        for (k, v) in &self.second {
            out.insert(format!("adam.v.{k}"), v.clone());
        }
        out
    }

    pub fn restore(
        cfg: OptimizerConfig,
        step: u64,
        tensors: &BTreeMap<String, Tensor>,
        dtype: DType,
    ) -> Result<Self> {
        let mut adam = Self::new(cfg);
        adam.step = step;
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix("adam.m.") {
                adam.first.insert(name.to_string(), t.to_dtype(dtype)?);
            } else if let Some(name) = k.strip_prefix("adam.v.") {
                adam.second.insert(name.to_string(), t.to_dtype(dtype)?);
            }
        }
        Ok(adam)
    }
}
