//! Optimizers: SGD with momentum (default, with cosine learning-rate
//! decay over epochs) and Adam.

use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adam,
}

impl OptimKind {
    pub fn parse(s: &str) -> Result<OptimKind> {
        match s {
            "sgd" => Ok(OptimKind::Sgd),
            "adam" => Ok(OptimKind::Adam),
            other => Err(Error::Registry(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub momentum: f64,
    pub cosine_decay: bool,
    /// Horizon of the cosine schedule (total training epochs).
    pub total_epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimKind::Sgd,
            lr: 0.1,
            momentum: 0.9,
            cosine_decay: true,
            total_epochs: 1,
        }
    }
}

pub struct Optimizer {
    cfg: OptimizerConfig,
    velocity: Vec<Vec<f64>>,
    adam_m: Vec<Vec<f64>>,
    adam_v: Vec<Vec<f64>>,
    adam_t: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Optimizer {
        Optimizer {
            cfg,
            velocity: Vec::new(),
            adam_m: Vec::new(),
            adam_v: Vec::new(),
            adam_t: 0,
        }
    }

    /// Learning rate at an epoch under the cosine schedule.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if !self.cfg.cosine_decay || self.cfg.total_epochs == 0 {
            return self.cfg.lr;
        }
        let t = (epoch.min(self.cfg.total_epochs)) as f64 / self.cfg.total_epochs as f64;
        self.cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// Apply one update. `grads` aligns with the parameter entries.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[&[f64]], epoch: usize) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::State(format!(
                "optimizer: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        let lr = self.lr_at(epoch);
        match self.cfg.kind {
            OptimKind::Sgd => {
                if self.velocity.is_empty() {
                    self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                }
                for i in 0..grads.len() {
                    let p = params.entry_mut(i);
                    if p.values.len() != grads[i].len() {
                        return Err(Error::State(format!(
                            "optimizer: gradient size mismatch for '{}'",
                            p.name
                        )));
                    }
                    let vel = &mut self.velocity[i];
                    for ((v, g), x) in vel.iter_mut().zip(grads[i]).zip(p.values.iter_mut()) {
                        *v = self.cfg.momentum * *v + g;
                        *x -= lr * *v;
                    }
                }
            }
            OptimKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                if self.adam_m.is_empty() {
                    self.adam_m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.adam_v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                }
                self.adam_t += 1;
                let t = self.adam_t as f64;
                let corr1 = 1.0 - B1.powf(t);
                let corr2 = 1.0 - B2.powf(t);
                for i in 0..grads.len() {
                    let p = params.entry_mut(i);
                    let (m, v) = (&mut self.adam_m[i], &mut self.adam_v[i]);
                    for (((mi, vi), g), x) in m
                        .iter_mut()
                        .zip(v.iter_mut())
                        .zip(grads[i])
                        .zip(p.values.iter_mut())
                    {
                        *mi = B1 * *mi + (1.0 - B1) * g;
                        *vi = B2 * *vi + (1.0 - B2) * g * g;
                        let mhat = *mi / corr1;
                        let vhat = *vi / corr2;
                        *x -= lr * mhat / (vhat.sqrt() + EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
