//! Plain gradient steps, AdamW and learning-rate schedules.
//!
//! AdamW follows the decoupled formulation: decay `θ ← θ − η·λ·θ` first,
//! then `θ ← θ − η·m̂/(√v̂ + ε)` with bias-corrected moments. `ε` sits
//! outside the square root.

use serde::{Deserialize, Serialize};

use crate::btt::BlockTTLayer;
use crate::error::{Error, Result};
use crate::grad::GradientBundle;

/// Decrements every trainable core by `eta` times its gradient. Frozen
/// cores are not touched.
pub fn sgd_step(layer: &mut BlockTTLayer, bundle: &GradientBundle, eta: f64) -> Result<()> {
    bundle.check_against(layer)?;
    let (l, s, r) = layer.cores_mut();
    if let Some(g) = &bundle.g_l {
        for (p, g) in l.iter_mut().zip(g) {
            p.axpy(-eta, g)?;
        }
    }
    if let (Some(s), Some(g)) = (s, &bundle.g_s) {
        for (p, g) in s.iter_mut().zip(g) {
            p.iter_mut().zip(g).for_each(|(p, g)| *p -= eta * g);
        }
    }
    if let Some(g) = &bundle.g_r {
        for (p, g) in r.iter_mut().zip(g) {
            p.axpy(-eta, g)?;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier applied to `S`.
    pub s_lr_scale: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, s_lr_scale: 1.0 }
    }
}

/// One parameter tensor and its gradient, flattened.
pub struct ParamGroup<'a> {
    pub param: &'a mut [f64],
    pub grad: &'a [f64],
    pub decay: bool,
    pub lr_scale: f64,
}

/// Moment accumulators for an ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Moment shapes, one entry per parameter tensor.
    pub fn moment_lens(&self) -> Vec<usize> {
        self.m.iter().map(Vec::len).collect()
    }

    pub fn step_groups(&mut self, groups: &mut [ParamGroup<'_>], lr: f64) -> Result<()> {
        if self.m.is_empty() {
            self.m = groups.iter().map(|g| vec![0.0; g.param.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != groups.len()
            || groups.iter().zip(&self.m).any(|(g, m)| g.param.len() != m.len() || g.grad.len() != m.len())
        {
            return Err(Error::dim("optimizer state does not match the parameter shapes"));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (group, (m, v)) in groups.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let eta = lr * group.lr_scale;
            let decay = if group.decay { c.weight_decay } else { 0.0 };
            for (((p, &g), m), v) in group.param.iter_mut().zip(group.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                if decay != 0.0 {
                    *p -= eta * decay * *p;
                }
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= eta * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// One AdamW step on the layer's trainable cores at rate `lr`. Separate `S`
/// vectors are never weight-decayed and use `lr · s_lr_scale`.
pub fn adamw_step(layer: &mut BlockTTLayer, bundle: &GradientBundle, state: &mut AdamWState, lr: f64) -> Result<()> {
    bundle.check_against(layer)?;
    let s_scale = state.config.s_lr_scale;
    let (l, s, r) = layer.cores_mut();
    let mut groups = Vec::new();
    if let Some(g) = &bundle.g_l {
        for (p, g) in l.iter_mut().zip(g) {
            groups.push(ParamGroup { param: p.as_mut_slice(), grad: g.as_slice(), decay: true, lr_scale: 1.0 });
        }
    }
    if let (Some(s), Some(g)) = (s, &bundle.g_s) {
        for (p, g) in s.iter_mut().zip(g) {
            groups.push(ParamGroup { param: p.as_mut_slice(), grad: g.as_slice(), decay: false, lr_scale: s_scale });
        }
    }
    if let Some(g) = &bundle.g_r {
        for (p, g) in r.iter_mut().zip(g) {
            groups.push(ParamGroup { param: p.as_mut_slice(), grad: g.as_slice(), decay: true, lr_scale: 1.0 });
        }
    }
    state.step_groups(&mut groups, lr)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Linear warmup over `⌈warmup_ratio · total⌉` steps, then linear decay
    /// to zero at `total`.
    Linear {
        warmup_ratio: f64,
    },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Linear { warmup_ratio: 0.03 }
    }
}

impl Schedule {
    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        match *self {
            Schedule::Constant => 0,
            Schedule::Linear { warmup_ratio } => ((warmup_ratio * total_steps as f64).ceil() as usize).min(total_steps),
        }
    }
}

/// Learning rate at `step` of `total_steps`. Under the linear schedule
/// `step == total_steps` always yields 0, even when warmup spans the run.
pub fn lr_at(schedule: Schedule, peak: f64, step: usize, total_steps: usize) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Domain(format!("step {step} beyond total {total_steps}")));
    }
    match schedule {
        Schedule::Constant => Ok(peak),
        Schedule::Linear { warmup_ratio } => {
            if !(0.0..=1.0).contains(&warmup_ratio) {
                return Err(Error::Domain(format!("warmup ratio {warmup_ratio} outside [0, 1]")));
            }
            if step == total_steps {
                return Ok(0.0);
            }
            let warmup = schedule.warmup_steps(total_steps);
            if step < warmup {
                Ok(peak * step as f64 / warmup as f64)
            } else {
                Ok(peak * (total_steps - step) as f64 / (total_steps - warmup) as f64)
            }
        }
    }
}
