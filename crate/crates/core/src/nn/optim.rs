use serde::{Deserialize, Serialize};

use super::NnError;
use crate::autodiff::{Precision, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    #[default]
    AdamW,
}

/// Optimizer hyperparameters. `weight_decay` is coupled (added to the
/// gradient) for SGD and Adam and decoupled for AdamW.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            momentum: 0.0,
        }
    }
}

/// Per-parameter optimizer memory.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub step: u64,
    /// First moment (Adam family) or velocity (SGD).
    pub m: Vec<Tensor>,
    /// Second moment; unused by SGD.
    pub v: Vec<Tensor>,
}

impl OptState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(Tensor::zeros_like).collect();
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// Applies one update in place. `lr` overrides `cfg.lr` so that a schedule
/// can drive it.
pub fn optimizer_step(
    cfg: &OptimConfig,
    lr: f64,
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptState,
    precision: Precision,
) -> Result<(), NnError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NnError::ParamCount {
            params: params.len(),
            grads: grads.len(),
            state: state.m.len(),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(NnError::GradShape {
                index: i,
                param: p.shape().to_vec(),
                grad: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(NnError::NonFiniteGradient { index: i });
        }
    }
    state.step += 1;
    let r = |x: f64| precision.round(x);
    let t = state.step as i32;
    match cfg.kind {
        OptimizerKind::Sgd => {
            for ((p, g), vel) in params.iter_mut().zip(grads).zip(&mut state.m) {
                for ((x, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(vel.data_mut()) {
                    let gi = coupled_decay(gi, *x, cfg.weight_decay, precision);
                    *vi = r(cfg.momentum * *vi + gi);
                    *x = r(*x - lr * *vi);
                }
            }
        }
        OptimizerKind::Adam | OptimizerKind::AdamW => {
            let decoupled = cfg.kind == OptimizerKind::AdamW;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            for (((p, g), m), v) in params
                .iter_mut()
                .zip(grads)
                .zip(&mut state.m)
                .zip(&mut state.v)
            {
                for (((x, &gi), mi), vi) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    let gi = if decoupled {
                        *x = r(*x - lr * cfg.weight_decay * *x);
                        gi
                    } else {
                        coupled_decay(gi, *x, cfg.weight_decay, precision)
                    };
                    *mi = r(cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi);
                    *vi = r(cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi);
                    let m_hat = *mi / bc1;
                    let v_hat = *vi / bc2;
                    *x = r(*x - lr * m_hat / (v_hat.sqrt() + cfg.eps));
                }
            }
        }
    }
    Ok(())
}

fn coupled_decay(g: f64, x: f64, wd: f64, precision: Precision) -> f64 {
    if wd == 0.0 {
        g
    } else {
        precision.round(g + wd * x)
    }
}

/// Linear warmup from 0 to `peak` over `warmup_steps`, then cosine decay
/// to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, peak: f64) -> Result<f64, NnError> {
    if warmup_steps > total_steps || step > total_steps {
        return Err(NnError::InvalidSchedule {
            step,
            total: total_steps,
            warmup: warmup_steps,
        });
    }
    if step < warmup_steps {
        return Ok(peak * step as f64 / warmup_steps as f64);
    }
    if total_steps == warmup_steps {
        return Ok(peak);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Default warmup: 5% of the total, rounded.
pub fn default_warmup(total_steps: usize) -> usize {
    (total_steps as f64 * 0.05).round() as usize
}
