//! Base-model training on the ε-regression loss alone.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{pretraining_loss, NoiseSchedule};
use crate::error::{Error, Result};
use crate::mlp::{value_and_grad, DenoiserParams};
use crate::optim::{clipped_step, AdamWConfig, AdamWState};
use crate::tasks::{ContextLayout, SceneSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub context_dropout: f64,
    pub max_grad_norm: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 20000,
            batch_size: 128,
            lr: 1e-3,
            context_dropout: 0.1,
            max_grad_norm: 1.0,
        }
    }
}

/// Uniform minibatch without replacement.
pub fn sample_batch(data: &[SceneSample], size: usize, rng: &mut impl Rng) -> Result<Vec<SceneSample>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let k = size.min(data.len());
    Ok(sample(rng, data.len(), k)
        .into_iter()
        .map(|i| data[i].clone())
        .collect())
}

/// One AdamW step on `weight * L_pre` over a fresh minibatch; returns the
/// unweighted loss.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step(
    params: &mut DenoiserParams,
    opt: &mut AdamWState,
    adamw: &AdamWConfig,
    data: &[SceneSample],
    layout: &ContextLayout,
    schedule: &NoiseSchedule,
    cfg: &PretrainConfig,
    lr: f64,
    weight: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    let batch = sample_batch(data, cfg.batch_size, rng)?;
    let (loss, grad) = value_and_grad(params, |g, pn| {
        pretraining_loss(g, pn, &batch, layout, schedule, cfg.context_dropout, rng)
    })?;
    let grad: Vec<f64> = grad.into_iter().map(|x| x * weight).collect();
    clipped_step(params.as_mut_slice(), grad, opt, adamw, lr, cfg.max_grad_norm)?;
    Ok(loss)
}

/// Runs `cfg.steps` pretraining steps and returns the per-step losses.
#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    params: &mut DenoiserParams,
    opt: &mut AdamWState,
    adamw: &AdamWConfig,
    data: &[SceneSample],
    layout: &ContextLayout,
    schedule: &NoiseSchedule,
    cfg: &PretrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    (0..cfg.steps)
        .map(|_| pretrain_step(params, opt, adamw, data, layout, schedule, cfg, cfg.lr, 1.0, rng))
        .collect()
}
