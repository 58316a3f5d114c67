//! Supervised fine-tuning baselines: reward-weighted regression on frozen
//! base-model samples, and RAFT best-of-k self-distillation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::diffusion::{draw_noise, generate_samples, per_sample_loss_with};
use crate::error::{Error, Result};
use crate::metrics::MetricsRow;
use crate::mlp::{value_and_grad, DenoiserParams, ParamNodes};
use crate::optim::{clipped_step, AdamWConfig, AdamWState};
use crate::rl::{scalar_reward, stream_rng, Env, RewardBinding, TaskBinding, STREAM_PRETRAIN, STREAM_SAMPLING};
use crate::tasks::{make_prompt, Context};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    RewardWeighted,
    Raft,
}

impl BaselineMethod {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "reward_weighted" => Some(Self::RewardWeighted),
            "raft" => Some(Self::Raft),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::RewardWeighted => "reward_weighted",
            Self::Raft => "raft",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    /// Temperature: normalized weights are raised to `1 / rw_beta`.
    pub rw_beta: f64,
    pub raft_k: usize,
    pub raft_accept: usize,
    pub lr: f64,
    pub prompts_per_iteration: usize,
    /// Samples per prompt for reward-weighted runs (RAFT uses `raft_k`).
    pub samples_per_prompt: usize,
    pub iterations: usize,
    pub context_dropout: f64,
    pub max_grad_norm: f64,
    /// Divergence flag threshold as a fraction of the running peak reward.
    pub divergence_ratio: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            rw_beta: 0.5,
            raft_k: 24,
            raft_accept: 1,
            lr: 5e-4,
            prompts_per_iteration: 16,
            samples_per_prompt: 8,
            iterations: 500,
            context_dropout: 0.1,
            max_grad_norm: 1.0,
            divergence_ratio: 0.5,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rw_beta > 0.0) {
            return Err(Error::InvalidArgument(format!("rw_beta {} must be > 0", self.rw_beta)));
        }
        if self.raft_accept == 0 || self.raft_accept > self.raft_k {
            return Err(Error::InvalidArgument(format!(
                "raft acceptance count {} must lie in 1..={}",
                self.raft_accept, self.raft_k
            )));
        }
        if self.prompts_per_iteration == 0 || self.samples_per_prompt == 0 {
            return Err(Error::InvalidArgument("empty baseline batch".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }

    pub fn samples_per_prompt(&self, method: BaselineMethod) -> usize {
        match method {
            BaselineMethod::RewardWeighted => self.samples_per_prompt,
            BaselineMethod::Raft => self.raft_k,
        }
    }
}

/// `(r - min) / (max - min)`; all ones when every reward is equal.
pub fn minmax_normalize(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::InvalidArgument("min-max normalization of an empty list".into()));
    }
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!("reward {i} is {}", rewards[i])));
    }
    let lo = rewards.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![1.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - lo) / (hi - lo)).collect())
}

/// Indices of the `accept` highest rewards in each consecutive group of `k`;
/// ties go to the lower index.
pub fn raft_select(rewards: &[f64], k: usize, accept: usize) -> Result<Vec<usize>> {
    if k == 0 || accept == 0 || accept > k || !rewards.len().is_multiple_of(k) {
        return Err(Error::InvalidArgument(format!(
            "cannot keep {accept} of {k} from {} rewards",
            rewards.len()
        )));
    }
    let mut out = Vec::with_capacity(rewards.len() / k * accept);
    for (g, chunk) in rewards.chunks(k).enumerate() {
        let mut idx: Vec<usize> = (0..k).collect();
        idx.sort_by(|&a, &b| chunk[b].total_cmp(&chunk[a]).then(a.cmp(&b)));
        let mut keep: Vec<usize> = idx[..accept].iter().map(|i| g * k + i).collect();
        keep.sort_unstable();
        out.extend(keep);
    }
    Ok(out)
}

/// Flags the first time the mean reward drops below `ratio` of its running peak.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceMonitor {
    pub ratio: f64,
    pub peak: f64,
    pub fired_at: Option<u64>,
}

impl DivergenceMonitor {
    pub fn new(ratio: f64) -> Self {
        Self {
            ratio,
            peak: f64::NEG_INFINITY,
            fired_at: None,
        }
    }

    /// Returns whether this observation is below the threshold.
    pub fn observe(&mut self, iteration: u64, mean_reward: f64) -> bool {
        self.peak = self.peak.max(mean_reward);
        let below = self.peak > 0.0 && mean_reward < self.ratio * self.peak;
        if below && self.fired_at.is_none() {
            self.fired_at = Some(iteration);
        }
        below
    }
}

/// Regression batch built from generated samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedBatch {
    pub contexts: Vec<Context>,
    pub samples: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
}

impl GeneratedBatch {
    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len().max(1) as f64
    }
}

fn reward_binding(binding: &TaskBinding) -> Result<RewardBinding> {
    match binding.reward {
        RewardBinding::Diversity { .. } => Err(Error::InvalidArgument("baselines need a per-sample reward".into())),
        r => Ok(r),
    }
}

/// Draws `prompts x per` samples from `params` and scores them.
pub fn generate_batch(
    params: &DenoiserParams,
    binding: &TaskBinding,
    env: &Env,
    prompts: usize,
    per: usize,
    rng: &mut impl Rng,
) -> Result<GeneratedBatch> {
    let reward = reward_binding(binding)?;
    let mut contexts = Vec::with_capacity(prompts * per);
    let mut seeds = Vec::with_capacity(prompts * per);
    for _ in 0..prompts {
        let c = make_prompt(&env.world, binding.task, rng);
        for _ in 0..per {
            contexts.push(c);
            seeds.push(rng.random::<u64>());
        }
    }
    let samples = generate_samples(
        params,
        &contexts,
        &seeds,
        &env.world.layout,
        &env.sampler,
        &env.schedule,
    )?;
    let rewards = samples
        .iter()
        .zip(&contexts)
        .map(|(x, c)| scalar_reward(reward, env, x, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(GeneratedBatch {
        contexts,
        samples,
        rewards,
    })
}

/// `Σ w_i ℓ_i / Σ w_i` over per-sample ε-regression losses on `samples`.
pub fn weighted_regression_loss(
    g: &mut Graph,
    params: &ParamNodes,
    batch: &GeneratedBatch,
    weights: &[f64],
    env: &Env,
    context_dropout: f64,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    let n = batch.samples.len();
    if weights.len() != n {
        return Err(Error::shape("weighted_regression_loss", &[n], &[weights.len()]));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("weights sum to zero".into()));
    }
    let x0 = Tensor::from_rows(&batch.samples)?;
    let ctx = Tensor::from_rows(
        &batch
            .contexts
            .iter()
            .map(|c| env.world.layout.encode(c))
            .collect::<Vec<_>>(),
    )?;
    let draws = draw_noise(n, x0.cols(), &env.schedule, context_dropout, rng);
    let rows = per_sample_loss_with(g, params, &x0, &ctx, &draws, &env.schedule)?;
    let w = g.constant(Tensor::matrix(n, 1, weights.iter().map(|w| w / total).collect())?);
    let weighted = g.mul(rows, w)?;
    Ok(g.sum(weighted))
}

#[derive(Debug, Clone)]
pub struct BaselineState {
    pub params: DenoiserParams,
    /// Frozen generator for reward-weighted runs.
    pub base: DenoiserParams,
    pub opt: AdamWState,
    pub iteration: u64,
    pub sampling_rng: ChaCha8Rng,
    pub noise_rng: ChaCha8Rng,
    pub monitor: DivergenceMonitor,
}

impl BaselineState {
    pub fn new(params: DenoiserParams, seed: u64, divergence_ratio: f64) -> Self {
        let n = params.len();
        Self {
            base: params.clone(),
            params,
            opt: AdamWState::new(n),
            iteration: 0,
            sampling_rng: stream_rng(seed, STREAM_SAMPLING),
            noise_rng: stream_rng(seed, STREAM_PRETRAIN),
            monitor: DivergenceMonitor::new(divergence_ratio),
        }
    }
}

/// Outcome of one baseline update.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineStep {
    pub mean_reward: f64,
    pub loss: f64,
    pub retained: usize,
}

fn apply(
    state: &mut BaselineState,
    batch: &GeneratedBatch,
    weights: &[f64],
    env: &Env,
    cfg: &BaselineConfig,
    adamw: &AdamWConfig,
) -> Result<f64> {
    let rng = &mut state.noise_rng;
    let (loss, grad) = value_and_grad(&state.params, |g, pn| {
        weighted_regression_loss(g, pn, batch, weights, env, cfg.context_dropout, rng)
    })?;
    clipped_step(
        state.params.as_mut_slice(),
        grad,
        &mut state.opt,
        adamw,
        cfg.lr,
        cfg.max_grad_norm,
    )?;
    Ok(loss)
}

/// Samples from the frozen base, weights by `minmax(r)^(1/β)`, one AdamW step.
pub fn reward_weighted_step(
    state: &mut BaselineState,
    binding: &TaskBinding,
    env: &Env,
    cfg: &BaselineConfig,
    adamw: &AdamWConfig,
) -> Result<BaselineStep> {
    let batch = generate_batch(
        &state.base,
        binding,
        env,
        cfg.prompts_per_iteration,
        cfg.samples_per_prompt,
        &mut state.sampling_rng,
    )?;
    let weights: Vec<f64> = minmax_normalize(&batch.rewards)?
        .into_iter()
        .map(|w| w.powf(1.0 / cfg.rw_beta))
        .collect();
    let loss = apply(state, &batch, &weights, env, cfg, adamw)?;
    Ok(BaselineStep {
        mean_reward: batch.mean_reward(),
        loss,
        retained: batch.samples.len(),
    })
}

/// `raft_k` samples per prompt from the current model; regresses on the top
/// `raft_accept` of each prompt.
pub fn raft_step(
    state: &mut BaselineState,
    binding: &TaskBinding,
    env: &Env,
    cfg: &BaselineConfig,
    adamw: &AdamWConfig,
) -> Result<BaselineStep> {
    let batch = generate_batch(
        &state.params,
        binding,
        env,
        cfg.prompts_per_iteration,
        cfg.raft_k,
        &mut state.sampling_rng,
    )?;
    let keep = raft_select(&batch.rewards, cfg.raft_k, cfg.raft_accept)?;
    let kept = GeneratedBatch {
        contexts: keep.iter().map(|&i| batch.contexts[i]).collect(),
        samples: keep.iter().map(|&i| batch.samples[i].clone()).collect(),
        rewards: keep.iter().map(|&i| batch.rewards[i]).collect(),
    };
    let loss = apply(state, &kept, &vec![1.0; keep.len()], env, cfg, adamw)?;
    Ok(BaselineStep {
        mean_reward: batch.mean_reward(),
        loss,
        retained: keep.len(),
    })
}

/// Runs the configured baseline to `cfg.iterations`. The regression loss is
/// reported in the `loss_pretrain` column; `loss_ppo` stays 0.
pub fn train_baseline(
    state: &mut BaselineState,
    method: BaselineMethod,
    binding: &TaskBinding,
    env: &Env,
    cfg: &BaselineConfig,
    adamw: &AdamWConfig,
    mut on_iteration: impl FnMut(&BaselineState, &MetricsRow, bool) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    reward_binding(binding)?;
    while (state.iteration as usize) < cfg.iterations {
        let it = state.iteration;
        let step = match method {
            BaselineMethod::RewardWeighted => reward_weighted_step(state, binding, env, cfg, adamw)?,
            BaselineMethod::Raft => raft_step(state, binding, env, cfg, adamw)?,
        };
        let diverged = state.monitor.observe(it, step.mean_reward);
        let mut row = MetricsRow::new(it, binding.task.kind.name());
        row.mean_reward = step.mean_reward;
        row.loss_pretrain = Some(step.loss);
        state.iteration += 1;
        on_iteration(state, &row, diverged)?;
    }
    Ok(())
}
