//! Clipped-surrogate policy optimization over denoising trajectories and the
//! multi-reward training loop.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::diffusion::{
    guided_eps_graph, log_prob_graph, reverse_mean_graph, sample_trajectories, NoiseSchedule, SamplerConfig,
    StepCoeffs, Trajectory,
};
use crate::error::{Error, Result};
use crate::metrics::MetricsRow;
use crate::mlp::{value_and_grad, DenoiserParams, ParamNodes};
use crate::optim::{clipped_step, AdamWConfig, AdamWState};
use crate::pretrain::{pretrain_step, PretrainConfig};
use crate::rewards::{
    composition_reward, diversity_reward, normalize_advantages, preference_reward, statistical_parity, AdvantageBatch,
    NormalizationMode, RewardConfig, RunningStats,
};
use crate::tasks::{classify_attribute, make_prompt, Context, PromptSplit, SceneSample, TaskKind, TaskSpec, World};
use crate::tensor::Tensor;

/// Everything needed to sample and score: world, schedule, sampler, reward parameters.
#[derive(Debug, Clone)]
pub struct Env {
    pub world: World,
    pub schedule: NoiseSchedule,
    pub sampler: SamplerConfig,
    pub rewards: RewardConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub clip_epsilon: f64,
    pub timesteps_per_iteration: usize,
    pub beta_pretrain: f64,
    pub lr: f64,
    pub prompts_per_iteration: usize,
    pub samples_per_prompt: usize,
    pub normalization: NormalizationMode,
    pub iterations: usize,
    pub max_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            timesteps_per_iteration: 5,
            beta_pretrain: 0.1,
            lr: 1e-4,
            prompts_per_iteration: 16,
            samples_per_prompt: 8,
            normalization: NormalizationMode::PerBatch,
            iterations: 500,
            max_grad_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, sampler: &SamplerConfig) -> Result<()> {
        if !(self.clip_epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "clip epsilon {} must be > 0",
                self.clip_epsilon
            )));
        }
        if self.timesteps_per_iteration == 0 || self.timesteps_per_iteration > sampler.inference_steps {
            return Err(Error::InvalidArgument(format!(
                "timesteps_per_iteration {} must lie in 1..={}",
                self.timesteps_per_iteration, sampler.inference_steps
            )));
        }
        if !(self.beta_pretrain >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "beta {} must be >= 0",
                self.beta_pretrain
            )));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.lr)));
        }
        if self.prompts_per_iteration == 0 || self.samples_per_prompt == 0 {
            return Err(Error::InvalidArgument("empty rollout shape".into()));
        }
        if !(sampler.eta > 0.0) {
            return Err(Error::InvalidArgument("RL fine-tuning needs sampler eta > 0".into()));
        }
        Ok(())
    }
}

/// How a task's rollouts are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardBinding {
    Preference,
    Composition,
    /// Negated statistical parity over each prompt's minibatch of this size.
    Diversity {
        minibatch: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskBinding {
    pub task: TaskSpec,
    pub reward: RewardBinding,
    pub prompts_per_iteration: Option<usize>,
    pub samples_per_prompt: Option<usize>,
}

impl TaskBinding {
    /// Standard binding for a task kind on the training prompts.
    pub fn for_kind(kind: TaskKind, rewards: &RewardConfig) -> Self {
        let (reward, samples) = match kind {
            TaskKind::Preference => (RewardBinding::Preference, None),
            TaskKind::Composition => (RewardBinding::Composition, None),
            TaskKind::Portrait => (
                RewardBinding::Diversity {
                    minibatch: rewards.parity_minibatch,
                },
                Some(rewards.parity_minibatch),
            ),
        };
        Self {
            task: TaskSpec {
                kind,
                split: PromptSplit::Train,
            },
            reward,
            prompts_per_iteration: None,
            samples_per_prompt: samples,
        }
    }

    pub fn shape(&self, cfg: &TrainConfig) -> (usize, usize) {
        (
            self.prompts_per_iteration.unwrap_or(cfg.prompts_per_iteration),
            self.samples_per_prompt.unwrap_or(cfg.samples_per_prompt),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub trajectories: Vec<Trajectory>,
    pub advantages: AdvantageBatch,
    /// Iteration whose θ_old produced the trajectories.
    pub theta_old_iteration: u64,
    /// Mean statistical parity over minibatches (distributional bindings only).
    pub parity: Option<f64>,
}

impl RolloutBatch {
    pub fn mean_reward(&self) -> f64 {
        let n = self.trajectories.len().max(1) as f64;
        self.trajectories.iter().filter_map(|t| t.reward).sum::<f64>() / n
    }
}

/// Samples `prompts x samples_per_prompt` trajectories under `theta_old`,
/// scores them and normalizes advantages.
///
/// Distributional rewards are normalized across the per-minibatch values
/// (one per prompt) and then broadcast to the minibatch members.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts(
    theta_old: &DenoiserParams,
    theta_old_iteration: u64,
    binding: &TaskBinding,
    env: &Env,
    cfg: &TrainConfig,
    stats: &mut RunningStats,
    rng: &mut impl Rng,
) -> Result<RolloutBatch> {
    let (prompts, per) = binding.shape(cfg);
    if let RewardBinding::Diversity { minibatch } = binding.reward {
        if minibatch != per {
            return Err(Error::InvalidArgument(format!(
                "diversity minibatch {minibatch} must equal samples per prompt {per}"
            )));
        }
        if minibatch < env.world.attributes.bins() {
            return Err(Error::InvalidArgument(format!(
                "diversity minibatch {minibatch} smaller than the {} attribute bins",
                env.world.attributes.bins()
            )));
        }
    }
    let mut contexts = Vec::with_capacity(prompts * per);
    let mut seeds = Vec::with_capacity(prompts * per);
    for _ in 0..prompts {
        let c = make_prompt(&env.world, binding.task, rng);
        for _ in 0..per {
            contexts.push(c);
            seeds.push(rng.random::<u64>());
        }
    }
    let mut trajectories = sample_trajectories(
        theta_old,
        &contexts,
        &seeds,
        &env.world.layout,
        &env.sampler,
        &env.schedule,
    )?;

    let (advantages, parity) = match binding.reward {
        RewardBinding::Preference | RewardBinding::Composition => {
            for tr in trajectories.iter_mut() {
                tr.reward = Some(scalar_reward(binding.reward, env, tr.final_sample(), &tr.context)?);
            }
            let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward.unwrap_or(0.0)).collect();
            let keys: Vec<String> = trajectories.iter().map(|t| t.context.key()).collect();
            (normalize_advantages(&rewards, &keys, cfg.normalization, stats)?, None)
        }
        RewardBinding::Diversity { .. } => {
            let mut group_rewards = Vec::with_capacity(prompts);
            let mut group_keys = Vec::with_capacity(prompts);
            let mut parity = 0.0;
            for group in trajectories.chunks_mut(per) {
                let finals: Vec<&[f64]> = group.iter().map(|t| t.final_sample()).collect();
                let r = diversity_reward(&finals, &env.world.attributes)?;
                let labels: Vec<usize> = finals
                    .iter()
                    .map(|x| classify_attribute(x, &env.world.attributes))
                    .collect();
                parity += statistical_parity(&labels, env.world.attributes.bins())?;
                for (t, &ri) in group.iter_mut().zip(&r) {
                    t.reward = Some(ri);
                }
                group_rewards.push(r[0]);
                group_keys.push(group[0].context.key());
            }
            let g = normalize_advantages(&group_rewards, &group_keys, cfg.normalization, stats)?;
            let advantages = g.advantages.iter().flat_map(|&a| std::iter::repeat_n(a, per)).collect();
            (
                AdvantageBatch {
                    advantages,
                    mean: g.mean,
                    std: g.std,
                    mode: g.mode,
                },
                Some(parity / prompts as f64),
            )
        }
    };
    Ok(RolloutBatch {
        trajectories,
        advantages,
        theta_old_iteration,
        parity,
    })
}

/// Per-sample reward for the scalar bindings.
pub fn scalar_reward(binding: RewardBinding, env: &Env, x0: &[f64], ctx: &Context) -> Result<f64> {
    match binding {
        RewardBinding::Preference => preference_reward(&env.world, x0, ctx, &env.rewards),
        RewardBinding::Composition => composition_reward(&env.world, x0, ctx),
        RewardBinding::Diversity { .. } => Err(Error::InvalidArgument(
            "distribution-level rewards have no per-sample value".into(),
        )),
    }
}

/// `exp(log p_new - log p_old)`, evaluated in log space.
pub fn importance_ratio(log_prob_new: f64, log_prob_old: f64) -> Result<f64> {
    if !log_prob_new.is_finite() || !log_prob_old.is_finite() {
        return Err(Error::NonFinite(format!(
            "log-probabilities new={log_prob_new} old={log_prob_old}"
        )));
    }
    Ok((log_prob_new - log_prob_old).exp())
}

/// `g(ε, A)`: `(1 + ε) A` for `A >= 0`, `(1 - ε) A` otherwise.
pub fn clip_term(eps: f64, a: f64) -> f64 {
    if a >= 0.0 {
        (1.0 + eps) * a
    } else {
        (1.0 - eps) * a
    }
}

/// Row-wise log-probabilities (`n x 1`) of the stored transitions
/// `states[k] -> states[k + 1]` under `params`.
pub fn transition_log_probs(
    g: &mut Graph,
    params: &ParamNodes,
    trajectories: &[Trajectory],
    k: usize,
    env: &Env,
) -> Result<NodeId> {
    let first = trajectories
        .first()
        .ok_or_else(|| Error::InvalidArgument("no trajectories".into()))?;
    if k + 1 >= first.states.len() {
        return Err(Error::InvalidArgument(format!("transition {k} out of range")));
    }
    let (t, t_prev) = (first.timesteps[k], first.timesteps[k + 1]);
    if trajectories.iter().any(|tr| tr.timesteps != first.timesteps) {
        return Err(Error::Contract(
            "trajectories in a batch must share the sub-schedule".into(),
        ));
    }
    let coeffs = StepCoeffs::new(&env.schedule, t, t_prev, env.sampler.eta)?;
    let x_t = Tensor::from_rows(
        &trajectories
            .iter()
            .map(|tr| tr.states[k].as_slice())
            .collect::<Vec<_>>(),
    )?;
    let x_prev = Tensor::from_rows(
        &trajectories
            .iter()
            .map(|tr| tr.states[k + 1].as_slice())
            .collect::<Vec<_>>(),
    )?;
    let ctx = Tensor::from_rows(
        &trajectories
            .iter()
            .map(|tr| env.world.layout.encode(&tr.context))
            .collect::<Vec<_>>(),
    )?;
    let eps = guided_eps_graph(
        g,
        params,
        &x_t,
        t,
        env.schedule.steps(),
        &ctx,
        env.sampler.guidance_scale,
    )?;
    let xt = g.constant(x_t);
    let mean = reverse_mean_graph(g, eps, xt, &coeffs)?;
    let xp = g.constant(x_prev);
    log_prob_graph(g, xp, mean, coeffs.sigma)
}

/// `-J` with `J = mean_{i, k} min(w_ik Â_i, g(ε, Â_i))` over the selected transitions.
pub fn ppo_objective(
    g: &mut Graph,
    params: &ParamNodes,
    batch: &RolloutBatch,
    env: &Env,
    clip_epsilon: f64,
    selected: &[usize],
) -> Result<NodeId> {
    if selected.is_empty() {
        return Err(Error::InvalidArgument("empty timestep selection".into()));
    }
    let n = batch.trajectories.len();
    if batch.advantages.advantages.len() != n {
        return Err(Error::shape(
            "ppo_objective",
            &[n],
            &[batch.advantages.advantages.len()],
        ));
    }
    let adv = Tensor::matrix(n, 1, batch.advantages.advantages.clone())?;
    let clipped = adv.map(|a| clip_term(clip_epsilon, a));
    let mut total: Option<NodeId> = None;
    for &k in selected {
        let logp = transition_log_probs(g, params, &batch.trajectories, k, env)?;
        let lp = g.value(logp);
        if let Some(i) = (0..n).find(|&i| !lp.data()[i].is_finite()) {
            return Err(Error::NonFinite(format!("log-prob of trajectory {i}, transition {k}")));
        }
        let old = g.constant(Tensor::matrix(
            n,
            1,
            batch.trajectories.iter().map(|tr| tr.log_probs[k]).collect(),
        )?);
        let diff = g.sub(logp, old)?;
        let w = g.exp(diff);
        let a = g.constant(adv.clone());
        let wa = g.mul(w, a)?;
        let c = g.constant(clipped.clone());
        let m = g.minimum(wa, c)?;
        let s = g.sum(m);
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    let total = total.expect("nonempty selection");
    Ok(g.scale(total, -1.0 / (n * selected.len()) as f64))
}

/// `ppo + β · pre`.
pub fn total_loss(g: &mut Graph, ppo: NodeId, pretrain: NodeId, beta: f64) -> Result<NodeId> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("beta {beta} must be >= 0")));
    }
    let p = g.scale(pretrain, beta);
    g.add(ppo, p)
}

/// Seed plus stream id; the three trainer streams share a seed.
pub const STREAM_SAMPLING: u64 = 1;
pub const STREAM_TIMESTEPS: u64 = 2;
pub const STREAM_PRETRAIN: u64 = 3;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Debug, Clone)]
pub struct TrainerState {
    pub params: DenoiserParams,
    pub old_params: DenoiserParams,
    pub opt: AdamWState,
    pub iteration: u64,
    pub sampling_rng: ChaCha8Rng,
    pub timestep_rng: ChaCha8Rng,
    pub pretrain_rng: ChaCha8Rng,
    pub stats: RunningStats,
}

impl TrainerState {
    pub fn new(params: DenoiserParams, seed: u64) -> Self {
        let n = params.len();
        Self {
            old_params: params.clone(),
            params,
            opt: AdamWState::new(n),
            iteration: 0,
            sampling_rng: stream_rng(seed, STREAM_SAMPLING),
            timestep_rng: stream_rng(seed, STREAM_TIMESTEPS),
            pretrain_rng: stream_rng(seed, STREAM_PRETRAIN),
            stats: RunningStats::default(),
        }
    }
}

/// Data and optimizer settings shared by the training loops.
#[derive(Debug, Clone, Copy)]
pub struct TrainInputs<'a> {
    pub env: &'a Env,
    pub pretrain_data: &'a [SceneSample],
    pub pretrain: &'a PretrainConfig,
    pub adamw: &'a AdamWConfig,
}

/// One outer iteration: refresh θ_old, then per task collect rollouts and take
/// one update per selected timestep, then one β-weighted pretraining step.
pub fn train_iteration(
    state: &mut TrainerState,
    tasks: &[TaskBinding],
    inputs: &TrainInputs<'_>,
    cfg: &TrainConfig,
) -> Result<Vec<MetricsRow>> {
    let env = inputs.env;
    state.old_params = state.params.clone();
    let it = state.iteration;
    let mut rows = Vec::with_capacity(tasks.len());
    for binding in tasks {
        let batch = collect_rollouts(
            &state.old_params,
            it,
            binding,
            env,
            cfg,
            &mut state.stats,
            &mut state.sampling_rng,
        )?;
        let steps = batch.trajectories[0].num_transitions();
        let selected = sample(&mut state.timestep_rng, steps, cfg.timesteps_per_iteration).into_vec();
        let mut ppo_sum = 0.0;
        for &k in &selected {
            let (loss, grad) = value_and_grad(&state.params, |g, pn| {
                ppo_objective(g, pn, &batch, env, cfg.clip_epsilon, &[k])
            })
            .map_err(|e| iteration_error(e, it, binding.task.kind.name()))?;
            clipped_step(
                state.params.as_mut_slice(),
                grad,
                &mut state.opt,
                inputs.adamw,
                cfg.lr,
                cfg.max_grad_norm,
            )
            .map_err(|e| iteration_error(e, it, binding.task.kind.name()))?;
            ppo_sum += loss;
        }
        let mean_reward = batch.mean_reward();
        let mut row = MetricsRow::new(it, binding.task.kind.name());
        row.mean_reward = mean_reward;
        row.loss_ppo = ppo_sum / selected.len() as f64;
        row.statistical_parity = batch.parity;
        if binding.task.kind == TaskKind::Composition {
            match binding.task.split {
                PromptSplit::Train => row.detection_seen = Some(mean_reward),
                PromptSplit::Heldout => row.detection_unseen = Some(mean_reward),
            }
        }
        rows.push(row);
    }
    if cfg.beta_pretrain > 0.0 {
        let loss = pretrain_step(
            &mut state.params,
            &mut state.opt,
            inputs.adamw,
            inputs.pretrain_data,
            &env.world.layout,
            &env.schedule,
            inputs.pretrain,
            cfg.lr,
            cfg.beta_pretrain,
            &mut state.pretrain_rng,
        )
        .map_err(|e| iteration_error(e, it, "pretraining"))?;
        for r in rows.iter_mut() {
            r.loss_pretrain = Some(loss);
        }
    }
    state.iteration += 1;
    Ok(rows)
}

fn iteration_error(e: Error, iteration: u64, stage: &str) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("iteration {iteration}, {stage}: {m}")),
        other => other,
    }
}

/// Runs `cfg.iterations - state.iteration` iterations, calling `on_iteration`
/// after each one.
pub fn train(
    state: &mut TrainerState,
    tasks: &[TaskBinding],
    inputs: &TrainInputs<'_>,
    cfg: &TrainConfig,
    mut on_iteration: impl FnMut(&TrainerState, &[MetricsRow]) -> Result<()>,
) -> Result<()> {
    cfg.validate(&inputs.env.sampler)?;
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no fine-tuning tasks".into()));
    }
    while (state.iteration as usize) < cfg.iterations {
        let rows = train_iteration(state, tasks, inputs, cfg)?;
        on_iteration(state, &rows)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::forward_backward;
    use crate::diffusion::{draw_noise, gaussian_log_prob, pretraining_loss_with};
    use crate::mlp::MlpConfig;
    use crate::tasks::{gen_pretrain_dataset, DatasetSpec, WorldSpec};
    use rand::Rng;

    fn tiny_env() -> Env {
        let spec = WorldSpec {
            num_objects: 3,
            portrait_styles: 2,
            heldout_styles: 1,
            preference_prompts: 2,
            heldout_prompts: 1,
            ..WorldSpec::default()
        };
        Env {
            world: World::new(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(),
            schedule: NoiseSchedule::linear(100, 1e-4, 0.02).unwrap(),
            sampler: SamplerConfig {
                inference_steps: 5,
                ..SamplerConfig::default()
            },
            rewards: RewardConfig::default(),
        }
    }

    fn tiny_params(env: &Env, seed: u64) -> DenoiserParams {
        let cfg = MlpConfig {
            sample_dim: env.world.sample_dim(),
            context_dim: env.world.layout.dim(),
            hidden: vec![4],
        };
        assert!(cfg.num_params() <= 300);
        DenoiserParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            prompts_per_iteration: 3,
            samples_per_prompt: 4,
            timesteps_per_iteration: 2,
            iterations: 2,
            ..TrainConfig::default()
        }
    }

    fn rollouts(env: &Env, params: &DenoiserParams, kind: TaskKind, seed: u64) -> RolloutBatch {
        let binding = TaskBinding {
            samples_per_prompt: None,
            ..TaskBinding::for_kind(kind, &env.rewards)
        };
        let mut stats = RunningStats::default();
        collect_rollouts(
            params,
            0,
            &binding,
            env,
            &small_cfg(),
            &mut stats,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    fn objective_grad(
        env: &Env,
        params: &DenoiserParams,
        batch: &RolloutBatch,
        eps: f64,
        sel: &[usize],
    ) -> (f64, Vec<f64>) {
        value_and_grad(params, |g, pn| ppo_objective(g, pn, batch, env, eps, sel)).unwrap()
    }

    fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(floor)
    }

    #[test]
    fn importance_ratio_examples() {
        let old = gaussian_log_prob(&[0.0], &[0.0], 1.0).unwrap();
        let new = gaussian_log_prob(&[0.0], &[0.1], 1.0).unwrap();
        assert!((importance_ratio(new, old).unwrap() - (-0.005f64).exp()).abs() < 1e-15);
        assert!((importance_ratio(new, old).unwrap() - 0.995012).abs() < 1e-6);
        assert_eq!(importance_ratio(old, old).unwrap(), 1.0);
        assert_eq!(importance_ratio(-800.0, 0.0).unwrap(), 0.0);
        assert!(importance_ratio(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn clip_term_examples() {
        assert_eq!(clip_term(0.1, 2.0), 2.2);
        assert_eq!(clip_term(0.1, -2.0), -1.8);
        assert_eq!(clip_term(0.3, 0.0), 0.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(0.2));
        let b = g.constant(Tensor::scalar(0.3));
        let t = total_loss(&mut g, a, b, 1.0).unwrap();
        assert!((g.value(t).item().unwrap() - 0.5).abs() < 1e-15);
        let t0 = total_loss(&mut g, a, b, 0.0).unwrap();
        assert_eq!(g.value(t0).item().unwrap(), 0.2);
        assert!(total_loss(&mut g, a, b, -1.0).is_err());
    }

    #[test]
    fn rollout_shape_normalization_and_determinism() {
        let env = tiny_env();
        let p = tiny_params(&env, 1);
        let a = rollouts(&env, &p, TaskKind::Preference, 5);
        assert_eq!(a.trajectories.len(), 12);
        let adv = &a.advantages.advantages;
        let mean = adv.iter().sum::<f64>() / 12.0;
        let var = adv.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 12.0;
        let s2 = a.advantages.std * a.advantages.std;
        assert!(mean.abs() < 1e-9, "{mean}");
        assert!((var - s2 / (s2 + 1e-8)).abs() < 1e-9, "{var}");
        assert_eq!(a, rollouts(&env, &p, TaskKind::Preference, 5));
        assert!(a.trajectories.iter().all(|t| t.num_transitions() == 5));
    }

    #[test]
    fn distributional_rewards_broadcast_per_minibatch() {
        let env = tiny_env();
        let p = tiny_params(&env, 1);
        let binding = TaskBinding::for_kind(TaskKind::Portrait, &env.rewards);
        let mut stats = RunningStats::default();
        let b = collect_rollouts(
            &p,
            0,
            &binding,
            &env,
            &small_cfg(),
            &mut stats,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        assert_eq!(b.trajectories.len(), 3 * 16);
        for (grp, adv) in b.trajectories.chunks(16).zip(b.advantages.advantages.chunks(16)) {
            assert!(grp.iter().all(|t| t.reward == grp[0].reward));
            assert!(adv.iter().all(|&a| a == adv[0]));
        }
        assert!(b.parity.unwrap() >= 0.0);
    }

    #[test]
    fn on_policy_objective_is_mean_advantage() {
        let env = tiny_env();
        let p = tiny_params(&env, 1);
        let b = rollouts(&env, &p, TaskKind::Composition, 3);
        let (loss, _) = objective_grad(&env, &p, &b, 0.2, &[0, 3]);
        let mean_adv = b.advantages.advantages.iter().sum::<f64>() / 12.0;
        assert!((-loss - mean_adv).abs() < 1e-12, "{loss} vs {mean_adv}");
    }

    #[test]
    fn zero_advantages_give_zero_objective_and_gradient() {
        let env = tiny_env();
        let p = tiny_params(&env, 1);
        let mut b = rollouts(&env, &p, TaskKind::Preference, 3);
        b.advantages.advantages.iter_mut().for_each(|a| *a = 0.0);
        let (loss, grad) = objective_grad(&env, &p, &b, 0.2, &[1, 2]);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&x| x == 0.0));
        assert!(ppo_objective(
            &mut Graph::new(),
            &ParamNodes::constants(&mut Graph::new(), &p),
            &b,
            &env,
            0.2,
            &[]
        )
        .is_err());
    }

    #[test]
    fn on_policy_gradient_matches_reinforce() {
        let env = tiny_env();
        let p = tiny_params(&env, 4);
        let b = rollouts(&env, &p, TaskKind::Preference, 8);
        let sel = [0, 2, 4];
        let (_, grad) = objective_grad(&env, &p, &b, 1e-4, &sel);
        let n = b.trajectories.len();
        let (_, reinforce) = value_and_grad(&p, |g, pn| {
            let adv = g.constant(Tensor::matrix(n, 1, b.advantages.advantages.clone())?);
            let mut acc: Option<NodeId> = None;
            for &k in &sel {
                let lp = transition_log_probs(g, pn, &b.trajectories, k, &env)?;
                let m = g.mul(lp, adv)?;
                let s = g.sum(m);
                acc = Some(match acc {
                    None => s,
                    Some(a) => g.add(a, s)?,
                });
            }
            Ok(g.scale(acc.unwrap(), -1.0 / (n * sel.len()) as f64))
        })
        .unwrap();
        let scale = reinforce.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (a, r) in grad.iter().zip(&reinforce) {
            assert!(rel_err(*a, *r, 1e-6 * scale) < 1e-8, "{a} vs {r}");
        }
    }

    #[test]
    fn stored_log_probs_are_reproduced_at_theta_old() {
        let env = tiny_env();
        let p = tiny_params(&env, 2);
        let b = rollouts(&env, &p, TaskKind::Composition, 1);
        for k in 0..5 {
            let mut g = Graph::new();
            let pn = ParamNodes::constants(&mut g, &p);
            let lp = transition_log_probs(&mut g, &pn, &b.trajectories, k, &env).unwrap();
            for (i, tr) in b.trajectories.iter().enumerate() {
                assert_eq!(g.value(lp).data()[i], tr.log_probs[k]);
                assert_eq!(importance_ratio(g.value(lp).data()[i], tr.log_probs[k]).unwrap(), 1.0);
            }
        }
    }

    fn perturbed(p: &DenoiserParams, scale: f64, seed: u64) -> DenoiserParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q = p.clone();
        for v in q.as_mut_slice() {
            *v += scale * (rng.random::<f64>() - 0.5);
        }
        q
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let env = tiny_env();
        let old = tiny_params(&env, 6);
        let b = rollouts(&env, &old, TaskKind::Preference, 9);
        let p = perturbed(&old, 0.02, 1);
        let data =
            gen_pretrain_dataset(&env.world, &DatasetSpec { size: 6 }, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x0 = Tensor::from_rows(&data.iter().map(|s| s.x0.as_slice()).collect::<Vec<_>>()).unwrap();
        let ctx = Tensor::from_rows(
            &data
                .iter()
                .map(|s| env.world.layout.encode(&s.context))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let draws = draw_noise(6, 4, &env.schedule, 0.3, &mut ChaCha8Rng::seed_from_u64(4));
        let sel = [1, 3];
        let build = |g: &mut Graph, pn: &ParamNodes| -> Result<NodeId> {
            let ppo = ppo_objective(g, pn, &b, &env, 0.2, &sel)?;
            let pre = pretraining_loss_with(g, pn, &x0, &ctx, &draws, &env.schedule)?;
            total_loss(g, ppo, pre, 0.1)
        };
        let value_at = |q: &DenoiserParams| -> f64 {
            let mut g = Graph::new();
            let pn = ParamNodes::constants(&mut g, q);
            let l = build(&mut g, &pn).unwrap();
            g.value(l).item().unwrap()
        };
        let (_, grad) = value_and_grad(&p, build).unwrap();
        let h = 1e-6;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = p.clone();
            minus.as_mut_slice()[i] -= h;
            let fd = (value_at(&plus) - value_at(&minus)) / (2.0 * h);
            assert!(rel_err(grad[i], fd, 1e-4) < 1e-5, "param {i}: {} vs {fd}", grad[i]);
        }
    }

    #[test]
    fn gradient_is_additive_across_terms() {
        let env = tiny_env();
        let old = tiny_params(&env, 6);
        let b = rollouts(&env, &old, TaskKind::Composition, 9);
        let p = perturbed(&old, 0.01, 2);
        let data =
            gen_pretrain_dataset(&env.world, &DatasetSpec { size: 5 }, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x0 = Tensor::from_rows(&data.iter().map(|s| s.x0.as_slice()).collect::<Vec<_>>()).unwrap();
        let ctx = Tensor::from_rows(
            &data
                .iter()
                .map(|s| env.world.layout.encode(&s.context))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let draws = draw_noise(5, 4, &env.schedule, 0.0, &mut ChaCha8Rng::seed_from_u64(5));
        let beta = 0.37;
        let (_, gp) = value_and_grad(&p, |g, pn| ppo_objective(g, pn, &b, &env, 0.2, &[2])).unwrap();
        let (_, gl) = value_and_grad(&p, |g, pn| {
            pretraining_loss_with(g, pn, &x0, &ctx, &draws, &env.schedule)
        })
        .unwrap();
        let (_, gt) = value_and_grad(&p, |g, pn| {
            let ppo = ppo_objective(g, pn, &b, &env, 0.2, &[2])?;
            let pre = pretraining_loss_with(g, pn, &x0, &ctx, &draws, &env.schedule)?;
            total_loss(g, ppo, pre, beta)
        })
        .unwrap();
        for i in 0..p.len() {
            assert!((gt[i] - (gp[i] + beta * gl[i])).abs() <= 1e-12 * (1.0 + gt[i].abs()));
        }
    }

    #[test]
    fn surrogate_never_exceeds_clip_bound() {
        let env = tiny_env();
        let old = tiny_params(&env, 3);
        let b = rollouts(&env, &old, TaskKind::Preference, 4);
        let eps = 0.05;
        let bound = b.advantages.advantages.iter().map(|&a| clip_term(eps, a)).sum::<f64>() / 12.0;
        for s in 0..5 {
            let p = perturbed(&old, 0.5, s);
            let mut g = Graph::new();
            let pn = ParamNodes::constants(&mut g, &p);
            let l = ppo_objective(&mut g, &pn, &b, &env, eps, &[0, 1, 4]).unwrap();
            assert!(-g.value(l).item().unwrap() <= bound + 1e-12);
        }
    }

    #[test]
    fn clip_is_inactive_near_theta_old_for_positive_advantages() {
        let env = tiny_env();
        let old = tiny_params(&env, 3);
        let b = rollouts(&env, &old, TaskKind::Preference, 4);
        let p = perturbed(&old, 1e-7, 9);
        let k = 2;
        let mut g = Graph::new();
        let pn = ParamNodes::constants(&mut g, &p);
        let lp = transition_log_probs(&mut g, &pn, &b.trajectories, k, &env).unwrap();
        let eps = 0.2;
        for (i, tr) in b.trajectories.iter().enumerate() {
            let w = importance_ratio(g.value(lp).data()[i], tr.log_probs[k]).unwrap();
            assert!((w - 1.0).abs() <= eps);
            let a = b.advantages.advantages[i];
            if a >= 0.0 {
                assert_eq!((w * a).min(clip_term(eps, a)), w * a);
            }
        }
    }

    #[test]
    fn reward_shift_leaves_loss_and_gradient_unchanged() {
        let env = tiny_env();
        let p = tiny_params(&env, 1);
        let b = rollouts(&env, &p, TaskKind::Preference, 6);
        let keys: Vec<String> = b.trajectories.iter().map(|t| t.context.key()).collect();
        let shifted: Vec<f64> = b.trajectories.iter().map(|t| t.reward.unwrap() + 3.5).collect();
        let mut stats = RunningStats::default();
        let mut b2 = b.clone();
        b2.advantages = normalize_advantages(&shifted, &keys, NormalizationMode::PerBatch, &mut stats).unwrap();
        let q = perturbed(&p, 0.01, 3);
        let (l1, g1) = objective_grad(&env, &q, &b, 0.2, &[0, 4]);
        let (l2, g2) = objective_grad(&env, &q, &b2, 0.2, &[0, 4]);
        assert!((l1 - l2).abs() < 1e-9);
        for (a, c) in g1.iter().zip(&g2) {
            assert!((a - c).abs() < 1e-8 * (1.0 + a.abs()));
        }
    }

    fn tiny_inputs<'a>(
        env: &'a Env,
        data: &'a [SceneSample],
        pre: &'a PretrainConfig,
        adamw: &'a AdamWConfig,
    ) -> TrainInputs<'a> {
        TrainInputs {
            env,
            pretrain_data: data,
            pretrain: pre,
            adamw,
        }
    }

    #[test]
    fn zero_iterations_leave_model_unchanged() {
        let env = tiny_env();
        let p = tiny_params(&env, 1);
        let data =
            gen_pretrain_dataset(&env.world, &DatasetSpec { size: 30 }, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let pre = PretrainConfig {
            batch_size: 8,
            ..PretrainConfig::default()
        };
        let adamw = AdamWConfig::default();
        let inputs = tiny_inputs(&env, &data, &pre, &adamw);
        let mut state = TrainerState::new(p.clone(), 0);
        let cfg = TrainConfig {
            iterations: 0,
            ..small_cfg()
        };
        let tasks = [TaskBinding::for_kind(TaskKind::Preference, &env.rewards)];
        let mut calls = 0;
        train(&mut state, &tasks, &inputs, &cfg, |_, _| {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 0);
        assert_eq!(state.params, p);
    }

    fn run(seed: u64, beta: f64) -> (TrainerState, Vec<MetricsRow>) {
        let env = tiny_env();
        let p = tiny_params(&env, 1);
        let data =
            gen_pretrain_dataset(&env.world, &DatasetSpec { size: 30 }, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let pre = PretrainConfig {
            batch_size: 8,
            ..PretrainConfig::default()
        };
        let adamw = AdamWConfig::default();
        let inputs = tiny_inputs(&env, &data, &pre, &adamw);
        let mut state = TrainerState::new(p, seed);
        let cfg = TrainConfig {
            beta_pretrain: beta,
            ..small_cfg()
        };
        let tasks: Vec<TaskBinding> = [TaskKind::Composition, TaskKind::Portrait, TaskKind::Preference]
            .into_iter()
            .map(|k| TaskBinding::for_kind(k, &env.rewards))
            .collect();
        let mut rows = Vec::new();
        train(&mut state, &tasks, &inputs, &cfg, |st, r| {
            assert_eq!(st.old_params.len(), st.params.len());
            rows.extend_from_slice(r);
            Ok(())
        })
        .unwrap();
        (state, rows)
    }

    #[test]
    fn training_is_deterministic_and_rows_follow_task_order() {
        let (a, rows_a) = run(11, 0.1);
        let (b, rows_b) = run(11, 0.1);
        assert_eq!(a.params, b.params);
        assert_eq!(rows_a, rows_b);
        let names: Vec<&str> = rows_a.iter().map(|r| r.task.as_str()).collect();
        assert_eq!(names, ["composition", "portrait", "preference"].repeat(2));
        assert!(rows_a.iter().all(|r| r.loss_pretrain.is_some()));
        assert!(rows_a[0].detection_seen.is_some() && rows_a[1].statistical_parity.is_some());
        let (c, rows_c) = run(11, 0.0);
        assert!(rows_c.iter().all(|r| r.loss_pretrain.is_none()));
        assert_ne!(c.params, a.params);
    }

    #[test]
    fn theta_old_is_the_iteration_start_snapshot() {
        let env = tiny_env();
        let p = tiny_params(&env, 1);
        let data =
            gen_pretrain_dataset(&env.world, &DatasetSpec { size: 30 }, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let pre = PretrainConfig {
            batch_size: 8,
            ..PretrainConfig::default()
        };
        let adamw = AdamWConfig::default();
        let inputs = tiny_inputs(&env, &data, &pre, &adamw);
        let mut state = TrainerState::new(p.clone(), 3);
        let tasks = [TaskBinding::for_kind(TaskKind::Preference, &env.rewards)];
        train_iteration(&mut state, &tasks, &inputs, &small_cfg()).unwrap();
        assert_eq!(state.old_params, p);
        assert_ne!(state.params, p);
        let before = state.params.clone();
        train_iteration(&mut state, &tasks, &inputs, &small_cfg()).unwrap();
        assert_eq!(state.old_params, before);
        assert_eq!(state.iteration, 2);
    }

    #[test]
    fn fd_sanity_of_pretraining_term_alone() {
        let env = tiny_env();
        let p = tiny_params(&env, 8);
        let data =
            gen_pretrain_dataset(&env.world, &DatasetSpec { size: 4 }, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x0 = Tensor::from_rows(&data.iter().map(|s| s.x0.as_slice()).collect::<Vec<_>>()).unwrap();
        let ctx = Tensor::from_rows(
            &data
                .iter()
                .map(|s| env.world.layout.encode(&s.context))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let draws = draw_noise(4, 4, &env.schedule, 0.5, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let pn = ParamNodes::leaves(&mut g, &p);
        let l = pretraining_loss_with(&mut g, &pn, &x0, &ctx, &draws, &env.schedule).unwrap();
        let (v, grads) = forward_backward(&g, l).unwrap();
        assert!(v.is_finite());
        assert_eq!(pn.flat_grad(&grads).len(), p.len());
    }
}
