use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::mlp::{mlp_forward_graph, time_embedding, DenoiserParams, ParamNodes, TIME_EMBED_DIM};
use crate::tasks::{Context, ContextLayout};
use crate::tensor::Tensor;

/// Per-coordinate bound applied to the predicted clean sample x̂0.
pub const X0_CLAMP: f64 = 3.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub inference_steps: usize,
    pub eta: f64,
    pub guidance_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            inference_steps: 50,
            eta: 1.0,
            guidance_scale: 1.5,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.inference_steps == 0 || self.inference_steps > schedule.steps() {
            return Err(Error::InvalidArgument(format!(
                "inference_steps {} must lie in 1..={}",
                self.inference_steps,
                schedule.steps()
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidArgument(format!("eta {} outside [0, 1]", self.eta)));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "guidance scale {} must be finite and >= 0",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

/// One denoising episode under a frozen policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub context: Context,
    /// `t_K, ..., t_0`.
    pub timesteps: Vec<usize>,
    /// `x_{t_K}` (initial noise) through `x_{t_0}` (the final sample).
    pub states: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    pub sigmas: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub reward: Option<f64>,
    pub seed: u64,
}

impl Trajectory {
    pub fn num_transitions(&self) -> usize {
        self.log_probs.len()
    }

    pub fn final_sample(&self) -> &[f64] {
        self.states.last().expect("trajectory has states")
    }
}

/// Scalars of one reverse transition `t -> t_prev`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoeffs {
    pub t: usize,
    pub t_prev: usize,
    pub sqrt_one_minus_ab_t: f64,
    pub inv_sqrt_ab_t: f64,
    pub sqrt_ab_prev: f64,
    pub direction: f64,
    pub sigma: f64,
}

impl StepCoeffs {
    pub fn new(schedule: &NoiseSchedule, t: usize, t_prev: usize, eta: f64) -> Result<Self> {
        if t > schedule.steps() || t <= t_prev {
            return Err(Error::InvalidArgument(format!(
                "reverse step {t} -> {t_prev} invalid for T={}",
                schedule.steps()
            )));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::InvalidArgument(format!("eta {eta} outside [0, 1]")));
        }
        let ab_t = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar_target(t_prev);
        let mut var = eta * eta * ((1.0 - ab_prev) / (1.0 - ab_t)) * (1.0 - ab_t / ab_prev);
        if var < 0.0 {
            if eta > 0.0 {
                return Err(Error::DegenerateVariance { t, t_prev, eta });
            }
            var = 0.0;
        }
        Ok(Self {
            t,
            t_prev,
            sqrt_one_minus_ab_t: (1.0 - ab_t).sqrt(),
            inv_sqrt_ab_t: 1.0 / ab_t.sqrt(),
            sqrt_ab_prev: ab_prev.sqrt(),
            direction: (1.0 - ab_prev - var).max(0.0).sqrt(),
            sigma: var.sqrt(),
        })
    }
}

fn model_input(x_t: &Tensor, t: usize, steps: usize, ctx: &Tensor) -> Result<Tensor> {
    let n = x_t.rows();
    if ctx.rows() != n {
        return Err(Error::shape("model_input", x_t.shape(), ctx.shape()));
    }
    let te = time_embedding(t, steps);
    let width = x_t.cols() + TIME_EMBED_DIM + ctx.cols();
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        data.extend_from_slice(x_t.row(i));
        data.extend_from_slice(&te);
        data.extend_from_slice(ctx.row(i));
    }
    Tensor::matrix(n, width, data)
}

/// Classifier-free-guided ε̂ for every row of `x_t` (shared timestep `t`).
/// `ctx` holds encoded contexts; the unconditional pass uses all-zero rows.
pub fn guided_eps_graph(
    g: &mut Graph,
    params: &ParamNodes,
    x_t: &Tensor,
    t: usize,
    steps: usize,
    ctx: &Tensor,
    guidance: f64,
) -> Result<NodeId> {
    let cond = |g: &mut Graph| -> Result<NodeId> {
        let input = g.constant(model_input(x_t, t, steps, ctx)?);
        mlp_forward_graph(g, params, input)
    };
    let uncond = |g: &mut Graph| -> Result<NodeId> {
        let null = Tensor::zeros(ctx.shape());
        let input = g.constant(model_input(x_t, t, steps, &null)?);
        mlp_forward_graph(g, params, input)
    };
    if guidance == 1.0 {
        return cond(g);
    }
    if guidance == 0.0 {
        return uncond(g);
    }
    let eu = uncond(g)?;
    let ec = cond(g)?;
    let d = g.sub(ec, eu)?;
    let s = g.scale(d, guidance);
    g.add(eu, s)
}

pub fn predict_eps(
    params: &DenoiserParams,
    x_t: &Tensor,
    t: usize,
    steps: usize,
    ctx: &Tensor,
    guidance: f64,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let pn = ParamNodes::constants(&mut g, params);
    let out = guided_eps_graph(&mut g, &pn, x_t, t, steps, ctx, guidance)?;
    Ok(g.value(out).clone())
}

/// Policy mean `sqrt(ᾱ_prev) x̂0 + sqrt(1 - ᾱ_prev - σ²) ε̂`.
pub fn reverse_mean_graph(g: &mut Graph, eps: NodeId, x_t: NodeId, c: &StepCoeffs) -> Result<NodeId> {
    let noise = g.scale(eps, c.sqrt_one_minus_ab_t);
    let diff = g.sub(x_t, noise)?;
    let x0 = g.scale(diff, c.inv_sqrt_ab_t);
    let x0 = g.clamp(x0, -X0_CLAMP, X0_CLAMP);
    let a = g.scale(x0, c.sqrt_ab_prev);
    let b = g.scale(eps, c.direction);
    g.add(a, b)
}

pub fn reverse_step_params(
    eps: &Tensor,
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    eta: f64,
) -> Result<(Tensor, f64)> {
    let c = StepCoeffs::new(schedule, t, t_prev, eta)?;
    let mut g = Graph::new();
    let e = g.constant(eps.clone());
    let x = g.constant(x_t.clone());
    let m = reverse_mean_graph(&mut g, e, x, &c)?;
    Ok((g.value(m).clone(), c.sigma))
}

/// Isotropic normal log-density, summed over dimensions.
pub fn gaussian_log_prob(x: &[f64], mu: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} must be > 0")));
    }
    if x.len() != mu.len() {
        return Err(Error::shape("gaussian_log_prob", &[x.len()], &[mu.len()]));
    }
    let ss: f64 = x
        .iter()
        .zip(mu)
        .map(|(a, b)| {
            let d = a - b;
            d * d
        })
        .sum();
    let (scale, offset) = log_prob_terms(sigma, x.len());
    Ok(ss * scale + offset)
}

fn log_prob_terms(sigma: f64, dim: usize) -> (f64, f64) {
    let scale = -1.0 / (2.0 * sigma * sigma);
    let offset = -(dim as f64) * (sigma.ln() + HALF_LN_2PI);
    (scale, offset)
}

/// Row-wise log-density (`n x 1`) of the constant `x` under `N(mean, σ²I)`.
/// Performs the same floating-point operations as [`gaussian_log_prob`].
pub fn log_prob_graph(g: &mut Graph, x: NodeId, mean: NodeId, sigma: f64) -> Result<NodeId> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} must be > 0")));
    }
    let (n, dim) = (g.value(x).rows(), g.value(x).cols());
    let (scale, offset) = log_prob_terms(sigma, dim);
    let d = g.sub(x, mean)?;
    let sq = g.square(d);
    let rs = g.sum_cols(sq);
    let scaled = g.scale(rs, scale);
    let off = g.constant(Tensor::full(&[n, 1], offset));
    g.add(scaled, off)
}

fn standard_normal(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

struct Rollout {
    states: Vec<Vec<Vec<f64>>>,
    means: Vec<Vec<Vec<f64>>>,
    sigmas: Vec<f64>,
    log_probs: Vec<Vec<f64>>,
    timesteps: Vec<usize>,
}

fn run_sampler(
    params: &DenoiserParams,
    contexts: &[Context],
    seeds: &[u64],
    layout: &ContextLayout,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
    record: bool,
) -> Result<Rollout> {
    sampler.validate(schedule)?;
    if contexts.len() != seeds.len() {
        return Err(Error::shape("sample", &[contexts.len()], &[seeds.len()]));
    }
    let dim = params.config().sample_dim;
    let n = contexts.len();
    let enc: Vec<Vec<f64>> = contexts.iter().map(|c| layout.encode(c)).collect();
    let ctx = if n == 0 {
        Tensor::zeros(&[0, layout.dim()])
    } else {
        Tensor::from_rows(&enc)?
    };
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let timesteps = schedule.inference_timesteps(sampler.inference_steps)?;
    let mut x: Vec<Vec<f64>> = rngs.iter_mut().map(|r| standard_normal(r, dim)).collect();

    let mut out = Rollout {
        states: vec![Vec::new(); n],
        means: vec![Vec::new(); n],
        sigmas: Vec::new(),
        log_probs: vec![Vec::new(); n],
        timesteps: timesteps.clone(),
    };
    if record {
        for (s, xi) in out.states.iter_mut().zip(&x) {
            s.push(xi.clone());
        }
    }
    if n == 0 {
        return Ok(out);
    }

    let mut g = Graph::new();
    let pn = ParamNodes::constants(&mut g, params);
    let base = g.len();
    for w in timesteps.windows(2) {
        let (t, t_prev) = (w[0], w[1]);
        let c = StepCoeffs::new(schedule, t, t_prev, sampler.eta)?;
        if record && !(c.sigma > 0.0) {
            return Err(Error::DegenerateVariance {
                t,
                t_prev,
                eta: sampler.eta,
            });
        }
        g.truncate(base);
        let xt = Tensor::from_rows(&x)?;
        let eps = guided_eps_graph(&mut g, &pn, &xt, t, schedule.steps(), &ctx, sampler.guidance_scale)?;
        let xn = g.constant(xt);
        let mean = reverse_mean_graph(&mut g, eps, xn, &c)?;
        let mean = g.value(mean);
        if !mean.all_finite() {
            return Err(Error::NonFinite(format!("policy mean at t={t}")));
        }
        for i in 0..n {
            let mu = mean.row(i);
            let z = standard_normal(&mut rngs[i], dim);
            let next: Vec<f64> = mu.iter().zip(&z).map(|(m, z)| m + c.sigma * z).collect();
            if record {
                out.log_probs[i].push(gaussian_log_prob(&next, mu, c.sigma)?);
                out.means[i].push(mu.to_vec());
                out.states[i].push(next.clone());
            }
            x[i] = next;
        }
        out.sigmas.push(c.sigma);
    }
    if !record {
        out.states = x.into_iter().map(|xi| vec![xi]).collect();
    }
    Ok(out)
}

/// Samples one trajectory per context. Trajectory `i` draws all of its noise
/// from a ChaCha8 stream seeded with `seeds[i]`, so the result does not depend
/// on how trajectories are batched.
pub fn sample_trajectories(
    params: &DenoiserParams,
    contexts: &[Context],
    seeds: &[u64],
    layout: &ContextLayout,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<Trajectory>> {
    if !(sampler.eta > 0.0) {
        return Err(Error::InvalidArgument(
            "trajectory sampling needs eta > 0 (a zero-variance policy has no log-density)".into(),
        ));
    }
    let r = run_sampler(params, contexts, seeds, layout, sampler, schedule, true)?;
    Ok(contexts
        .iter()
        .zip(seeds)
        .zip(r.states.into_iter().zip(r.means).zip(r.log_probs))
        .map(|((&context, &seed), ((states, means), log_probs))| Trajectory {
            context,
            timesteps: r.timesteps.clone(),
            states,
            means,
            sigmas: r.sigmas.clone(),
            log_probs,
            reward: None,
            seed,
        })
        .collect())
}

pub fn sample_trajectory(
    params: &DenoiserParams,
    context: Context,
    seed: u64,
    layout: &ContextLayout,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Trajectory> {
    Ok(sample_trajectories(params, &[context], &[seed], layout, sampler, schedule)?.remove(0))
}

/// Final samples only; unlike [`sample_trajectories`] this accepts `eta = 0`.
pub fn generate_samples(
    params: &DenoiserParams,
    contexts: &[Context],
    seeds: &[u64],
    layout: &ContextLayout,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<Vec<f64>>> {
    let r = run_sampler(params, contexts, seeds, layout, sampler, schedule, false)?;
    Ok(r.states.into_iter().map(|mut s| s.remove(0)).collect())
}
