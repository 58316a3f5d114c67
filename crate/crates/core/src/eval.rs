//! Held-out evaluation: preference reward, statistical parity, detection on
//! seen/unseen objects, pretraining loss, and relative scores.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::diffusion::{draw_noise, generate_samples, pretraining_loss_with};
use crate::error::{Error, Result};
use crate::mlp::{DenoiserParams, ParamNodes};
use crate::rewards::{composition_reward, preference_reward, statistical_parity};
use crate::rl::{stream_rng, Env};
use crate::tasks::{
    classify_attribute, gen_pretrain_dataset, make_prompt, Context, DatasetSpec, PromptSplit, TaskKind, TaskSpec,
};
use crate::tensor::Tensor;

pub const METRIC_PREFERENCE: &str = "preference";
pub const METRIC_PARITY: &str = "parity";
pub const METRIC_DETECTION: &str = "detection";
pub const METRIC_DETECTION_SEEN: &str = "detection_seen";
pub const METRIC_DETECTION_UNSEEN: &str = "detection_unseen";
pub const METRIC_PRETRAIN_LOSS: &str = "pretrain_loss";

/// Metrics where smaller is better.
pub fn lower_is_better(metric: &str) -> bool {
    matches!(metric, METRIC_PARITY | METRIC_PRETRAIN_LOSS)
}

/// Anything that maps (context, seed) pairs to samples.
pub trait Generator {
    fn generate(&self, contexts: &[Context], seeds: &[u64]) -> Result<Vec<Vec<f64>>>;
}

/// A denoiser sampled with the environment's sampler settings.
pub struct ModelGenerator<'a> {
    pub params: &'a DenoiserParams,
    pub env: &'a Env,
}

impl Generator for ModelGenerator<'_> {
    fn generate(&self, contexts: &[Context], seeds: &[u64]) -> Result<Vec<Vec<f64>>> {
        let e = self.env;
        generate_samples(self.params, contexts, seeds, &e.world.layout, &e.sampler, &e.schedule)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub samples_per_prompt: usize,
    pub prompts: usize,
    pub heldout_data_size: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples_per_prompt: 64,
            prompts: 16,
            heldout_data_size: 2048,
            seed: 1234,
        }
    }
}

impl EvalConfig {
    fn validate(&self) -> Result<()> {
        if self.samples_per_prompt == 0 || self.prompts == 0 {
            return Err(Error::InvalidArgument(
                "evaluation needs at least one prompt and sample".into(),
            ));
        }
        Ok(())
    }
}

const STREAM_EVAL_PREFERENCE: u64 = 10;
const STREAM_EVAL_PARITY: u64 = 11;
const STREAM_EVAL_SEEN: u64 = 12;
const STREAM_EVAL_UNSEEN: u64 = 13;
const STREAM_EVAL_LOSS: u64 = 14;

/// Samples `cfg.prompts` held-out (or seen) prompts and generates
/// `cfg.samples_per_prompt` samples for each; prompt-major order.
fn generate_for(
    gen: &dyn Generator,
    env: &Env,
    task: TaskSpec,
    cfg: &EvalConfig,
    stream: u64,
) -> Result<(Vec<Context>, Vec<Vec<f64>>)> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, stream);
    let mut contexts = Vec::with_capacity(cfg.prompts * cfg.samples_per_prompt);
    let mut seeds = Vec::with_capacity(contexts.capacity());
    for _ in 0..cfg.prompts {
        let c = make_prompt(&env.world, task, &mut rng);
        for _ in 0..cfg.samples_per_prompt {
            contexts.push(c);
            seeds.push(rng.random::<u64>());
        }
    }
    let xs = gen.generate(&contexts, &seeds)?;
    if xs.len() != contexts.len() {
        return Err(Error::shape("generator output", &[contexts.len()], &[xs.len()]));
    }
    Ok((contexts, xs))
}

fn heldout(kind: TaskKind) -> TaskSpec {
    TaskSpec {
        kind,
        split: PromptSplit::Heldout,
    }
}

/// Mean over held-out portrait prompts of the per-prompt parity.
pub fn evaluate_parity(gen: &dyn Generator, env: &Env, cfg: &EvalConfig) -> Result<f64> {
    let (_, xs) = generate_for(gen, env, heldout(TaskKind::Portrait), cfg, STREAM_EVAL_PARITY)?;
    let bins = env.world.attributes.bins();
    let mut total = 0.0;
    for chunk in xs.chunks(cfg.samples_per_prompt) {
        let labels: Vec<usize> = chunk
            .iter()
            .map(|x| classify_attribute(x, &env.world.attributes))
            .collect();
        total += statistical_parity(&labels, bins)?;
    }
    Ok(total / cfg.prompts as f64)
}

/// Mean composition reward on seen-object and unseen-object prompts.
pub fn evaluate_detection(gen: &dyn Generator, env: &Env, cfg: &EvalConfig) -> Result<(f64, f64)> {
    let score = |split: PromptSplit, stream: u64| -> Result<f64> {
        let task = TaskSpec {
            kind: TaskKind::Composition,
            split,
        };
        let (cs, xs) = generate_for(gen, env, task, cfg, stream)?;
        let mut s = 0.0;
        for (x, c) in xs.iter().zip(&cs) {
            s += composition_reward(&env.world, x, c)?;
        }
        Ok(s / xs.len() as f64)
    };
    Ok((
        score(PromptSplit::Train, STREAM_EVAL_SEEN)?,
        score(PromptSplit::Heldout, STREAM_EVAL_UNSEEN)?,
    ))
}

/// Mean preference reward on held-out preference prompts.
pub fn evaluate_preference(gen: &dyn Generator, env: &Env, cfg: &EvalConfig) -> Result<f64> {
    let (cs, xs) = generate_for(gen, env, heldout(TaskKind::Preference), cfg, STREAM_EVAL_PREFERENCE)?;
    let mut s = 0.0;
    for (x, c) in xs.iter().zip(&cs) {
        s += preference_reward(&env.world, x, c, &env.rewards)?;
    }
    Ok(s / xs.len() as f64)
}

/// ε-regression loss on a fresh dataset with fixed noise draws and no
/// context dropout.
pub fn heldout_pretrain_loss(params: &DenoiserParams, env: &Env, cfg: &EvalConfig) -> Result<f64> {
    if cfg.heldout_data_size == 0 {
        return Err(Error::InvalidArgument("empty held-out dataset".into()));
    }
    let mut rng = stream_rng(cfg.seed, STREAM_EVAL_LOSS);
    let data = gen_pretrain_dataset(
        &env.world,
        &DatasetSpec {
            size: cfg.heldout_data_size,
        },
        &mut rng,
    )?;
    let mut total = 0.0;
    for chunk in data.chunks(512) {
        let x0 = Tensor::from_rows(&chunk.iter().map(|s| s.x0.as_slice()).collect::<Vec<_>>())?;
        let ctx = Tensor::from_rows(
            &chunk
                .iter()
                .map(|s| env.world.layout.encode(&s.context))
                .collect::<Vec<_>>(),
        )?;
        let draws = draw_noise(chunk.len(), x0.cols(), &env.schedule, 0.0, &mut rng);
        let mut g = Graph::new();
        let pn = ParamNodes::constants(&mut g, params);
        let l = pretraining_loss_with(&mut g, &pn, &x0, &ctx, &draws, &env.schedule)?;
        total += g.value(l).item()? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Named metric values for one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub metrics: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn get(&self, metric: &str) -> Result<f64> {
        self.metrics
            .get(metric)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("report `{}` has no metric `{metric}`", self.label)))
    }
}

/// Full metric suite for one model.
pub fn evaluate(label: &str, params: &DenoiserParams, env: &Env, cfg: &EvalConfig) -> Result<EvalReport> {
    let gen = ModelGenerator { params, env };
    let (seen, unseen) = evaluate_detection(&gen, env, cfg)?;
    let mut metrics = BTreeMap::new();
    metrics.insert(METRIC_PREFERENCE.to_string(), evaluate_preference(&gen, env, cfg)?);
    metrics.insert(METRIC_PARITY.to_string(), evaluate_parity(&gen, env, cfg)?);
    metrics.insert(METRIC_DETECTION_SEEN.to_string(), seen);
    metrics.insert(METRIC_DETECTION_UNSEEN.to_string(), unseen);
    metrics.insert(METRIC_DETECTION.to_string(), 0.5 * (seen + unseen));
    metrics.insert(
        METRIC_PRETRAIN_LOSS.to_string(),
        heldout_pretrain_loss(params, env, cfg)?,
    );
    Ok(EvalReport {
        label: label.to_string(),
        metrics,
    })
}

/// `(joint - base) / (specialist - base)`, flipped for lower-is-better
/// metrics; `None` when the specialist equals the base.
pub fn relative_score(metric: &str, joint: f64, specialist: f64, base: f64) -> Option<f64> {
    let (num, den) = if lower_is_better(metric) {
        (base - joint, base - specialist)
    } else {
        (joint - base, specialist - base)
    };
    if den == 0.0 {
        None
    } else {
        Some(num / den)
    }
}

/// Relative score of `joint` for every metric; each metric is compared
/// against its own specialist.
pub fn evaluate_relative(
    joint: &BTreeMap<String, f64>,
    specialists: &BTreeMap<String, f64>,
    base: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, Option<f64>>> {
    let keys = |m: &BTreeMap<String, f64>| m.keys().cloned().collect::<Vec<_>>();
    if keys(joint) != keys(specialists) || keys(joint) != keys(base) {
        return Err(Error::InvalidArgument(format!(
            "metric sets differ: joint {:?}, specialists {:?}, base {:?}",
            keys(joint),
            keys(specialists),
            keys(base)
        )));
    }
    Ok(joint
        .iter()
        .map(|(k, &j)| (k.clone(), relative_score(k, j, specialists[k], base[k])))
        .collect())
}
