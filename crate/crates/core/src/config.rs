//! Run configuration: a flat document of dotted keys (`rl.clip_epsilon = 0.2`)
//! overlaid on documented defaults.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{BaselineConfig, BaselineMethod};
use crate::diffusion::{NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::mlp::MlpConfig;
use crate::optim::AdamWConfig;
use crate::pretrain::PretrainConfig;
use crate::rewards::RewardConfig;
use crate::rl::{stream_rng, Env, TaskBinding, TrainConfig};
use crate::tasks::{gen_pretrain_dataset, DatasetSpec, SceneSample, TaskKind, World, WorldSpec};

const STREAM_WORLD: u64 = 20;
const STREAM_DATA: u64 = 21;
pub const STREAM_INIT: u64 = 22;
pub const STREAM_PRETRAIN_RUN: u64 = 23;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub size: usize,
    /// Seeds the world (object split) and the pretraining corpus.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { size: 30_000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    /// `rl`, `reward_weighted` or `raft`.
    pub method: String,
    pub tasks: Vec<String>,
    /// Write an intermediate checkpoint every this many iterations (0: final only).
    pub checkpoint_every: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            method: "rl".into(),
            tasks: vec!["preference".into()],
            checkpoint_every: 0,
        }
    }
}

/// Fine-tuning method selected by `finetune.method`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Rl,
    Baseline(BaselineMethod),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: String,
    pub data: DataConfig,
    pub world: WorldSpec,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub rewards: RewardConfig,
    pub pretrain: PretrainConfig,
    pub adamw: AdamWConfig,
    pub finetune: FinetuneConfig,
    pub rl: TrainConfig,
    pub baseline: BaselineConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: "runs/default".into(),
            data: DataConfig::default(),
            world: WorldSpec::default(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            sampler: SamplerConfig::default(),
            rewards: RewardConfig::default(),
            pretrain: PretrainConfig::default(),
            adamw: AdamWConfig::default(),
            finetune: FinetuneConfig::default(),
            rl: TrainConfig::default(),
            baseline: BaselineConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("seed", "seed for initialization, pretraining and fine-tuning streams"),
    ("out", "output directory"),
    ("data.size", "number of pretraining samples"),
    (
        "data.seed",
        "seed for the world (object split) and the pretraining corpus",
    ),
    ("world.num_objects", "object classes on the circle"),
    ("world.object_radius", "radius of the object circle"),
    ("world.object_width", "detector kernel width"),
    ("world.slots", "object slots per sample (sample dimension is 2x this)"),
    ("world.jitter", "std of the Gaussian noise around every data mean"),
    ("world.attribute_bins", "number of portrait attribute bins"),
    ("world.bias_ratio", "probability of attribute bin 0 in portrait data"),
    ("world.portrait_styles", "portrait style ids"),
    ("world.heldout_styles", "portrait styles reserved for evaluation"),
    ("world.preference_prompts", "preference prompt ids"),
    ("world.heldout_prompts", "preference prompts reserved for evaluation"),
    (
        "world.train_fraction",
        "fraction of object classes that are seen during fine-tuning",
    ),
    ("model.hidden", "hidden layer widths of the denoiser"),
    ("schedule.steps", "diffusion steps T"),
    ("schedule.beta_min", "first beta of the linear schedule"),
    ("schedule.beta_max", "last beta of the linear schedule"),
    ("sampler.inference_steps", "DDIM steps per sample"),
    ("sampler.eta", "DDIM stochasticity (1 = DDPM posterior variance)"),
    ("sampler.guidance_scale", "classifier-free guidance scale"),
    ("rewards.preference_tau", "kernel width of the preference proxy"),
    (
        "rewards.preference_offset",
        "offset added to slot 0 of the preference target",
    ),
    ("rewards.parity_minibatch", "samples per prompt in a fairness minibatch"),
    ("pretrain.steps", "pretraining AdamW steps"),
    (
        "pretrain.batch_size",
        "pretraining minibatch size (also used for the fine-tuning anchor term)",
    ),
    ("pretrain.lr", "pretraining learning rate"),
    (
        "pretrain.context_dropout",
        "probability of replacing the context by the null context",
    ),
    ("pretrain.max_grad_norm", "global gradient-norm clip during pretraining"),
    ("adamw.beta1", "AdamW first-moment decay"),
    ("adamw.beta2", "AdamW second-moment decay"),
    ("adamw.eps", "AdamW denominator guard"),
    ("adamw.weight_decay", "decoupled weight decay"),
    ("finetune.method", "rl, reward_weighted or raft"),
    (
        "finetune.tasks",
        "task list in training order: preference, composition, fairness",
    ),
    (
        "finetune.checkpoint_every",
        "intermediate checkpoint cadence in iterations (0 = final only)",
    ),
    ("rl.clip_epsilon", "clip range of the surrogate objective"),
    (
        "rl.timesteps_per_iteration",
        "denoising steps sampled per iteration (one update each)",
    ),
    ("rl.beta_pretrain", "weight of the pretraining loss"),
    ("rl.lr", "fine-tuning learning rate"),
    ("rl.prompts_per_iteration", "prompts per task per iteration"),
    (
        "rl.samples_per_prompt",
        "samples per prompt (fairness uses rewards.parity_minibatch)",
    ),
    ("rl.normalization", "advantage normalization: per_batch or per_prompt"),
    ("rl.iterations", "outer iterations"),
    ("rl.max_grad_norm", "global gradient-norm clip"),
    (
        "baseline.rw_beta",
        "reward-weighted temperature: weights are minmax(r)^(1/rw_beta)",
    ),
    ("baseline.raft_k", "RAFT samples per prompt"),
    ("baseline.raft_accept", "RAFT samples kept per prompt"),
    ("baseline.lr", "baseline learning rate"),
    ("baseline.prompts_per_iteration", "prompts per iteration"),
    ("baseline.samples_per_prompt", "reward-weighted samples per prompt"),
    ("baseline.iterations", "baseline iterations"),
    (
        "baseline.context_dropout",
        "context dropout in the baseline regression loss",
    ),
    ("baseline.max_grad_norm", "global gradient-norm clip"),
    (
        "baseline.divergence_ratio",
        "flag when mean reward falls below this fraction of its peak",
    ),
    ("eval.samples_per_prompt", "samples per evaluation prompt"),
    ("eval.prompts", "evaluation prompts per metric"),
    ("eval.heldout_data_size", "samples in the held-out pretraining-loss set"),
    ("eval.seed", "evaluation seed"),
];

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn unflatten(flat: &BTreeMap<String, toml::Value>) -> toml::Table {
    let mut root = toml::Table::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .expect("dotted prefixes are tables");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    root
}

fn type_name(v: &toml::Value) -> &'static str {
    v.type_str()
}

/// Coerces `v` to the type of `default`, allowing integers for floats.
fn coerce(key: &str, v: toml::Value, default: &toml::Value) -> Result<toml::Value> {
    use toml::Value as V;
    match (default, v) {
        (V::Float(_), V::Integer(i)) => Ok(V::Float(i as f64)),
        (V::Array(d), V::Array(items)) => {
            if let Some(proto) = d.first() {
                let items = items
                    .into_iter()
                    .map(|x| coerce(key, x, proto))
                    .collect::<Result<Vec<_>>>()?;
                Ok(V::Array(items))
            } else {
                Ok(V::Array(items))
            }
        }
        (d, v) if std::mem::discriminant(d) == std::mem::discriminant(&v) => Ok(v),
        (d, v) => Err(Error::config(
            key,
            format!("expected {}, found {}", type_name(d), type_name(&v)),
        )),
    }
}

fn override_value(v: &str) -> toml::Value {
    match format!("x = {v}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("x").expect("parsed key"),
        Err(_) => toml::Value::String(v.to_string()),
    }
}

fn check(ok: bool, key: &str, message: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(key, message))
    }
}

impl RunConfig {
    fn flat(&self) -> BTreeMap<String, toml::Value> {
        let v = toml::Value::try_from(self).expect("config serializes");
        let mut out = BTreeMap::new();
        flatten("", v.as_table().expect("config is a table"), &mut out);
        out
    }

    /// Parses a document of dotted keys (or tables) over the defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_layers(text, &[])
    }

    /// Document over the defaults, then `key=value` overrides in order (later
    /// ones win). Override values are TOML literals; anything that does not
    /// parse as one is taken as a bare string.
    pub fn from_layers(text: &str, overrides: &[String]) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
            Error::config("<document>", format!("line {line}: {}", e.message()))
        })?;
        let mut user = Vec::new();
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat);
        user.extend(flat);
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "override must look like key=value"))?;
            user.push((k.trim().to_string(), override_value(v.trim())));
        }
        let mut merged = Self::default().flat();
        for (key, v) in user {
            let Some(default) = merged.get(&key) else {
                return Err(Error::config(&key, "unknown key"));
            };
            let v = coerce(&key, v, default)?;
            merged.insert(key, v);
        }
        let cfg: RunConfig = toml::Value::Table(unflatten(&merged))
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<document>", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// The resolved configuration as sorted `key = value` lines.
    pub fn to_flat_toml(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.flat() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// SHA-256 of [`Self::to_flat_toml`] with `out` blanked, hex encoded.
    /// The output directory does not affect results, so moving a run keeps
    /// its hash.
    pub fn hash(&self) -> String {
        let cfg = Self {
            out: String::new(),
            ..self.clone()
        };
        Sha256::digest(cfg.to_flat_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        check(self.data.size > 0, "data.size", "must be > 0")?;
        let w = &self.world;
        check(w.num_objects >= 3, "world.num_objects", "need at least 3 objects")?;
        check(w.object_width > 0.0, "world.object_width", "must be > 0")?;
        check(w.slots >= 2, "world.slots", "need at least 2 slots")?;
        check(
            w.bias_ratio > 0.0 && w.bias_ratio < 1.0,
            "world.bias_ratio",
            "must lie in (0, 1)",
        )?;
        check(w.attribute_bins >= 2, "world.attribute_bins", "need at least 2 bins")?;
        check(
            w.heldout_styles > 0 && w.heldout_styles < w.portrait_styles,
            "world.heldout_styles",
            "must be a proper nonempty subset of the styles",
        )?;
        check(
            w.heldout_prompts > 0 && w.heldout_prompts < w.preference_prompts,
            "world.heldout_prompts",
            "must be a proper nonempty subset of the prompts",
        )?;
        check(
            w.train_fraction > 0.0 && w.train_fraction < 1.0,
            "world.train_fraction",
            "must lie in (0, 1)",
        )?;
        check(
            !self.model.hidden.is_empty() && self.model.hidden.iter().all(|&h| h > 0),
            "model.hidden",
            "need at least one nonzero layer",
        )?;
        self.noise_schedule()?;
        let s = &self.sampler;
        check(
            s.inference_steps >= 1 && s.inference_steps <= self.schedule.steps,
            "sampler.inference_steps",
            format!("must lie in 1..={}", self.schedule.steps),
        )?;
        check((0.0..=1.0).contains(&s.eta), "sampler.eta", "must lie in [0, 1]")?;
        check(s.guidance_scale >= 0.0, "sampler.guidance_scale", "must be >= 0")?;
        check(
            self.rewards.preference_tau > 0.0,
            "rewards.preference_tau",
            "must be > 0",
        )?;
        check(
            self.rewards.parity_minibatch >= w.attribute_bins,
            "rewards.parity_minibatch",
            "must be at least world.attribute_bins",
        )?;
        let p = &self.pretrain;
        check(p.batch_size > 0, "pretrain.batch_size", "must be > 0")?;
        check(p.lr >= 0.0, "pretrain.lr", "must be >= 0")?;
        check(
            (0.0..1.0).contains(&p.context_dropout),
            "pretrain.context_dropout",
            "must lie in [0, 1)",
        )?;
        check(p.max_grad_norm > 0.0, "pretrain.max_grad_norm", "must be > 0")?;
        let a = &self.adamw;
        check((0.0..1.0).contains(&a.beta1), "adamw.beta1", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&a.beta2), "adamw.beta2", "must lie in [0, 1)")?;
        check(a.eps > 0.0, "adamw.eps", "must be > 0")?;
        check(a.weight_decay >= 0.0, "adamw.weight_decay", "must be >= 0")?;
        let method = self.method()?;
        self.task_kinds()?;
        let r = &self.rl;
        check(r.clip_epsilon > 0.0, "rl.clip_epsilon", "must be > 0")?;
        check(
            r.timesteps_per_iteration >= 1 && r.timesteps_per_iteration <= s.inference_steps,
            "rl.timesteps_per_iteration",
            format!("must lie in 1..={}", s.inference_steps),
        )?;
        check(r.beta_pretrain >= 0.0, "rl.beta_pretrain", "must be >= 0")?;
        check(r.lr >= 0.0, "rl.lr", "must be >= 0")?;
        check(r.prompts_per_iteration > 0, "rl.prompts_per_iteration", "must be > 0")?;
        check(r.samples_per_prompt > 0, "rl.samples_per_prompt", "must be > 0")?;
        check(r.max_grad_norm > 0.0, "rl.max_grad_norm", "must be > 0")?;
        if method == Method::Rl {
            check(s.eta > 0.0, "sampler.eta", "RL fine-tuning needs eta > 0")?;
        }
        let b = &self.baseline;
        check(b.rw_beta > 0.0, "baseline.rw_beta", "must be > 0")?;
        check(
            b.raft_accept >= 1 && b.raft_accept <= b.raft_k,
            "baseline.raft_accept",
            "must lie in 1..=baseline.raft_k",
        )?;
        check(b.lr >= 0.0, "baseline.lr", "must be >= 0")?;
        check(
            b.prompts_per_iteration > 0,
            "baseline.prompts_per_iteration",
            "must be > 0",
        )?;
        check(b.samples_per_prompt > 0, "baseline.samples_per_prompt", "must be > 0")?;
        check(b.max_grad_norm > 0.0, "baseline.max_grad_norm", "must be > 0")?;
        let e = &self.eval;
        check(e.samples_per_prompt > 0, "eval.samples_per_prompt", "must be > 0")?;
        check(e.prompts > 0, "eval.prompts", "must be > 0")?;
        check(e.heldout_data_size > 0, "eval.heldout_data_size", "must be > 0")?;
        Ok(())
    }

    pub fn method(&self) -> Result<Method> {
        match self.finetune.method.as_str() {
            "rl" => Ok(Method::Rl),
            m => BaselineMethod::parse(m)
                .map(Method::Baseline)
                .ok_or_else(|| Error::config("finetune.method", format!("unknown method `{m}`"))),
        }
    }

    pub fn task_kinds(&self) -> Result<Vec<TaskKind>> {
        let mut out = Vec::new();
        for name in &self.finetune.tasks {
            let k = TaskKind::parse(name)
                .ok_or_else(|| Error::config("finetune.tasks", format!("unknown task `{name}`")))?;
            if out.contains(&k) {
                return Err(Error::config("finetune.tasks", format!("duplicate task `{name}`")));
            }
            out.push(k);
        }
        check(!out.is_empty(), "finetune.tasks", "at least one task is required")?;
        if matches!(self.method()?, Method::Baseline(_)) {
            check(out.len() == 1, "finetune.tasks", "baselines take exactly one task")?;
            check(
                out[0] != TaskKind::Portrait,
                "finetune.tasks",
                "baselines need a per-sample reward",
            )?;
        }
        Ok(out)
    }

    pub fn task_bindings(&self) -> Result<Vec<TaskBinding>> {
        Ok(self
            .task_kinds()?
            .into_iter()
            .map(|k| TaskBinding::for_kind(k, &self.rewards))
            .collect())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        NoiseSchedule::linear(s.steps, s.beta_min, s.beta_max).map_err(|e| Error::config("schedule", e.to_string()))
    }

    pub fn build_world(&self) -> Result<World> {
        World::new(self.world.clone(), &mut stream_rng(self.data.seed, STREAM_WORLD))
            .map_err(|e| Error::config("world", e.to_string()))
    }

    pub fn env(&self) -> Result<Env> {
        Ok(Env {
            world: self.build_world()?,
            schedule: self.noise_schedule()?,
            sampler: self.sampler.clone(),
            rewards: self.rewards.clone(),
        })
    }

    pub fn dataset(&self, world: &World) -> Result<Vec<SceneSample>> {
        gen_pretrain_dataset(
            world,
            &DatasetSpec { size: self.data.size },
            &mut stream_rng(self.data.seed, STREAM_DATA),
        )
    }

    pub fn mlp_config(&self, world: &World) -> MlpConfig {
        MlpConfig {
            sample_dim: world.sample_dim(),
            context_dim: world.layout.dim(),
            hidden: self.model.hidden.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_is_documented() {
        let keys: Vec<String> = RunConfig::default().flat().into_keys().collect();
        let mut documented: Vec<String> = KEY_DOCS.iter().map(|(k, _)| k.to_string()).collect();
        documented.sort();
        assert_eq!(keys, documented);
    }

    #[test]
    fn overrides_apply_after_the_document_and_in_order() {
        let doc = "[rl]\nlr = 0.5\n";
        let sets = [
            "rl.lr=0.25".to_string(),
            "seed=3".into(),
            "seed = 4".into(),
            "finetune.method=raft".into(),
        ];
        let c = RunConfig::from_layers(doc, &sets).unwrap();
        assert_eq!(c.rl.lr, 0.25);
        assert_eq!(c.seed, 4);
        assert_eq!(c.finetune.method, "raft");
        assert!(
            matches!(RunConfig::from_layers("", &["seed".into()]), Err(Error::Config { key, .. }) if key == "seed")
        );
        assert!(matches!(
            RunConfig::from_layers("a = \n", &[]),
            Err(Error::Config { message, .. }) if message.starts_with("line 1")
        ));
    }

    #[test]
    fn hash_ignores_out_but_not_settings() {
        let a = RunConfig::default();
        let b = RunConfig::from_toml_str("out = \"elsewhere\"").unwrap();
        let c = RunConfig::from_toml_str("seed = 1").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn dotted_keys_override_defaults() {
        let c = RunConfig::from_toml_str("rl.clip_epsilon = 1e-4\nseed = 3\nmodel.hidden = [8]\npretrain.lr = 1\n")
            .unwrap();
        assert_eq!(c.rl.clip_epsilon, 1e-4);
        assert_eq!(c.seed, 3);
        assert_eq!(c.model.hidden, vec![8]);
        assert_eq!(c.pretrain.lr, 1.0);
        assert_eq!(c.sampler, SamplerConfig::default());
        let t = RunConfig::from_toml_str("[rl]\nclip_epsilon = 1e-4\n").unwrap();
        assert_eq!(t.rl.clip_epsilon, 1e-4);
    }

    #[test]
    fn unknown_and_mistyped_keys_name_the_key() {
        let e = RunConfig::from_toml_str("rl.clip = 0.1").unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "rl.clip"), "{e}");
        let e = RunConfig::from_toml_str("rl.iterations = \"many\"").unwrap_err();
        assert!(
            matches!(e, Error::Config { ref key, .. } if key == "rl.iterations"),
            "{e}"
        );
        let e = RunConfig::from_toml_str("rl.clip_epsilon = 0").unwrap_err();
        assert!(
            matches!(e, Error::Config { ref key, .. } if key == "rl.clip_epsilon"),
            "{e}"
        );
        let e = RunConfig::from_toml_str("finetune.tasks = [\"painting\"]").unwrap_err();
        assert!(
            matches!(e, Error::Config { ref key, .. } if key == "finetune.tasks"),
            "{e}"
        );
        let e = RunConfig::from_toml_str("rl.timesteps_per_iteration = 51").unwrap_err();
        assert!(
            matches!(e, Error::Config { ref key, .. } if key == "rl.timesteps_per_iteration"),
            "{e}"
        );
    }

    #[test]
    fn resolved_document_round_trips() {
        let c = RunConfig::from_toml_str("rl.lr = 3e-4\nfinetune.tasks = [\"composition\", \"fairness\"]").unwrap();
        let text = c.to_flat_toml();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_flat_toml(), text);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(RunConfig::default().hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn baselines_take_one_scalar_task() {
        assert!(RunConfig::from_toml_str("finetune.method = \"raft\"").is_ok());
        assert!(RunConfig::from_toml_str("finetune.method = \"raft\"\nfinetune.tasks = [\"fairness\"]").is_err());
        assert!(RunConfig::from_toml_str("finetune.method = \"sgd\"").is_err());
    }

    #[test]
    fn world_and_data_follow_the_data_seed() {
        let c = RunConfig {
            data: DataConfig { size: 30, seed: 4 },
            ..RunConfig::default()
        };
        let w = c.build_world().unwrap();
        assert_eq!(w, c.build_world().unwrap());
        assert_eq!(c.dataset(&w).unwrap(), c.dataset(&w).unwrap());
        let other = RunConfig { seed: 99, ..c.clone() };
        assert_eq!(other.build_world().unwrap(), w);
    }
}
