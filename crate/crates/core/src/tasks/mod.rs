//! Synthetic task domains standing in for text-to-image prompts.
//!
//! Samples live in `R^(2m)`: `m` object slots of two coordinates each.
//! Three prompt families share one model:
//!
//! * composition: "object a <relation> object b", scored by an analytic
//!   detector that looks for each named object near its class center;
//! * portrait: attribute-agnostic prompts whose pretraining data is biased
//!   toward one attribute bin along the first coordinate of slot 0;
//! * preference: prompts with a per-prompt mean scene, scored by a smooth
//!   kernel around a shifted target.

mod data;

pub use data::{gen_pretrain_dataset, read_dataset, sidecar_path, write_dataset, DatasetSpec};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of interchangeable relation words in composition prompts.
pub const NUM_RELATIONS: usize = 5;

/// y-coordinate of slot 0 in portrait scenes.
pub const PORTRAIT_SLOT0_Y: f64 = -1.0;
/// Center of slot 1 in portrait scenes.
pub const PORTRAIT_SLOT1: [f64; 2] = [0.0, 1.0];
/// Radius of the circle that carries the preference prompt means.
pub const PREFERENCE_RADIUS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Composition,
    Portrait,
    Preference,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Preference, TaskKind::Composition, TaskKind::Portrait];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Composition => "composition",
            TaskKind::Portrait => "portrait",
            TaskKind::Preference => "preference",
        }
    }

    fn index(self) -> usize {
        match self {
            TaskKind::Composition => 0,
            TaskKind::Portrait => 1,
            TaskKind::Preference => 2,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "composition" => Some(TaskKind::Composition),
            "portrait" | "fairness" => Some(TaskKind::Portrait),
            "preference" => Some(TaskKind::Preference),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectClass {
    pub id: usize,
    pub center: [f64; 2],
    pub width: f64,
}

/// A prompt `c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Context {
    Composition { a: usize, b: usize, relation: usize },
    Portrait { style: usize },
    Preference { prompt: usize },
}

impl Context {
    pub fn kind(&self) -> TaskKind {
        match self {
            Context::Composition { .. } => TaskKind::Composition,
            Context::Portrait { .. } => TaskKind::Portrait,
            Context::Preference { .. } => TaskKind::Preference,
        }
    }

    /// Payload one-hot encoding. Composition prompts encode
    /// `[onehot(a) | onehot(b) | onehot(relation)]`.
    pub fn embedding(&self, layout: &ContextLayout) -> Vec<f64> {
        match *self {
            Context::Composition { a, b, relation } => {
                let n = layout.num_objects;
                let mut v = vec![0.0; 2 * n + NUM_RELATIONS];
                v[a] = 1.0;
                v[n + b] = 1.0;
                v[2 * n + relation] = 1.0;
                v
            }
            Context::Portrait { style } => {
                let mut v = vec![0.0; layout.portrait_styles];
                v[style] = 1.0;
                v
            }
            Context::Preference { prompt } => {
                let mut v = vec![0.0; layout.preference_prompts];
                v[prompt] = 1.0;
                v
            }
        }
    }

    /// Stable key for per-prompt statistics.
    pub fn key(&self) -> String {
        match *self {
            Context::Composition { a, b, relation } => format!("composition:{a}:{b}:{relation}"),
            Context::Portrait { style } => format!("portrait:{style}"),
            Context::Preference { prompt } => format!("preference:{prompt}"),
        }
    }

    /// Four floats used by the dataset container: kind, then payload ids.
    pub(crate) fn to_fields(self) -> [f64; 4] {
        match self {
            Context::Composition { a, b, relation } => [0.0, a as f64, b as f64, relation as f64],
            Context::Portrait { style } => [1.0, style as f64, 0.0, 0.0],
            Context::Preference { prompt } => [2.0, prompt as f64, 0.0, 0.0],
        }
    }

    pub(crate) fn from_fields(f: &[f64]) -> Option<Self> {
        let id = |x: f64| (x >= 0.0 && x.fract() == 0.0).then_some(x as usize);
        match f[0] as i64 {
            0 => Some(Context::Composition {
                a: id(f[1])?,
                b: id(f[2])?,
                relation: id(f[3])?,
            }),
            1 => Some(Context::Portrait { style: id(f[1])? }),
            2 => Some(Context::Preference { prompt: id(f[1])? }),
            _ => None,
        }
    }
}

/// Layout of the model's context input:
/// `[kind one-hot (3) | composition (2n+5) | portrait styles | preference prompts]`.
/// The null context is all zeros.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextLayout {
    pub num_objects: usize,
    pub portrait_styles: usize,
    pub preference_prompts: usize,
}

impl ContextLayout {
    pub fn dim(&self) -> usize {
        3 + 2 * self.num_objects + NUM_RELATIONS + self.portrait_styles + self.preference_prompts
    }

    fn block_offset(&self, kind: TaskKind) -> usize {
        let comp = 2 * self.num_objects + NUM_RELATIONS;
        match kind {
            TaskKind::Composition => 3,
            TaskKind::Portrait => 3 + comp,
            TaskKind::Preference => 3 + comp + self.portrait_styles,
        }
    }

    pub fn encode(&self, ctx: &Context) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        v[ctx.kind().index()] = 1.0;
        let off = self.block_offset(ctx.kind());
        for (i, x) in ctx.embedding(self).into_iter().enumerate() {
            v[off + i] = x;
        }
        v
    }

    pub fn null(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }
}

/// Attribute bins along one coordinate, with nearest-center classification.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeSpec {
    centers: Vec<f64>,
}

impl AttributeSpec {
    pub fn new(centers: Vec<f64>) -> Result<Self> {
        if centers.len() < 2 {
            return Err(Error::InvalidArgument("need at least two attribute bins".into()));
        }
        if centers.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument(
                "attribute centers must be strictly increasing".into(),
            ));
        }
        Ok(Self { centers })
    }

    /// `bins` centers spaced one unit apart, symmetric around zero.
    pub fn evenly_spaced(bins: usize) -> Result<Self> {
        let mid = (bins as f64 - 1.0) / 2.0;
        Self::new((0..bins).map(|i| i as f64 - mid).collect())
    }

    pub fn bins(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }
}

/// A generated (or dataset) sample `x_0` with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub x0: Vec<f64>,
    pub context: Context,
    /// Generating attribute bin for portrait data.
    pub attribute: Option<usize>,
}

/// Geometry and vocabulary sizes of the synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub num_objects: usize,
    pub object_radius: f64,
    pub object_width: f64,
    pub slots: usize,
    pub jitter: f64,
    pub attribute_bins: usize,
    pub bias_ratio: f64,
    pub portrait_styles: usize,
    pub heldout_styles: usize,
    pub preference_prompts: usize,
    pub heldout_prompts: usize,
    pub train_fraction: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            num_objects: 10,
            object_radius: 1.5,
            object_width: 0.05,
            slots: 2,
            jitter: 0.1,
            attribute_bins: 4,
            bias_ratio: 0.85,
            portrait_styles: 24,
            heldout_styles: 8,
            preference_prompts: 24,
            heldout_prompts: 8,
            train_fraction: 0.8,
        }
    }
}

/// Instantiated world: object classes, attribute bins and the object split.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub objects: Vec<ObjectClass>,
    pub attributes: AttributeSpec,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    pub layout: ContextLayout,
}

impl World {
    pub fn new(spec: WorldSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.slots < 2 {
            return Err(Error::InvalidArgument("at least two object slots are required".into()));
        }
        if spec.heldout_styles == 0 || spec.heldout_styles >= spec.portrait_styles {
            return Err(Error::InvalidArgument(
                "held-out portrait styles must be a proper nonempty subset".into(),
            ));
        }
        if spec.heldout_prompts == 0 || spec.heldout_prompts >= spec.preference_prompts {
            return Err(Error::InvalidArgument(
                "held-out preference prompts must be a proper nonempty subset".into(),
            ));
        }
        if !(spec.bias_ratio > 0.0 && spec.bias_ratio < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "bias ratio {} outside (0,1)",
                spec.bias_ratio
            )));
        }
        let objects = object_circle(spec.num_objects, spec.object_radius, spec.object_width)?;
        let (seen, unseen) = split_objects(&objects, spec.train_fraction, rng)?;
        let attributes = AttributeSpec::evenly_spaced(spec.attribute_bins)?;
        let layout = ContextLayout {
            num_objects: spec.num_objects,
            portrait_styles: spec.portrait_styles,
            preference_prompts: spec.preference_prompts,
        };
        Ok(Self {
            spec,
            objects,
            attributes,
            seen,
            unseen,
            layout,
        })
    }

    pub fn sample_dim(&self) -> usize {
        2 * self.spec.slots
    }

    pub fn object(&self, id: usize) -> &ObjectClass {
        &self.objects[id]
    }

    /// Mean pretraining scene for a preference prompt.
    pub fn preference_mean(&self, prompt: usize) -> Vec<f64> {
        let angle = 2.0 * std::f64::consts::PI * prompt as f64 / self.spec.preference_prompts as f64;
        let mut m = vec![0.0; self.sample_dim()];
        m[0] = PREFERENCE_RADIUS * angle.cos();
        m[1] = PREFERENCE_RADIUS * angle.sin();
        m[2] = -m[0];
        m[3] = -m[1];
        m
    }

    pub fn train_styles(&self) -> std::ops::Range<usize> {
        0..self.spec.portrait_styles - self.spec.heldout_styles
    }

    pub fn heldout_styles(&self) -> std::ops::Range<usize> {
        self.spec.portrait_styles - self.spec.heldout_styles..self.spec.portrait_styles
    }

    pub fn train_prompts(&self) -> std::ops::Range<usize> {
        0..self.spec.preference_prompts - self.spec.heldout_prompts
    }

    pub fn heldout_prompts(&self) -> std::ops::Range<usize> {
        self.spec.preference_prompts - self.spec.heldout_prompts..self.spec.preference_prompts
    }
}

fn object_circle(n: usize, radius: f64, width: f64) -> Result<Vec<ObjectClass>> {
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two object classes".into()));
    }
    if !(width > 0.0) {
        return Err(Error::InvalidArgument(format!("object width {width} must be positive")));
    }
    Ok((0..n)
        .map(|id| {
            let a = 2.0 * std::f64::consts::PI * id as f64 / n as f64;
            ObjectClass {
                id,
                center: [radius * a.cos(), radius * a.sin()],
                width,
            }
        })
        .collect())
}

/// Which part of a prompt family to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptSplit {
    /// Training prompts (seen objects, training style/prompt ids).
    Train,
    /// Held-out prompts (unseen objects, held-out style/prompt ids).
    Heldout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub split: PromptSplit,
}

/// Slot-wise Gaussian detector response for one object class:
/// `max_slot exp(-|slot - center|^2 / (2 width^2))`.
pub fn detect(object: &ObjectClass, x0: &[f64]) -> f64 {
    let inv = 1.0 / (2.0 * object.width * object.width);
    x0.chunks_exact(2)
        .map(|s| {
            let dx = s[0] - object.center[0];
            let dy = s[1] - object.center[1];
            (-(dx * dx + dy * dy) * inv).exp()
        })
        .fold(0.0, f64::max)
}

/// Nearest bin center to the attribute coordinate (first coordinate of
/// slot 0); ties go to the lower index.
pub fn classify_attribute(x0: &[f64], attributes: &AttributeSpec) -> usize {
    let v = x0[0];
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &c) in attributes.centers.iter().enumerate() {
        let d = (v - c).abs();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Seed-deterministic partition of class ids into `(seen, unseen)`, both sorted.
pub fn split_objects(
    classes: &[ObjectClass],
    train_fraction: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if classes.len() < 2 || !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} classes with fraction {train_fraction}",
            classes.len()
        )));
    }
    let n_seen = (train_fraction * classes.len() as f64).round() as usize;
    if n_seen == 0 || n_seen >= classes.len() {
        return Err(Error::InvalidArgument(format!(
            "split of {} classes at {train_fraction} leaves an empty side",
            classes.len()
        )));
    }
    let mut ids: Vec<usize> = classes.iter().map(|c| c.id).collect();
    ids.shuffle(rng);
    let mut seen = ids[..n_seen].to_vec();
    let mut unseen = ids[n_seen..].to_vec();
    seen.sort_unstable();
    unseen.sort_unstable();
    Ok((seen, unseen))
}

/// Draws a prompt `c ~ p(c)` for a task.
pub fn make_prompt(world: &World, task: TaskSpec, rng: &mut impl Rng) -> Context {
    match task.kind {
        TaskKind::Composition => {
            let pool = match task.split {
                PromptSplit::Train => &world.seen,
                PromptSplit::Heldout => &world.unseen,
            };
            let a = pool[rng.random_range(0..pool.len())];
            let b = if pool.len() < 2 {
                a
            } else {
                loop {
                    let b = pool[rng.random_range(0..pool.len())];
                    if b != a {
                        break b;
                    }
                }
            };
            Context::Composition {
                a,
                b,
                relation: rng.random_range(0..NUM_RELATIONS),
            }
        }
        TaskKind::Portrait => {
            let r = match task.split {
                PromptSplit::Train => world.train_styles(),
                PromptSplit::Heldout => world.heldout_styles(),
            };
            Context::Portrait {
                style: rng.random_range(r),
            }
        }
        TaskKind::Preference => {
            let r = match task.split {
                PromptSplit::Train => world.train_prompts(),
                PromptSplit::Heldout => world.heldout_prompts(),
            };
            Context::Preference {
                prompt: rng.random_range(r),
            }
        }
    }
}
