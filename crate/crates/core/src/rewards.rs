//! Scalar and minibatch-level rewards, and advantage normalization.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::{classify_attribute, detect, AttributeSpec, Context, TaskKind, World};

/// Guard inside the advantage square root.
pub const ADVANTAGE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    /// Kernel width τ of the preference proxy.
    pub preference_tau: f64,
    /// Offset δ added to slot 0 of the pretraining mean to form the preference target.
    pub preference_offset: [f64; 2],
    /// Samples per prompt in a distributional minibatch.
    pub parity_minibatch: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            preference_tau: 0.5,
            preference_offset: [0.75, 0.75],
            parity_minibatch: 16,
        }
    }
}

fn expect_kind(ctx: &Context, kind: TaskKind) -> Result<()> {
    if ctx.kind() != kind {
        return Err(Error::TaskKind {
            expected: kind.name(),
            got: ctx.kind().name(),
        });
    }
    Ok(())
}

pub fn preference_target(world: &World, prompt: usize, cfg: &RewardConfig) -> Vec<f64> {
    let mut t = world.preference_mean(prompt);
    t[0] += cfg.preference_offset[0];
    t[1] += cfg.preference_offset[1];
    t
}

/// `exp(-|x0 - target(c)|^2 / (2 τ^2))`.
pub fn preference_reward(world: &World, x0: &[f64], ctx: &Context, cfg: &RewardConfig) -> Result<f64> {
    expect_kind(ctx, TaskKind::Preference)?;
    let Context::Preference { prompt } = *ctx else {
        unreachable!()
    };
    let target = preference_target(world, prompt, cfg);
    if target.len() != x0.len() {
        return Err(Error::shape("preference_reward", &[target.len()], &[x0.len()]));
    }
    let d2: f64 = x0.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((-d2 / (2.0 * cfg.preference_tau * cfg.preference_tau)).exp())
}

/// Mean detector confidence over the prompt's two objects.
pub fn composition_reward(world: &World, x0: &[f64], ctx: &Context) -> Result<f64> {
    expect_kind(ctx, TaskKind::Composition)?;
    let Context::Composition { a, b, .. } = *ctx else {
        unreachable!()
    };
    Ok(0.5 * (detect(world.object(a), x0) + detect(world.object(b), x0)))
}

/// L2 distance between the label histogram and the uniform distribution over `bins`.
pub fn statistical_parity(labels: &[usize], bins: usize) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument(
            "statistical parity of an empty label list".into(),
        ));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("zero attribute bins".into()));
    }
    let mut counts = vec![0usize; bins];
    for &l in labels {
        if l >= bins {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {bins} bins"
            )));
        }
        counts[l] += 1;
    }
    let n = labels.len() as f64;
    let u = 1.0 / bins as f64;
    Ok(counts
        .iter()
        .map(|&c| {
            let d = c as f64 / n - u;
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

/// Negated parity of the minibatch, broadcast to every member.
pub fn diversity_reward<S: AsRef<[f64]>>(minibatch: &[S], attributes: &AttributeSpec) -> Result<Vec<f64>> {
    if minibatch.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "diversity reward needs a minibatch of at least 2, got {}",
            minibatch.len()
        )));
    }
    let labels: Vec<usize> = minibatch
        .iter()
        .map(|x| classify_attribute(x.as_ref(), attributes))
        .collect();
    let r = -statistical_parity(&labels, attributes.bins())?;
    Ok(vec![r; minibatch.len()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    PerBatch,
    PerPrompt,
}

impl NormalizationMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "per_batch" => Some(Self::PerBatch),
            "per_prompt" => Some(Self::PerPrompt),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::PerBatch => "per_batch",
            Self::PerPrompt => "per_prompt",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageBatch {
    pub advantages: Vec<f64>,
    /// Batch statistics in per-batch mode; the mean over samples of the
    /// per-prompt statistics in per-prompt mode.
    pub mean: f64,
    pub std: f64,
    pub mode: NormalizationMode,
}

/// Welford accumulator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Welford {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn population_variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0)
        }
    }
}

/// Per-prompt streaming statistics keyed by [`Context::key`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunningStats {
    pub table: BTreeMap<String, Welford>,
}

impl RunningStats {
    pub fn get(&self, key: &str) -> Option<&Welford> {
        self.table.get(key)
    }
}

fn standardize(r: f64, mean: f64, var: f64) -> f64 {
    (r - mean) / (var + ADVANTAGE_EPS).sqrt()
}

/// `Â = (r - μ) / sqrt(σ² + 1e-8)` with population variance.
///
/// Per-prompt mode pushes every reward into `stats` (in order) before
/// normalizing; a prompt with fewer than two observations yields 0.
pub fn normalize_advantages(
    rewards: &[f64],
    keys: &[String],
    mode: NormalizationMode,
    stats: &mut RunningStats,
) -> Result<AdvantageBatch> {
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!("reward {i} is {}", rewards[i])));
    }
    match mode {
        NormalizationMode::PerBatch => {
            if rewards.len() < 2 {
                return Err(Error::InvalidArgument(format!(
                    "per-batch normalization needs >= 2 rewards, got {}",
                    rewards.len()
                )));
            }
            let n = rewards.len() as f64;
            let mean = rewards.iter().sum::<f64>() / n;
            let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
            Ok(AdvantageBatch {
                advantages: rewards.iter().map(|&r| standardize(r, mean, var)).collect(),
                mean,
                std: var.sqrt(),
                mode,
            })
        }
        NormalizationMode::PerPrompt => {
            if keys.len() != rewards.len() {
                return Err(Error::shape("normalize_advantages", &[rewards.len()], &[keys.len()]));
            }
            for (k, &r) in keys.iter().zip(rewards) {
                stats.table.entry(k.clone()).or_default().push(r);
            }
            let mut advantages = Vec::with_capacity(rewards.len());
            let (mut ms, mut ss) = (0.0, 0.0);
            for (k, &r) in keys.iter().zip(rewards) {
                let w = stats.table[k];
                let var = w.population_variance();
                ms += w.mean;
                ss += var.sqrt();
                advantages.push(if w.count < 2 { 0.0 } else { standardize(r, w.mean, var) });
            }
            let n = rewards.len().max(1) as f64;
            Ok(AdvantageBatch {
                advantages,
                mean: ms / n,
                std: ss / n,
                mode,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::WorldSpec;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world() -> World {
        World::new(WorldSpec::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn batch(rewards: &[f64]) -> AdvantageBatch {
        normalize_advantages(rewards, &[], NormalizationMode::PerBatch, &mut RunningStats::default()).unwrap()
    }

    #[test]
    fn preference_kernel() {
        let w = world();
        let cfg = RewardConfig::default();
        let ctx = Context::Preference { prompt: 5 };
        let t = preference_target(&w, 5, &cfg);
        assert_eq!(preference_reward(&w, &t, &ctx, &cfg).unwrap(), 1.0);
        let mut x = t.clone();
        x[3] += 0.5;
        assert!((preference_reward(&w, &x, &ctx, &cfg).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        let mut y = t.clone();
        y[0] -= 0.3;
        y[1] += 0.4;
        assert!((preference_reward(&w, &y, &ctx, &cfg).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        assert!(matches!(
            preference_reward(&w, &x, &Context::Portrait { style: 0 }, &cfg),
            Err(Error::TaskKind { .. })
        ));
    }

    #[test]
    fn composition_examples() {
        let w = world();
        let ctx = Context::Composition {
            a: 2,
            b: 7,
            relation: 0,
        };
        let (ca, cb) = (w.object(2).center, w.object(7).center);
        assert_eq!(
            composition_reward(&w, &[ca[0], ca[1], cb[0], cb[1]], &ctx).unwrap(),
            1.0
        );
        let s = w.object(7).width;
        let x = [ca[0], ca[1], cb[0] + s, cb[1]];
        let want = (1.0 + (-0.5f64).exp()) / 2.0;
        assert!((composition_reward(&w, &x, &ctx).unwrap() - want).abs() < 1e-12);
        assert!(composition_reward(&w, &x, &Context::Preference { prompt: 0 }).is_err());
    }

    #[test]
    fn parity_examples() {
        assert_eq!(statistical_parity(&[0, 1, 2, 3], 4).unwrap(), 0.0);
        assert!((statistical_parity(&[2; 9], 4).unwrap() - 0.75f64.sqrt()).abs() < 1e-15);
        assert!((statistical_parity(&[0, 0, 0, 1], 4).unwrap() - 0.375f64.sqrt()).abs() < 1e-15);
        assert!(statistical_parity(&[], 4).is_err());
        assert!(statistical_parity(&[4], 4).is_err());
    }

    #[test]
    fn diversity_examples() {
        let w = world();
        let c = w.attributes.centers().to_vec();
        let uniform: Vec<Vec<f64>> = c.iter().map(|&v| vec![v, 0.0, 0.0, 0.0]).collect();
        assert_eq!(diversity_reward(&uniform, &w.attributes).unwrap(), vec![0.0; 4]);
        let same = vec![vec![c[1], 0.0, 0.0, 0.0]; 16];
        for r in diversity_reward(&same, &w.attributes).unwrap() {
            assert!((r + 0.75f64.sqrt()).abs() < 1e-15);
        }
        assert!(diversity_reward(&same[..1], &w.attributes).is_err());
    }

    #[test]
    fn advantage_examples() {
        let a = batch(&[1.0, 2.0, 3.0]);
        let s = (2.0f64 / 3.0 + 1e-8).sqrt();
        assert!((a.advantages[0] + 1.0 / s).abs() < 1e-12);
        assert_eq!(a.advantages[1], 0.0);
        assert!((a.advantages[2] - 1.0 / s).abs() < 1e-12);
        assert!((a.advantages[2] - 1.224745).abs() < 1e-6);
        assert_eq!(batch(&[5.0, 5.0, 5.0]).advantages, vec![0.0; 3]);
        assert!(normalize_advantages(&[1.0], &[], NormalizationMode::PerBatch, &mut RunningStats::default()).is_err());
    }

    #[test]
    fn per_prompt_streaming() {
        let mut stats = RunningStats::default();
        let key = vec![Context::Preference { prompt: 3 }.key()];
        let first = normalize_advantages(&[0.0], &key, NormalizationMode::PerPrompt, &mut stats).unwrap();
        assert_eq!(first.advantages, vec![0.0]);
        let second = normalize_advantages(&[2.0], &key, NormalizationMode::PerPrompt, &mut stats).unwrap();
        assert!((second.advantages[0] - 1.0 / (1.0f64 + 1e-8).sqrt()).abs() < 1e-15);
        let w = stats.get(&key[0]).unwrap();
        assert_eq!((w.count, w.mean, w.population_variance()), (2, 1.0, 1.0));
    }

    fn brute_parity(labels: &[usize], bins: usize) -> f64 {
        let mut s = 0.0;
        for a in 0..bins {
            let p = labels.iter().filter(|&&l| l == a).count() as f64 / labels.len() as f64;
            s += (p - 1.0 / bins as f64).powi(2);
        }
        s.sqrt()
    }

    proptest! {
        #[test]
        fn parity_matches_brute_force(labels in prop::collection::vec(0usize..4, 1..200)) {
            let p = statistical_parity(&labels, 4).unwrap();
            prop_assert!((p - brute_parity(&labels, 4)).abs() < 1e-12);
            prop_assert!(p <= 0.75f64.sqrt() + 1e-15);
        }

        #[test]
        fn parity_relabel_and_duplicate_invariant(
            labels in prop::collection::vec(0usize..4, 1..100),
            perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
            k in 1usize..4,
        ) {
            let p = statistical_parity(&labels, 4).unwrap();
            let relabeled: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
            prop_assert!((statistical_parity(&relabeled, 4).unwrap() - p).abs() < 1e-12);
            let dup: Vec<usize> = labels.iter().cycle().take(labels.len() * k).copied().collect();
            prop_assert!((statistical_parity(&dup, 4).unwrap() - p).abs() < 1e-12);
        }

        #[test]
        fn parity_zero_iff_uniform(counts in prop::collection::vec(0usize..6, 4)) {
            prop_assume!(counts.iter().sum::<usize>() > 0);
            let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(a, &c)| std::iter::repeat_n(a, c)).collect();
            let p = statistical_parity(&labels, 4).unwrap();
            let uniform = counts.iter().all(|&c| c == counts[0]);
            prop_assert_eq!(p == 0.0, uniform);
        }

        #[test]
        fn per_batch_advantages_standardized(rewards in prop::collection::vec(-10.0f64..10.0, 2..64)) {
            let a = batch(&rewards);
            let n = rewards.len() as f64;
            let m = a.advantages.iter().sum::<f64>() / n;
            prop_assert!(m.abs() < 1e-9);
            if a.std > 1e-3 {
                let sd = (a.advantages.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
                prop_assert!((sd - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn per_batch_advantages_shift_and_scale_invariant(
            rewards in prop::collection::vec(-5.0f64..5.0, 2..32),
            c in -100.0f64..100.0,
            k in 0.5f64..20.0,
        ) {
            let base = batch(&rewards);
            prop_assume!(base.std > 1e-2);
            let shifted = batch(&rewards.iter().map(|r| r + c).collect::<Vec<_>>());
            let scaled = batch(&rewards.iter().map(|r| r * k).collect::<Vec<_>>());
            for i in 0..rewards.len() {
                prop_assert!((shifted.advantages[i] - base.advantages[i]).abs() < 1e-9);
                prop_assert!((scaled.advantages[i] - base.advantages[i]).abs() < 1e-6);
            }
        }

        #[test]
        fn diversity_is_permutation_invariant(
            xs in prop::collection::vec(-2.0f64..2.0, 2..40),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let w = world();
            let mb: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x, 0.0, 0.0, 0.0]).collect();
            let r = diversity_reward(&mb, &w.attributes).unwrap();
            let mut shuffled = mb.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(diversity_reward(&shuffled, &w.attributes).unwrap(), r.clone());
            prop_assert!(r.iter().all(|&v| v == r[0]));
        }
    }
}
