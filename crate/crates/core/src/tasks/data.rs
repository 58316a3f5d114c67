use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Context, SceneSample, World, NUM_RELATIONS, PORTRAIT_SLOT0_Y, PORTRAIT_SLOT1};
use crate::binio::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};

const DATASET_MAGIC: &[u8; 4] = b"DFDS";
const DATASET_VERSION: u32 = 1;
const CONTEXT_FIELDS: u32 = 4;
const DATA_BOX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Total number of samples; task families are interleaved round-robin.
    pub size: usize,
}

/// Pretraining corpus covering every prompt id and every object class.
///
/// Composition scenes put slot 0 at `a`'s center and slot 1 at `b`'s;
/// portrait scenes place slot 0's first coordinate at attribute bin 0 with
/// probability `bias_ratio` and at a uniformly chosen other bin otherwise;
/// preference scenes jitter around the prompt's mean. All coordinates get
/// `N(0, jitter^2)` noise and are clipped to `[-2, 2]`.
pub fn gen_pretrain_dataset(world: &World, spec: &DatasetSpec, rng: &mut impl Rng) -> Result<Vec<SceneSample>> {
    let ws = &world.spec;
    if !(ws.bias_ratio > 0.0 && ws.bias_ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "bias ratio {} outside (0,1)",
            ws.bias_ratio
        )));
    }
    if world.objects.is_empty() {
        return Err(Error::InvalidArgument("empty object class list".into()));
    }
    let n_obj = world.objects.len();
    let mut out = Vec::with_capacity(spec.size);
    for i in 0..spec.size {
        let mut mean = vec![0.0; world.sample_dim()];
        let mut attribute = None;
        let context = match i % 3 {
            0 => {
                let a = rng.random_range(0..n_obj);
                let b = loop {
                    let b = rng.random_range(0..n_obj);
                    if b != a {
                        break b;
                    }
                };
                let relation = rng.random_range(0..NUM_RELATIONS);
                mean[..2].copy_from_slice(&world.objects[a].center);
                mean[2..4].copy_from_slice(&world.objects[b].center);
                Context::Composition { a, b, relation }
            }
            1 => {
                let style = rng.random_range(0..ws.portrait_styles);
                let bins = world.attributes.bins();
                let bin = if rng.random::<f64>() < ws.bias_ratio {
                    0
                } else {
                    rng.random_range(1..bins)
                };
                attribute = Some(bin);
                mean[0] = world.attributes.centers()[bin];
                mean[1] = PORTRAIT_SLOT0_Y;
                mean[2..4].copy_from_slice(&PORTRAIT_SLOT1);
                Context::Portrait { style }
            }
            _ => {
                let prompt = rng.random_range(0..ws.preference_prompts);
                mean = world.preference_mean(prompt);
                Context::Preference { prompt }
            }
        };
        let x0 = mean
            .iter()
            .map(|&m| {
                let z: f64 = rng.sample(StandardNormal);
                (m + ws.jitter * z).clamp(-DATA_BOX, DATA_BOX)
            })
            .collect();
        out.push(SceneSample { x0, context, attribute });
    }
    Ok(out)
}

/// Container layout (little-endian):
/// magic `DFDS`, u32 version, u64 count, u32 sample_dim, u32 context_fields,
/// then `count x context_fields` f64 context records, `count x sample_dim`
/// f64 coordinates and `count` f64 attribute bins (-1 when absent).
pub fn write_dataset(path: &Path, samples: &[SceneSample], metadata: &impl Serialize) -> Result<()> {
    let dim = samples.first().map_or(0, |s| s.x0.len());
    let mut w = ByteWriter::new();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.u64(samples.len() as u64);
    w.u32(dim as u32);
    w.u32(CONTEXT_FIELDS);
    for s in samples {
        w.f64s(&s.context.to_fields());
    }
    for s in samples {
        if s.x0.len() != dim {
            return Err(Error::shape("write_dataset", &[dim], &[s.x0.len()]));
        }
        w.f64s(&s.x0);
    }
    for s in samples {
        w.f64(s.attribute.map_or(-1.0, |a| a as f64));
    }
    write_atomic(path, &w.into_inner())?;

    let meta = toml::to_string(metadata).map_err(|e| Error::InvalidArgument(format!("metadata: {e}")))?;
    write_atomic(&sidecar_path(path), meta.as_bytes())
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta.toml");
    p.into()
}

pub fn read_dataset(path: &Path) -> Result<Vec<SceneSample>> {
    let bytes = read_file(path)?;
    let mut r = ByteReader::new(&bytes, path);
    r.expect_magic(DATASET_MAGIC)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(r.error(format!("unsupported dataset version {version}")));
    }
    let count = r.u64()? as usize;
    let dim = r.u32()? as usize;
    let fields = r.u32()?;
    if fields != CONTEXT_FIELDS {
        return Err(r.error(format!("expected {CONTEXT_FIELDS} context fields, got {fields}")));
    }
    let mut contexts = Vec::with_capacity(count);
    for _ in 0..count {
        let f = r.f64s(CONTEXT_FIELDS as usize)?;
        contexts.push(Context::from_fields(&f).ok_or_else(|| r.error(format!("bad context record {f:?}")))?);
    }
    let coords = r.f64s(count * dim)?;
    let attrs = r.f64s(count)?;
    r.finish()?;
    Ok(contexts
        .into_iter()
        .zip(coords.chunks(dim.max(1)))
        .zip(attrs)
        .map(|((context, x0), a)| SceneSample {
            x0: x0[..dim].to_vec(),
            context,
            attribute: (a >= 0.0).then_some(a as usize),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{World, WorldSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world() -> World {
        World::new(WorldSpec::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn composition_slots_sit_near_their_objects() {
        let w = world();
        let data = gen_pretrain_dataset(&w, &DatasetSpec { size: 3000 }, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let three_sigma = 3.0 * w.spec.jitter;
        let mut inside = 0;
        let mut total = 0;
        for s in &data {
            if let Context::Composition { a, b, .. } = s.context {
                total += 1;
                let d = |slot: &[f64], c: [f64; 2]| ((slot[0] - c[0]).powi(2) + (slot[1] - c[1]).powi(2)).sqrt();
                if d(&s.x0[0..2], w.object(a).center) < three_sigma && d(&s.x0[2..4], w.object(b).center) < three_sigma
                {
                    inside += 1;
                }
            }
        }
        assert!(inside as f64 / total as f64 > 0.97, "{inside}/{total}");
        assert!(data.iter().all(|s| s.x0.iter().all(|v| v.abs() <= 2.0)));
    }

    #[test]
    fn portrait_bias_ratio_matches() {
        // Binomial(10000, 0.85) has standard deviation ~0.0036, so ±0.02 is > 5 sigma.
        let w = world();
        let data = gen_pretrain_dataset(&w, &DatasetSpec { size: 30_000 }, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let bins: Vec<usize> = data.iter().filter_map(|s| s.attribute).collect();
        assert_eq!(bins.len(), 10_000);
        let frac = bins.iter().filter(|&&b| b == 0).count() as f64 / bins.len() as f64;
        assert!((frac - 0.85).abs() < 0.02, "{frac}");
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let w = world();
        let a = gen_pretrain_dataset(&w, &DatasetSpec { size: 300 }, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = gen_pretrain_dataset(&w, &DatasetSpec { size: 300 }, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_bias_ratio_is_rejected() {
        let mut w = world();
        w.spec.bias_ratio = 1.0;
        assert!(gen_pretrain_dataset(&w, &DatasetSpec { size: 3 }, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn dataset_file_round_trip_and_truncation() {
        let w = world();
        let data = gen_pretrain_dataset(&w, &DatasetSpec { size: 50 }, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        write_dataset(&path, &data, &w.spec).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), data);
        assert!(sidecar_path(&path).exists());

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match read_dataset(&path) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("{other:?}"),
        }
    }
}
