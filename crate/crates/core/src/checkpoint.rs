//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "DFTN" | u32 version | u32 header_len | header (UTF-8 JSON)
//! params: u64 len, f64 * len
//! reference: u8 present, [u64 len, f64 * len]
//! adamw: u64 t, u64 len, f64 m * len, u64 len, f64 v * len
//! rngs: u32 count, per rng: 32-byte seed, u64 stream, u128 word position
//! stats: u32 count, per key (order from header): u64 count, f64 mean, f64 m2
//! monitor: u8 present, [f64 ratio, f64 peak]
//! ```
//!
//! Every float lives in the binary section so values round-trip bit-exactly;
//! the header only carries strings and integers.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineMethod, BaselineState, DivergenceMonitor};
use crate::binio::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::mlp::{DenoiserParams, MlpConfig};
use crate::optim::AdamWState;
use crate::rewards::{RunningStats, Welford};
use crate::rl::TrainerState;

pub const MAGIC: &[u8; 4] = b"DFTN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Pretrain,
    Rl,
    RewardWeighted,
    Raft,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Pretrain => "pretrain",
            Stage::Rl => "rl",
            Stage::RewardWeighted => "reward_weighted",
            Stage::Raft => "raft",
        }
    }

    pub fn baseline(method: BaselineMethod) -> Self {
        match method {
            BaselineMethod::RewardWeighted => Stage::RewardWeighted,
            BaselineMethod::Raft => Stage::Raft,
        }
    }
}

/// Seed, stream and word position of a ChaCha8 generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    stage: Stage,
    model: MlpConfig,
    iteration: u64,
    config_hash: String,
    stats_keys: Vec<String>,
    monitor_fired_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub model: MlpConfig,
    pub iteration: u64,
    pub config_hash: String,
    pub params: Vec<f64>,
    /// θ_old for RL runs, the frozen generator for baselines.
    pub reference: Option<Vec<f64>>,
    pub opt: AdamWState,
    pub rngs: Vec<RngState>,
    pub stats: RunningStats,
    pub monitor: Option<DivergenceMonitor>,
}

impl Checkpoint {
    /// A checkpoint holding only model weights, with fresh optimizer state.
    pub fn weights(stage: Stage, params: &DenoiserParams, config_hash: &str) -> Self {
        Self {
            stage,
            model: params.config().clone(),
            iteration: 0,
            config_hash: config_hash.to_string(),
            params: params.as_slice().to_vec(),
            reference: None,
            opt: AdamWState::new(params.len()),
            rngs: Vec::new(),
            stats: RunningStats::default(),
            monitor: None,
        }
    }

    pub fn denoiser(&self) -> Result<DenoiserParams> {
        DenoiserParams::from_flat(self.model.clone(), self.params.clone())
    }

    pub fn from_trainer(state: &TrainerState, config_hash: &str) -> Self {
        Self {
            stage: Stage::Rl,
            model: state.params.config().clone(),
            iteration: state.iteration,
            config_hash: config_hash.to_string(),
            params: state.params.as_slice().to_vec(),
            reference: Some(state.old_params.as_slice().to_vec()),
            opt: state.opt.clone(),
            rngs: vec![
                RngState::capture(&state.sampling_rng),
                RngState::capture(&state.timestep_rng),
                RngState::capture(&state.pretrain_rng),
            ],
            stats: state.stats.clone(),
            monitor: None,
        }
    }

    pub fn to_trainer(&self) -> Result<TrainerState> {
        self.expect_stage(&[Stage::Rl])?;
        let [s, t, p] = self.rng_array::<3>()?;
        Ok(TrainerState {
            params: self.denoiser()?,
            old_params: DenoiserParams::from_flat(self.model.clone(), self.reference_or_params())?,
            opt: self.opt.clone(),
            iteration: self.iteration,
            sampling_rng: s,
            timestep_rng: t,
            pretrain_rng: p,
            stats: self.stats.clone(),
        })
    }

    pub fn from_baseline(state: &BaselineState, method: BaselineMethod, config_hash: &str) -> Self {
        Self {
            stage: Stage::baseline(method),
            model: state.params.config().clone(),
            iteration: state.iteration,
            config_hash: config_hash.to_string(),
            params: state.params.as_slice().to_vec(),
            reference: Some(state.base.as_slice().to_vec()),
            opt: state.opt.clone(),
            rngs: vec![
                RngState::capture(&state.sampling_rng),
                RngState::capture(&state.noise_rng),
            ],
            stats: RunningStats::default(),
            monitor: Some(state.monitor.clone()),
        }
    }

    pub fn to_baseline(&self, method: BaselineMethod) -> Result<BaselineState> {
        self.expect_stage(&[Stage::baseline(method)])?;
        let [s, n] = self.rng_array::<2>()?;
        let monitor = self
            .monitor
            .clone()
            .ok_or_else(|| Error::InvalidArgument("baseline checkpoint without divergence monitor".into()))?;
        Ok(BaselineState {
            params: self.denoiser()?,
            base: DenoiserParams::from_flat(self.model.clone(), self.reference_or_params())?,
            opt: self.opt.clone(),
            iteration: self.iteration,
            sampling_rng: s,
            noise_rng: n,
            monitor,
        })
    }

    fn reference_or_params(&self) -> Vec<f64> {
        self.reference.clone().unwrap_or_else(|| self.params.clone())
    }

    fn expect_stage(&self, allowed: &[Stage]) -> Result<()> {
        if allowed.contains(&self.stage) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "checkpoint stage is {}, expected {}",
                self.stage.name(),
                allowed.iter().map(|s| s.name()).collect::<Vec<_>>().join(" or ")
            )))
        }
    }

    fn rng_array<const N: usize>(&self) -> Result<[ChaCha8Rng; N]> {
        if self.rngs.len() != N {
            return Err(Error::InvalidArgument(format!(
                "checkpoint holds {} rng states, expected {N}",
                self.rngs.len()
            )));
        }
        Ok(std::array::from_fn(|i| self.rngs[i].restore()))
    }

    /// Refuses to resume a run recorded under a different config unless
    /// `force` is set.
    pub fn check_resume(&self, config_hash: &str, force: bool) -> Result<()> {
        if self.config_hash != config_hash && !force {
            return Err(Error::InvalidArgument(format!(
                "config hash mismatch: checkpoint {} vs current {config_hash}; pass the override flag to resume anyway",
                self.config_hash
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            stage: self.stage,
            model: self.model.clone(),
            iteration: self.iteration,
            config_hash: self.config_hash.clone(),
            stats_keys: self.stats.table.keys().cloned().collect(),
            monitor_fired_at: self.monitor.as_ref().and_then(|m| m.fired_at),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(header.len() as u32);
        w.bytes(&header);
        w.f64_array(&self.params);
        match &self.reference {
            Some(r) => {
                w.u8(1);
                w.f64_array(r);
            }
            None => w.u8(0),
        }
        w.u64(self.opt.t);
        w.f64_array(&self.opt.m);
        w.f64_array(&self.opt.v);
        w.u32(self.rngs.len() as u32);
        for r in &self.rngs {
            w.bytes(&r.seed);
            w.u64(r.stream);
            w.u128(r.word_pos);
        }
        w.u32(self.stats.table.len() as u32);
        for s in self.stats.table.values() {
            w.u64(s.count);
            w.f64(s.mean);
            w.f64(s.m2);
        }
        match &self.monitor {
            Some(m) => {
                w.u8(1);
                w.f64(m.ratio);
                w.f64(m.peak);
            }
            None => w.u8(0),
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.expect_magic(MAGIC)?;
        let at = r.offset();
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: at,
                message: format!("unsupported version {version}, expected {VERSION}"),
            });
        }
        let len = r.u32()? as usize;
        let at = r.offset();
        let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: at,
            message: format!("bad header: {e}"),
        })?;
        let n = header.model.num_params();
        let params = sized_array(&mut r, n, "params")?;
        let reference = match flag(&mut r, "reference")? {
            true => Some(sized_array(&mut r, n, "reference")?),
            false => None,
        };
        let t = r.u64()?;
        let m = sized_array(&mut r, n, "adamw m")?;
        let v = sized_array(&mut r, n, "adamw v")?;
        let count = r.u32()?;
        let mut rngs = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            rngs.push(RngState {
                seed,
                stream: r.u64()?,
                word_pos: r.u128()?,
            });
        }
        let at = r.offset();
        let count = r.u32()? as usize;
        if count != header.stats_keys.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: at,
                message: format!("{count} stats entries, header lists {}", header.stats_keys.len()),
            });
        }
        let mut table = BTreeMap::new();
        for key in header.stats_keys {
            let w = Welford {
                count: r.u64()?,
                mean: r.f64()?,
                m2: r.f64()?,
            };
            table.insert(key, w);
        }
        let monitor = match flag(&mut r, "monitor")? {
            true => Some(DivergenceMonitor {
                ratio: r.f64()?,
                peak: r.f64()?,
                fired_at: header.monitor_fired_at,
            }),
            false => None,
        };
        r.finish()?;
        Ok(Self {
            stage: header.stage,
            model: header.model,
            iteration: header.iteration,
            config_hash: header.config_hash,
            params,
            reference,
            opt: AdamWState { m, v, t },
            rngs,
            stats: RunningStats { table },
            monitor,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

fn flag(r: &mut ByteReader<'_>, what: &str) -> Result<bool> {
    let at = r.offset();
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        b => Err(at_offset(r, at, format!("bad {what} flag {b}"))),
    }
}

fn at_offset(r: &ByteReader<'_>, offset: u64, message: String) -> Error {
    match r.error("") {
        Error::Format { path, .. } => Error::Format { path, offset, message },
        other => other,
    }
}

fn sized_array(r: &mut ByteReader<'_>, expected: usize, what: &str) -> Result<Vec<f64>> {
    let at = r.offset();
    let n = r.u64()? as usize;
    if n != expected {
        return Err(at_offset(
            r,
            at,
            format!("{what} has {n} values, model needs {expected}"),
        ));
    }
    r.f64s(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rl::stream_rng;
    use rand::Rng;

    fn model() -> MlpConfig {
        MlpConfig {
            sample_dim: 4,
            context_dim: 3,
            hidden: vec![5],
        }
    }

    fn trainer() -> TrainerState {
        let mut rng = stream_rng(3, 0);
        let params = DenoiserParams::init(model(), &mut rng);
        let mut s = TrainerState::new(params, 9);
        s.iteration = 17;
        s.params.as_mut_slice()[0] = f64::MIN_POSITIVE / 3.0;
        s.params.as_mut_slice()[1] = -0.0;
        s.opt.t = 4;
        s.opt.m.iter_mut().for_each(|x| *x = rng.random::<f64>());
        let _: u64 = s.sampling_rng.random();
        let _: f64 = s.pretrain_rng.random();
        for (k, x) in [("a", 0.5), ("b", 1.25), ("a", 2.0)] {
            s.stats.table.entry(k.to_string()).or_default().push(x);
        }
        s
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let q = dir.path().join("d.ckpt");
        let c = Checkpoint::from_trainer(&trainer(), "abc");
        c.save(&p).unwrap();
        let loaded = Checkpoint::load(&p).unwrap();
        assert_eq!(loaded, c);
        loaded.save(&q).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
        assert_eq!(&std::fs::read(&p).unwrap()[..4], b"DFTN");
    }

    #[test]
    fn trainer_state_round_trips_including_rng_position() {
        let mut s = trainer();
        let mut back = Checkpoint::from_trainer(&s, "h").to_trainer().unwrap();
        assert_eq!(back.params.as_slice(), s.params.as_slice());
        assert_eq!(back.params.as_slice()[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back.opt, s.opt);
        assert_eq!(back.stats, s.stats);
        assert_eq!(back.iteration, 17);
        for _ in 0..5 {
            assert_eq!(back.sampling_rng.random::<u64>(), s.sampling_rng.random::<u64>());
            assert_eq!(back.timestep_rng.random::<u64>(), s.timestep_rng.random::<u64>());
            assert_eq!(back.pretrain_rng.random::<u64>(), s.pretrain_rng.random::<u64>());
        }
    }

    #[test]
    fn baseline_state_round_trips() {
        let params = DenoiserParams::init(model(), &mut stream_rng(1, 0));
        let mut s = BaselineState::new(params, 4, 0.5);
        s.monitor.observe(3, 0.8);
        s.monitor.observe(4, 0.1);
        let c = Checkpoint::from_baseline(&s, BaselineMethod::Raft, "h");
        let c2 = Checkpoint::from_bytes(&c.to_bytes(), Path::new("x")).unwrap();
        let back = c2.to_baseline(BaselineMethod::Raft).unwrap();
        assert_eq!(back.monitor, s.monitor);
        assert_eq!(back.monitor.fired_at, Some(4));
        assert!(c2.to_baseline(BaselineMethod::RewardWeighted).is_err());
        assert!(c2.to_trainer().is_err());
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = Checkpoint::from_trainer(&trainer(), "h").to_bytes();
        for cut in [2usize, 6, 11, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut], Path::new("t.ckpt")) {
                Err(Error::Format { offset, message, .. }) => {
                    assert!(offset <= cut as u64, "{cut}: {offset} {message}");
                    assert!(message.contains("truncated"), "{message}");
                }
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn version_and_magic_mismatch_are_rejected() {
        let mut bytes = Checkpoint::from_trainer(&trainer(), "h").to_bytes();
        bytes[4] = 99;
        match Checkpoint::from_bytes(&bytes, Path::new("v")) {
            Err(Error::Format { offset: 4, message, .. }) => assert!(message.contains("version")),
            other => panic!("{other:?}"),
        }
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("m")),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = Checkpoint::from_trainer(&trainer(), "h").to_bytes();
        let n = bytes.len() as u64;
        bytes.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("x")),
            Err(Error::Format { offset, .. }) if offset == n
        ));
    }

    #[test]
    fn resume_refuses_hash_mismatch_unless_forced() {
        let c = Checkpoint::from_trainer(&trainer(), "aaa");
        assert!(c.check_resume("aaa", false).is_ok());
        assert!(c.check_resume("bbb", false).is_err());
        assert!(c.check_resume("bbb", true).is_ok());
    }
}
