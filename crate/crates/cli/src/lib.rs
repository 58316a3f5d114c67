//! Run directories and the subcommands behind the `dftune` binary.
//!
//! Every command reads a resolved [`RunConfig`], writes its artifacts under an
//! output directory and echoes the config there as `config.toml`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use dftune_core::baselines::{train_baseline, BaselineState};
use dftune_core::binio::{read_file, write_atomic};
use dftune_core::checkpoint::{Checkpoint, Stage};
use dftune_core::config::{DataConfig, Method, RunConfig, STREAM_INIT, STREAM_PRETRAIN_RUN};
use dftune_core::eval::{evaluate as evaluate_model, EvalReport};
use dftune_core::metrics::{append_metrics, read_metrics, write_metrics, MetricsRow};
use dftune_core::mlp::DenoiserParams;
use dftune_core::optim::AdamWState;
use dftune_core::plot::reward_svg;
use dftune_core::pretrain::pretrain as run_pretrain;
use dftune_core::rl::{stream_rng, train, TrainInputs, TrainerState};
use dftune_core::tasks::{read_dataset, sidecar_path, write_dataset, SceneSample, World, WorldSpec};
use dftune_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_FILE: &str = "config.toml";
pub const DATASET_FILE: &str = "pretrain.dfds";
pub const BASE_CHECKPOINT: &str = "base.ckpt";
pub const PRETRAIN_LOSS_FILE: &str = "pretrain_loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const RESUME_CHECKPOINT: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";
pub const PLOT_FILE: &str = "rewards.svg";

const LOSS_WINDOW: usize = 100;

/// Config file, then `key=value` overrides, then the common flags.
pub fn resolve_config(
    path: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<RunConfig> {
    let doc = match path {
        Some(p) => String::from_utf8(read_file(p)?)
            .map_err(|_| Error::config("<document>", format!("{} is not UTF-8", p.display())))?,
        None => String::new(),
    };
    let mut sets = sets.to_vec();
    if let Some(seed) = seed {
        sets.push(format!("seed={seed}"));
    }
    if let Some(out) = out {
        sets.push(format!("out={}", toml::Value::String(out.display().to_string())));
    }
    RunConfig::from_layers(&doc, &sets)
}

pub fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

pub fn echo_config(cfg: &RunConfig) -> Result<PathBuf> {
    let path = out_dir(cfg)?.join(CONFIG_FILE);
    write_atomic(&path, cfg.to_flat_toml().as_bytes())?;
    Ok(path)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct DatasetMeta {
    data: DataConfig,
    world: WorldSpec,
}

pub fn gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    echo_config(cfg)?;
    let world = cfg.build_world()?;
    let data = cfg.dataset(&world)?;
    let path = out_dir(cfg)?.join(DATASET_FILE);
    let meta = DatasetMeta {
        data: cfg.data.clone(),
        world: cfg.world.clone(),
    };
    write_dataset(&path, &data, &meta)?;
    Ok(path)
}

/// Reads a dataset written by [`gen_data`], refusing one generated under a
/// different data or world section.
pub fn load_dataset(cfg: &RunConfig, path: &Path) -> Result<Vec<SceneSample>> {
    let side = sidecar_path(path);
    let text = String::from_utf8(read_file(&side)?).map_err(|_| Error::Format {
        path: side.clone(),
        offset: 0,
        message: "not UTF-8".into(),
    })?;
    let meta: DatasetMeta = toml::from_str(&text).map_err(|e| Error::Format {
        path: side.clone(),
        offset: e.span().map_or(0, |s| s.start as u64),
        message: e.message().to_string(),
    })?;
    if meta.data != cfg.data || meta.world != cfg.world {
        return Err(Error::InvalidArgument(format!(
            "{} was generated under a different data/world config",
            path.display()
        )));
    }
    read_dataset(path)
}

fn dataset_for(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<SceneSample>> {
    match data {
        Some(p) => load_dataset(cfg, p),
        None => cfg.dataset(&cfg.build_world()?),
    }
}

/// Trains the base model on the pretraining loss alone and writes
/// `base.ckpt` plus windowed losses.
pub fn pretrain(cfg: &RunConfig, data: Option<&Path>) -> Result<Checkpoint> {
    echo_config(cfg)?;
    let dir = out_dir(cfg)?;
    let env = cfg.env()?;
    let data = dataset_for(cfg, data)?;
    let mut params = DenoiserParams::init(cfg.mlp_config(&env.world), &mut stream_rng(cfg.seed, STREAM_INIT));
    let mut opt = AdamWState::new(params.len());
    let losses = run_pretrain(
        &mut params,
        &mut opt,
        &cfg.adamw,
        &data,
        &env.world.layout,
        &env.schedule,
        &cfg.pretrain,
        &mut stream_rng(cfg.seed, STREAM_PRETRAIN_RUN),
    )?;
    let mut csv = String::from("step,loss\n");
    for (i, w) in losses.chunks(LOSS_WINDOW).enumerate() {
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        csv.push_str(&format!("{},{mean}\n", i * LOSS_WINDOW + w.len()));
    }
    write_atomic(&dir.join(PRETRAIN_LOSS_FILE), csv.as_bytes())?;
    let mut ckpt = Checkpoint::weights(Stage::Pretrain, &params, &cfg.hash());
    ckpt.opt = opt;
    ckpt.iteration = cfg.pretrain.steps as u64;
    ckpt.save(&dir.join(BASE_CHECKPOINT))?;
    Ok(ckpt)
}

#[derive(Debug, Clone, Default)]
pub struct FinetuneOptions {
    pub data: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub force_resume: bool,
    /// Fill `wall_seconds`; off by default so metrics files are reproducible.
    pub wall_clock: bool,
}

fn load_base(cfg: &RunConfig, path: &Path, world: &World) -> Result<DenoiserParams> {
    let base = Checkpoint::load(path)?;
    let want = cfg.mlp_config(world);
    if base.model != want {
        return Err(Error::InvalidArgument(format!(
            "{}: model {:?} does not match the config's {:?}",
            path.display(),
            base.model,
            want
        )));
    }
    base.denoiser()
}

/// Drops rows at or after `iteration` (written after the last checkpoint).
fn rewind_metrics(path: &Path, iteration: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let keep: Vec<MetricsRow> = read_metrics(path)?
        .into_iter()
        .filter(|r| r.iteration < iteration)
        .collect();
    write_metrics(path, &keep)
}

fn start_metrics(path: &Path, resume_at: Option<u64>) -> Result<()> {
    match resume_at {
        Some(it) => rewind_metrics(path, it),
        None if path.exists() => std::fs::remove_file(path).map_err(|e| Error::io(path, e)),
        None => Ok(()),
    }
}

/// Runs RL or a baseline from `base` (or from a resume checkpoint) and writes
/// `metrics.csv`, periodic `checkpoint.ckpt` and `final.ckpt`.
pub fn finetune(cfg: &RunConfig, base: Option<&Path>, opts: &FinetuneOptions) -> Result<Checkpoint> {
    echo_config(cfg)?;
    let dir = out_dir(cfg)?;
    let env = cfg.env()?;
    let tasks = cfg.task_bindings()?;
    let hash = cfg.hash();
    let metrics = dir.join(METRICS_FILE);
    let every = cfg.finetune.checkpoint_every as u64;
    let resumed = match &opts.resume {
        Some(p) => {
            let c = Checkpoint::load(p)?;
            c.check_resume(&hash, opts.force_resume)?;
            Some(c)
        }
        None => None,
    };
    let base_params = || -> Result<DenoiserParams> {
        let p = base.ok_or_else(|| Error::InvalidArgument("finetune needs a base checkpoint or --resume".into()))?;
        load_base(cfg, p, &env.world)
    };
    start_metrics(&metrics, resumed.as_ref().map(|c| c.iteration))?;
    let clock = Instant::now();
    let stamp = |rows: &mut [MetricsRow]| {
        if opts.wall_clock {
            let s = clock.elapsed().as_secs_f64();
            rows.iter_mut().for_each(|r| r.wall_seconds = s);
        }
    };
    let checkpoint_path = dir.join(RESUME_CHECKPOINT);
    let final_ckpt = match cfg.method()? {
        Method::Rl => {
            let mut state = match &resumed {
                Some(c) => c.to_trainer()?,
                None => TrainerState::new(base_params()?, cfg.seed),
            };
            let data = dataset_for(cfg, opts.data.as_deref())?;
            let inputs = TrainInputs {
                env: &env,
                pretrain_data: &data,
                pretrain: &cfg.pretrain,
                adamw: &cfg.adamw,
            };
            train(&mut state, &tasks, &inputs, &cfg.rl, |s, rows| {
                let mut rows = rows.to_vec();
                stamp(&mut rows);
                append_metrics(&metrics, &rows)?;
                if every > 0 && s.iteration % every == 0 {
                    Checkpoint::from_trainer(s, &hash).save(&checkpoint_path)?;
                }
                Ok(())
            })?;
            Checkpoint::from_trainer(&state, &hash)
        }
        Method::Baseline(method) => {
            let mut state = match &resumed {
                Some(c) => c.to_baseline(method)?,
                None => BaselineState::new(base_params()?, cfg.seed, cfg.baseline.divergence_ratio),
            };
            train_baseline(
                &mut state,
                method,
                &tasks[0],
                &env,
                &cfg.baseline,
                &cfg.adamw,
                |s, row, diverged| {
                    let mut rows = [row.clone()];
                    stamp(&mut rows);
                    append_metrics(&metrics, &rows)?;
                    if diverged && s.monitor.fired_at == Some(row.iteration) {
                        eprintln!(
                            "warning: {} mean reward {:.4} fell below {} x peak {:.4} at iteration {}",
                            method.name(),
                            row.mean_reward,
                            s.monitor.ratio,
                            s.monitor.peak,
                            row.iteration
                        );
                    }
                    if every > 0 && s.iteration % every == 0 {
                        Checkpoint::from_baseline(s, method, &hash).save(&checkpoint_path)?;
                    }
                    Ok(())
                },
            )?;
            Checkpoint::from_baseline(&state, method, &hash)
        }
    };
    final_ckpt.save(&dir.join(FINAL_CHECKPOINT))?;
    Ok(final_ckpt)
}

/// Metric suite for one checkpoint, written to `report.json`.
pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, label: Option<&str>) -> Result<EvalReport> {
    echo_config(cfg)?;
    let env = cfg.env()?;
    let params = load_base(cfg, checkpoint, &env.world)?;
    let label = label
        .map(str::to_string)
        .unwrap_or_else(|| checkpoint.display().to_string());
    let report = evaluate_model(&label, &params, &env, &cfg.eval)?;
    write_report(&out_dir(cfg)?.join(REPORT_FILE), &report)?;
    Ok(report)
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: byte_offset(&bytes, e.line(), e.column()),
        message: e.to_string(),
    })
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> u64 {
    let start: usize = bytes
        .split(|&b| b == b'\n')
        .take(line.saturating_sub(1))
        .map(|l| l.len() + 1)
        .sum();
    (start + column.saturating_sub(1)) as u64
}

/// Fixed-width table: one row per report in input order, one column per
/// metric. All reports must carry the same metric set.
pub fn compare(reports: &[EvalReport]) -> Result<String> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidArgument("compare needs at least one report".into()))?;
    let columns: Vec<&String> = first.metrics.keys().collect();
    for r in &reports[1..] {
        if r.metrics.keys().ne(first.metrics.keys()) {
            return Err(Error::InvalidArgument(format!(
                "report `{}` has a different metric set than `{}`",
                r.label, first.label
            )));
        }
    }
    let label_w = reports.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let widths: Vec<usize> = columns.iter().map(|c| c.len().max(10)).collect();
    let mut out = format!("{:<label_w$}", "model");
    for (c, w) in columns.iter().zip(&widths) {
        out.push_str(&format!("  {c:>w$}"));
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format!("{:<label_w$}", r.label));
        for (c, w) in columns.iter().zip(&widths) {
            out.push_str(&format!("  {:>w$.4}", r.metrics[*c]));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn plot(metrics: &Path, svg: &Path, title: &str) -> Result<()> {
    let rows = read_metrics(metrics)?;
    write_atomic(svg, reward_svg(&rows, title)?.as_bytes())
}
