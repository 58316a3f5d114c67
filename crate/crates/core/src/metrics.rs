//! Per-iteration metrics rows and their CSV file.

use std::path::Path;

use crate::binio::{read_file, write_atomic};
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 9] = [
    "iteration",
    "task",
    "mean_reward",
    "loss_ppo",
    "loss_pretrain",
    "statistical_parity",
    "detection_seen",
    "detection_unseen",
    "wall_seconds",
];

/// One row per (iteration, task). Absent values are written as empty fields.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub task: String,
    pub mean_reward: f64,
    pub loss_ppo: f64,
    pub loss_pretrain: Option<f64>,
    pub statistical_parity: Option<f64>,
    pub detection_seen: Option<f64>,
    pub detection_unseen: Option<f64>,
    pub wall_seconds: f64,
}

impl MetricsRow {
    pub fn new(iteration: u64, task: &str) -> Self {
        Self {
            iteration,
            task: task.to_string(),
            mean_reward: 0.0,
            loss_ppo: 0.0,
            loss_pretrain: None,
            statistical_parity: None,
            detection_seen: None,
            detection_unseen: None,
            wall_seconds: 0.0,
        }
    }

    fn fields(&self) -> [String; 9] {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            self.iteration.to_string(),
            self.task.clone(),
            self.mean_reward.to_string(),
            self.loss_ppo.to_string(),
            opt(self.loss_pretrain),
            opt(self.statistical_parity),
            opt(self.detection_seen),
            opt(self.detection_unseen),
            self.wall_seconds.to_string(),
        ]
    }
}

fn write_rows(out: &mut Vec<u8>, rows: &[MetricsRow], header: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if header {
        w.write_record(CSV_HEADER)?;
    }
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush().map_err(|e| Error::io("<metrics buffer>", e))?;
    Ok(())
}

/// Appends rows, creating the file with its header when missing. The whole
/// file is rewritten through a temp file and renamed into place.
pub fn append_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut bytes = if path.exists() {
        let existing = read_file(path)?;
        check_header(path, &existing)?;
        existing
    } else {
        Vec::new()
    };
    let header = bytes.is_empty();
    write_rows(&mut bytes, rows, header)?;
    write_atomic(path, &bytes)
}

/// Replaces the file with a header plus `rows`.
pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut bytes = Vec::new();
    write_rows(&mut bytes, rows, true)?;
    write_atomic(path, &bytes)
}

fn check_header(path: &Path, bytes: &[u8]) -> Result<()> {
    let end = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
    let line = std::str::from_utf8(&bytes[..end]).unwrap_or("").trim_end_matches('\r');
    if line != CSV_HEADER.join(",") {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("metrics header mismatch: {line:?}"),
        });
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let bytes = read_file(path)?;
    check_header(path, &bytes)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let bad = |what: &str| Error::Format {
            path: path.to_path_buf(),
            offset,
            message: format!("bad {what}"),
        };
        if rec.len() != CSV_HEADER.len() {
            return Err(bad("field count"));
        }
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(CSV_HEADER[i]));
        let opt = |i: usize| -> Result<Option<f64>> {
            if rec[i].is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        out.push(MetricsRow {
            iteration: rec[0].parse().map_err(|_| bad("iteration"))?,
            task: rec[1].to_string(),
            mean_reward: num(2)?,
            loss_ppo: num(3)?,
            loss_pretrain: opt(4)?,
            statistical_parity: opt(5)?,
            detection_seen: opt(6)?,
            detection_unseen: opt(7)?,
            wall_seconds: num(8)?,
        });
    }
    Ok(out)
}
