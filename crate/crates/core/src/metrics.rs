//! JSONL metrics stream: one record per optimizer step and per epoch.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::objectives::{LossBreakdown, Stage};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Step,
    Epoch,
    /// Held-out test evaluation of the selected checkpoint.
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub kind: RecordKind,
    /// Optimizer steps completed so far; non-decreasing within a run.
    pub step: u64,
    pub epoch: usize,
    pub stage: Stage,
    pub lr: f64,
    pub l_cls: f64,
    pub l_fg: f64,
    pub l_cp: f64,
    pub total: f64,
    /// Keys are `{split}_{metric}`, e.g. `val_top1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<BTreeMap<String, f64>>,
    /// Milliseconds since the Unix epoch. The only non-deterministic field.
    pub wall_clock_ms: u64,
}

impl MetricsRecord {
    pub fn new(run_id: &str, kind: RecordKind, step: u64, epoch: usize, lr: f64, loss: &LossBreakdown) -> Self {
        Self {
            schema_version: METRICS_SCHEMA_VERSION,
            run_id: run_id.to_string(),
            kind,
            step,
            epoch,
            stage: loss.stage,
            lr,
            l_cls: loss.l_cls,
            l_fg: loss.l_fg,
            l_cp: loss.l_cp,
            total: loss.total,
            eval: None,
            wall_clock_ms: now_ms(),
        }
    }

    /// Copy with the timestamp zeroed, for bitwise stream comparison.
    pub fn without_clock(&self) -> Self {
        Self {
            wall_clock_ms: 0,
            ..self.clone()
        }
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Appends records to a JSONL file, one `write` call per line.
#[derive(Debug)]
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
    last_step: u64,
}

impl MetricsWriter {
    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let last_step = read_records(path)?.last().map_or(0, |r| r.step);
        Ok(Self {
            path: path.to_path_buf(),
            file,
            last_step,
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        if record.step < self.last_step {
            return Err(Error::InvalidArgument(format!(
                "metrics step went backwards: {} after {}",
                record.step, self.last_step
            )));
        }
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))?;
        self.last_step = record.step;
        Ok(())
    }
}

pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let bytes = fsutil::read(path)?;
    let text = String::from_utf8_lossy(&bytes);
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Atomically rewrites `path` keeping only records that satisfy `keep`.
pub fn truncate_records(path: &Path, keep: impl Fn(&MetricsRecord) -> bool) -> Result<()> {
    let mut out = Vec::new();
    for r in read_records(path)?.into_iter().filter(|r| keep(r)) {
        out.extend(serde_json::to_vec(&r)?);
        out.push(b'\n');
    }
    fsutil::atomic_write(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss() -> LossBreakdown {
        LossBreakdown {
            l_cls: 1.0,
            l_fg: 0.5,
            l_cp: 0.25,
            total: 1.125,
            stage: Stage::Stage1,
        }
    }

    #[test]
    fn append_read_truncate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::append_to(&path).unwrap();
        for s in 1..=4 {
            w.write(&MetricsRecord::new("r", RecordKind::Step, s, (s as usize - 1) / 2, 0.1, &loss()))
                .unwrap();
        }
        let back = read_records(&path).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back[2].l_fg, 0.5);
        assert!(w
            .write(&MetricsRecord::new("r", RecordKind::Step, 2, 0, 0.1, &loss()))
            .is_err());
        truncate_records(&path, |r| r.epoch == 0).unwrap();
        assert_eq!(read_records(&path).unwrap().len(), 2);
    }

    #[test]
    fn stage_serializes_lowercase() {
        let r = MetricsRecord::new("r", RecordKind::Epoch, 0, 0, 0.0, &loss());
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"stage\":\"stage1\""), "{s}");
        assert!(s.contains("\"kind\":\"epoch\""), "{s}");
    }
}
