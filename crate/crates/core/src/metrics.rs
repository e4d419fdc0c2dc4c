//! Append-only JSONL training log, one record per optimizer step.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{LossComponent, LossReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    /// Seconds since the writer was opened.
    pub wall_time: f64,
    pub mode: String,
    pub components: Vec<LossComponent>,
    pub total: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_bleu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_token_accuracy: Option<f64>,
}

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    started: Instant,
}

impl MetricsWriter {
    /// Opens `path` for appending; a fresh run passes `truncate = true`.
    pub fn open(path: &Path, truncate: bool) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(!truncate)
            .write(true)
            .truncate(truncate)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            started: Instant::now(),
        })
    }

    pub fn record(&mut self, report: &LossReport, eval: Option<(f64, f64)>) -> Result<()> {
        let rec = MetricsRecord {
            step: report.step,
            wall_time: self.started.elapsed().as_secs_f64(),
            mode: report.mode.clone(),
            components: report.components.clone(),
            total: report.total,
            lr: report.lr,
            eval_bleu: eval.map(|e| e.0),
            eval_token_accuracy: eval.map(|e| e.1),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
