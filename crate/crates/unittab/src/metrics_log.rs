//! Newline-delimited JSON metric records and periodic checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unittab_core::schema::Schema;
use unittab_core::training::{TrainObserver, TrainState};

use crate::checkpoint::{save_checkpoint, Snapshot};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Appends one JSON object per line.
pub struct MetricsLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn record(&mut self, record: &MetricRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Training observer writing the metrics log and, when asked to, a
/// checkpoint named `checkpoint-<step>.bin` in `checkpoint_dir`.
pub struct RunObserver<'a> {
    pub log: MetricsLog,
    pub checkpoint_dir: PathBuf,
    pub schema: &'a Schema,
    /// Path of the most recent checkpoint written.
    pub last_checkpoint: Option<PathBuf>,
}

fn core_err(e: Error) -> unittab_core::Error {
    unittab_core::Error::Io(e.to_string())
}

impl TrainObserver for RunObserver<'_> {
    fn on_metric(&mut self, step: u64, split: &str, metric: &str, value: f64) -> unittab_core::Result<()> {
        self.log
            .record(&MetricRecord {
                step,
                split: split.into(),
                metric: metric.into(),
                value,
            })
            .map_err(core_err)
    }

    fn on_checkpoint(&mut self, state: &TrainState<'_>) -> unittab_core::Result<()> {
        self.log.flush().map_err(core_err)?;
        let path = self.checkpoint_dir.join(format!("checkpoint-{:08}.bin", state.step));
        let snap = Snapshot {
            model: state.model,
            optimizer: Some(state.optimizer),
            rng: Some(state.rng),
            step: state.step,
            train: Some(state.config),
        };
        save_checkpoint(&path, self.schema, &snap).map_err(core_err)?;
        self.last_checkpoint = Some(path);
        Ok(())
    }
}
