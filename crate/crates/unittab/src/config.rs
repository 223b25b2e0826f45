//! Run configuration: one JSON document, overridable from flags and the
//! `UNITTAB_SEED` environment variable.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unittab_core::model::{ModelConfig, TaskKind};
use unittab_core::training::TrainConfig;

use crate::error::{Error, Result};

pub const SEED_ENV: &str = "UNITTAB_SEED";

/// Where the data lives and how it is cut into samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub csv: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    /// Share of entities held out for evaluation.
    pub test_fraction: f64,
    pub split_seed: u64,
    /// Fixed window length; without it every series is one sample (cropped
    /// to `t_max` by the training loops).
    pub window: Option<usize>,
    pub train_stride: usize,
    pub test_stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            csv: None,
            schema: None,
            test_fraction: 0.2,
            split_seed: 0,
            window: None,
            train_stride: 1,
            test_stride: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub task: Option<TaskKind>,
    pub output_dir: PathBuf,
    /// Model to start from (fine-tuning) or to evaluate.
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            data: DataConfig::default(),
            task: None,
            output_dir: PathBuf::from("run"),
            checkpoint: None,
        }
    }
}

/// Values given on the command line; each one that is set wins over the
/// config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub csv: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub task: Option<TaskKind>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub max_steps: Option<u64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub window: Option<usize>,
    pub checkpoint_every: Option<u64>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Reads `path`, or starts from the defaults without one.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::from_json(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => Ok(Self::default()),
        }
    }

    /// Applies the environment seed, then the flags.
    pub fn resolve(mut self, env_seed: Option<&str>, o: &Overrides) -> Result<Self> {
        if let Some(s) = env_seed {
            self.train.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
        }
        macro_rules! set {
            ($($src:ident => $dst:expr),* $(,)?) => {
                $(if let Some(v) = &o.$src { $dst = v.clone().into(); })*
            };
        }
        set! {
            csv => self.data.csv,
            schema => self.data.schema,
            output_dir => self.output_dir,
            checkpoint => self.checkpoint,
            task => self.task,
            seed => self.train.seed,
            epochs => self.train.epochs,
            max_steps => self.train.max_steps,
            lr => self.train.lr,
            batch_size => self.train.batch_size,
            window => self.data.window,
            checkpoint_every => self.train.checkpoint_every,
        }
        Ok(self)
    }

    /// Every problem found, as one error, before any work starts.
    pub fn validate(&self, needs_task: bool) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.model.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.train.validate() {
            problems.push(e.to_string());
        }
        let d = &self.data;
        if !(0.0..1.0).contains(&d.test_fraction) {
            problems.push(format!("data.test_fraction {} outside [0, 1)", d.test_fraction));
        }
        if d.train_stride == 0 || d.test_stride == 0 {
            problems.push("data strides must be positive".into());
        }
        if let Some(w) = d.window {
            if w == 0 || w > self.model.t_max {
                problems.push(format!(
                    "data.window {w} must be in 1..=model.t_max ({})",
                    self.model.t_max
                ));
            }
        }
        for (key, path) in [("data.csv", &d.csv), ("data.schema", &d.schema)] {
            match path {
                None => problems.push(format!("{key} is required")),
                Some(p) if !p.is_file() => problems.push(format!("{key}: {} does not exist", p.display())),
                _ => {}
            }
        }
        if let Some(p) = &self.checkpoint {
            if !p.is_file() {
                problems.push(format!("checkpoint: {} does not exist", p.display()));
            }
        }
        if needs_task && self.task.is_none() {
            problems.push("task is required (regression or binary)".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Makes every path absolute so the copy in the run directory stays
    /// usable from anywhere.
    pub fn absolutize(&mut self) -> Result<()> {
        let abs = |p: &mut PathBuf| -> Result<()> {
            if p.is_relative() {
                *p = std::path::absolute(&*p).map_err(|e| Error::io(&*p, e))?;
            }
            Ok(())
        };
        for p in [&mut self.data.csv, &mut self.data.schema, &mut self.checkpoint]
            .into_iter()
            .flatten()
        {
            abs(p)?;
        }
        abs(&mut self.output_dir)
    }
}
