//! Command-line surface: `gen-data`, `pretrain`, `finetune`, `eval` and
//! `grad-check`.
//!
//! Exit codes: 0 on success, 1 when a verification fails (or training
//! itself fails), 2 for usage and configuration errors.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use unittab_core::ingest::{
    gen_multitype_transactions, gen_pollution_like, split_by_entity, window, PollutionConfig, TransactionsConfig,
    WindowedSample,
};
use unittab_core::metrics::EvalReport;
use unittab_core::model::{Model, TaskKind};
use unittab_core::rng::{derive_seed, seeded};
use unittab_core::schema::{AttributeKind, FieldValue, Schema, TimeSeries};
use unittab_core::training::{evaluate, finetune, pretrain};
use unittab_core::verify::{check_model, check_primitive, CheckResult, MODEL_CHECK, PRIMITIVES};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Snapshot};
use crate::config::{Overrides, RunConfig, SEED_ENV};
use crate::csv_io::{format_timestamp, read_csv, write_csv, CsvColumns};
use crate::error::{Error, Result};
use crate::metrics_log::{MetricsLog, RunObserver};
use crate::schema_io::{read_schema, schema_hash, write_schema};

/// Seed stream of the initial weights, next to the ones the training loops
/// derive from the same seed.
const INIT_STREAM: u64 = 2;

pub const CONFIG_FILE: &str = "config.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const EVAL_FILE: &str = "eval.json";
pub const METRICS_FILE: &str = "metrics.ndjson";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Parser)]
#[command(
    name = "unittab",
    version,
    about = "Hierarchical transformer for tabular time series"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset: data.csv, schema.json and manifest.json.
    GenData(GenDataArgs),
    /// Masked-token pretraining.
    Pretrain(RunArgs),
    /// Supervised training through `[CLS]`, then evaluation on the test split.
    Finetune(RunArgs),
    /// Evaluate a fine-tuned model and print its metric table.
    Eval(EvalArgs),
    /// Finite-difference check of the gradients.
    GradCheck(GradCheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    #[value(name = "pollution_like")]
    PollutionLike,
    #[value(name = "multitype_transactions")]
    MultitypeTransactions,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub kind: DataKind,
    #[arg(long, default_value_t = 12)]
    pub entities: usize,
    /// Rows per entity (pollution_like).
    #[arg(long, default_value_t = 1000)]
    pub rows: usize,
    /// Mean rows per entity (multitype_transactions).
    #[arg(long, default_value_t = 100)]
    pub mean_length: usize,
    /// Target noise (pollution_like).
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Quantile bins per numerical attribute.
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Regression,
    Binary,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Regression => TaskKind::Regression,
            TaskArg::Binary => TaskKind::Binary,
        }
    }
}

#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Run directory receiving every output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model to start from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Window length; without it each entity is one sample.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            csv: self.csv.clone(),
            schema: self.schema.clone(),
            output_dir: self.out.clone(),
            checkpoint: self.checkpoint.clone(),
            task: self.task.map(Into::into),
            seed: self.seed,
            epochs: self.epochs,
            max_steps: self.max_steps,
            lr: self.lr,
            batch_size: self.batch_size,
            window: self.window,
            checkpoint_every: self.checkpoint_every,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory of a fine-tuning run; its stored report must be
    /// reproduced exactly.
    #[arg(long, conflicts_with_all = ["config", "checkpoint"])]
    pub run: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// One primitive, or `model` for the whole pretraining loss; all when
    /// absent.
    #[arg(long)]
    pub op: Option<String>,
    /// Flip the sign of the analytic gradient; the check must then fail.
    #[arg(long)]
    pub inject_bug: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Outcome of a command that ran to completion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    VerificationFailed,
}

impl Outcome {
    pub fn code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::VerificationFailed => 1,
        }
    }
}

/// Exit code of an error.
pub fn error_code(e: &Error) -> i32 {
    if e.is_usage() {
        2
    } else {
        1
    }
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Finetune(a) => cmd_finetune(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::GradCheck(a) => grad_check(&a),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum AttributeStats {
    Numerical {
        count: usize,
        missing: usize,
        min: f64,
        max: f64,
        mean: f64,
    },
    Categorical {
        count: usize,
        missing: usize,
        distinct: usize,
    },
    Timestamp {
        count: usize,
        missing: usize,
        first: Option<String>,
        last: Option<String>,
    },
}

#[derive(Debug, Serialize)]
struct DataManifest {
    kind: DataKind,
    seed: u64,
    entities: usize,
    rows: usize,
    rows_per_type: BTreeMap<u32, usize>,
    labelled_positive: Option<usize>,
    schema_hash: String,
    attributes: BTreeMap<String, AttributeStats>,
    files: Vec<String>,
}

fn attribute_stats(schema: &Schema, series: &[TimeSeries]) -> Result<BTreeMap<String, AttributeStats>> {
    let mut values: BTreeMap<&str, Vec<&FieldValue>> = BTreeMap::new();
    for s in series {
        for row in &s.rows {
            let rt = schema.row_type(row.type_id)?;
            for (name, v) in rt.attributes.iter().zip(&row.values) {
                values.entry(name).or_default().push(v);
            }
        }
    }
    let mut out = BTreeMap::new();
    for (name, attr) in &schema.attributes {
        let vs = values.get(name.as_str()).map(Vec::as_slice).unwrap_or_default();
        let missing = vs.iter().filter(|v| matches!(v, FieldValue::Missing)).count();
        let count = vs.len() - missing;
        let stats = match &attr.kind {
            AttributeKind::Numerical { .. } => {
                let nums: Vec<f64> = vs
                    .iter()
                    .filter_map(|v| if let FieldValue::Num(x) = v { Some(*x) } else { None })
                    .collect();
                AttributeStats::Numerical {
                    count,
                    missing,
                    min: nums.iter().copied().fold(f64::INFINITY, f64::min),
                    max: nums.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    mean: nums.iter().sum::<f64>() / nums.len().max(1) as f64,
                }
            }
            AttributeKind::Categorical { .. } => {
                let mut seen: Vec<usize> = vs
                    .iter()
                    .filter_map(|v| if let FieldValue::Cat(c) = v { Some(*c) } else { None })
                    .collect();
                seen.sort_unstable();
                seen.dedup();
                AttributeStats::Categorical {
                    count,
                    missing,
                    distinct: seen.len(),
                }
            }
            AttributeKind::Timestamp { .. } => {
                let mut times: Vec<_> = vs
                    .iter()
                    .filter_map(|v| if let FieldValue::Time(t) = v { Some(*t) } else { None })
                    .collect();
                times.sort();
                AttributeStats::Timestamp {
                    count,
                    missing,
                    first: times.first().map(format_timestamp),
                    last: times.last().map(format_timestamp),
                }
            }
        };
        out.insert(name.clone(), stats);
    }
    Ok(out)
}

fn gen_data(a: &GenDataArgs) -> Result<Outcome> {
    let mut rng = seeded(a.seed);
    let (schema, series) = match a.kind {
        DataKind::PollutionLike => {
            let defaults = PollutionConfig::default();
            gen_pollution_like(
                &PollutionConfig {
                    n_entities: a.entities,
                    rows: a.rows,
                    noise: a.noise,
                    bins: a.bins.unwrap_or(defaults.bins),
                },
                &mut rng,
            )?
        }
        DataKind::MultitypeTransactions => {
            let defaults = TransactionsConfig::default();
            gen_multitype_transactions(
                &TransactionsConfig {
                    n_entities: a.entities,
                    mean_length: a.mean_length,
                    bins: a.bins.unwrap_or(defaults.bins),
                    ..defaults
                },
                &mut rng,
            )?
        }
    };
    create_dir(&a.out)?;
    let csv_path = a.out.join("data.csv");
    let file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    write_csv(BufWriter::new(file), &schema, &series)?;
    write_schema(&a.out.join("schema.json"), &schema)?;
    let mut rows_per_type = BTreeMap::new();
    for row in series.iter().flat_map(|s| &s.rows) {
        *rows_per_type.entry(row.type_id).or_insert(0) += 1;
    }
    let labelled = series.iter().any(|s| s.label.is_some());
    let manifest = DataManifest {
        kind: a.kind,
        seed: a.seed,
        entities: series.len(),
        rows: series.iter().map(TimeSeries::len).sum(),
        rows_per_type,
        labelled_positive: labelled.then(|| {
            series
                .iter()
                .filter(|s| s.label.is_some_and(|l| l.as_f64() > 0.5))
                .count()
        }),
        schema_hash: schema_hash(&schema)?,
        attributes: attribute_stats(&schema, &series)?,
        files: vec!["data.csv".into(), "schema.json".into(), "manifest.json".into()],
    };
    write_text(&a.out.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    println!(
        "wrote {} rows of {} entities to {}",
        manifest.rows,
        manifest.entities,
        a.out.display()
    );
    Ok(Outcome::Success)
}

/// Data of a run, split by entity and cut into samples.
pub struct Prepared {
    pub schema: Schema,
    pub train: Vec<WindowedSample>,
    pub test: Vec<WindowedSample>,
}

fn samples(series: &[TimeSeries], window_len: Option<usize>, stride: usize) -> Vec<WindowedSample> {
    match window_len {
        Some(t) => series.iter().flat_map(|s| window(s, t, stride)).collect(),
        None => series.iter().map(WindowedSample::whole).collect(),
    }
}

/// Reads the schema and CSV named by a validated configuration.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let missing = |key: &str| Error::Config(format!("{key} is required"));
    let schema_path = cfg.data.schema.as_deref().ok_or_else(|| missing("data.schema"))?;
    let csv_path = cfg.data.csv.as_deref().ok_or_else(|| missing("data.csv"))?;
    let schema = read_schema(schema_path)?;
    let file = fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let (series, report) = read_csv(std::io::BufReader::new(file), &schema, &CsvColumns::default())?;
    log::info!(
        "read {} rows of {} entities ({} missing, {} unparseable cells)",
        report.rows,
        report.entities,
        report.missing_total(),
        report.unparseable_total()
    );
    let split = split_by_entity(series, cfg.data.test_fraction, cfg.data.split_seed)?;
    let d = &cfg.data;
    Ok(Prepared {
        train: samples(&split.train, d.window, d.train_stride),
        test: samples(&split.test, d.window, d.test_stride),
        schema,
    })
}

/// Loads, resolves and validates a configuration, then creates the run
/// directory holding the resolved copy.
fn resolve_run(args: &RunArgs, needs_task: bool) -> Result<(RunConfig, Prepared)> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let mut cfg = RunConfig::load(args.config.as_deref())?.resolve(env_seed.as_deref(), &args.overrides())?;
    cfg.validate(needs_task)?;
    cfg.absolutize()?;
    let prepared = prepare(&cfg)?;
    cfg.model.n_row_types = prepared.schema.row_types.len();
    if prepared.train.is_empty() {
        return Err(Error::Config("the training split holds no samples".into()));
    }
    create_dir(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join(CONFIG_FILE), &cfg.to_json()?)?;
    Ok((cfg, prepared))
}

fn initial_model(cfg: &RunConfig, schema: &Schema) -> Result<Model> {
    match &cfg.checkpoint {
        Some(path) => Ok(load_checkpoint(path, schema)?.model),
        None => Ok(Model::new(
            cfg.model.clone(),
            schema,
            &mut seeded(derive_seed(cfg.train.seed, INIT_STREAM)),
        )?),
    }
}

fn cmd_pretrain(args: &RunArgs) -> Result<Outcome> {
    let (cfg, data) = resolve_run(args, false)?;
    let mut model = initial_model(&cfg, &data.schema)?;
    let dir = cfg.output_dir.join(CHECKPOINT_DIR);
    create_dir(&dir)?;
    let mut observer = RunObserver {
        log: MetricsLog::create(&cfg.output_dir.join(METRICS_FILE))?,
        checkpoint_dir: dir,
        schema: &data.schema,
        last_checkpoint: None,
    };
    let report = pretrain(&mut model, &data.schema, &data.train, &cfg.train, &mut observer)?;
    observer.log.flush()?;
    let steps = report.losses.len() as u64;
    save_checkpoint(
        &cfg.output_dir.join(MODEL_FILE),
        &data.schema,
        &Snapshot {
            model: &model,
            optimizer: Some(&report.optimizer),
            rng: Some(&report.rng),
            step: steps,
            train: Some(&cfg.train),
        },
    )?;
    let first = report.losses.first().copied().unwrap_or(0.0);
    let last = report.losses.last().copied().unwrap_or(0.0);
    println!(
        "pretrained {steps} steps ({} skipped): loss {first:.4} -> {last:.4}",
        report.skipped
    );
    println!("model written to {}", cfg.output_dir.join(MODEL_FILE).display());
    Ok(Outcome::Success)
}

fn report_json(report: &EvalReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

fn cmd_finetune(args: &RunArgs) -> Result<Outcome> {
    let (cfg, data) = resolve_run(args, true)?;
    let task = cfg.task.ok_or_else(|| Error::Config("task is required".into()))?;
    if data.test.is_empty() {
        return Err(Error::Config(
            "the test split holds no samples; raise data.test_fraction".into(),
        ));
    }
    let mut model = initial_model(&cfg, &data.schema)?;
    let mut observer = RunObserver {
        log: MetricsLog::create(&cfg.output_dir.join(METRICS_FILE))?,
        checkpoint_dir: cfg.output_dir.join(CHECKPOINT_DIR),
        schema: &data.schema,
        last_checkpoint: None,
    };
    if cfg.train.checkpoint_every.is_some() {
        create_dir(&observer.checkpoint_dir)?;
    }
    let report = finetune(&mut model, &data.schema, &data.train, task, &cfg.train, &mut observer)?;
    observer.log.flush()?;
    save_checkpoint(
        &cfg.output_dir.join(MODEL_FILE),
        &data.schema,
        &Snapshot {
            model: &model,
            optimizer: Some(&report.optimizer),
            rng: None,
            step: report.losses.len() as u64,
            train: Some(&cfg.train),
        },
    )?;
    let eval = evaluate(&model, &data.schema, &data.test)?;
    write_text(&cfg.output_dir.join(EVAL_FILE), &report_json(&eval)?)?;
    print!("{}", eval.to_table("test"));
    Ok(Outcome::Success)
}

fn cmd_eval(a: &EvalArgs) -> Result<Outcome> {
    let (config_path, checkpoint, stored) = match (&a.run, &a.config, &a.checkpoint) {
        (Some(run), _, _) => (run.join(CONFIG_FILE), run.join(MODEL_FILE), Some(run.join(EVAL_FILE))),
        (None, Some(c), Some(k)) => (c.clone(), k.clone(), None),
        _ => {
            return Err(Error::Config(
                "give --run DIR, or --config FILE with --checkpoint FILE".into(),
            ))
        }
    };
    if !checkpoint.is_file() {
        return Err(Error::Config(format!(
            "checkpoint {} does not exist",
            checkpoint.display()
        )));
    }
    let cfg = RunConfig::load(Some(&config_path))?;
    cfg.validate(false)?;
    let data = prepare(&cfg)?;
    let model = load_checkpoint(&checkpoint, &data.schema)?.model;
    let report = evaluate(&model, &data.schema, &data.test)?;
    print!("{}", report.to_table("test"));
    if let Some(path) = stored {
        let expected = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        if expected != report_json(&report)? {
            eprintln!("evaluation differs from {}", path.display());
            return Ok(Outcome::VerificationFailed);
        }
        println!("matches {}", path.display());
    }
    Ok(Outcome::Success)
}

fn print_check(r: &CheckResult) {
    println!(
        "{:<12} max rel err {:.3e} (tol {:.0e}) {}",
        r.name,
        r.max_relative_error,
        r.tolerance,
        if r.passed() { "PASS" } else { "FAIL" }
    );
}

fn grad_check(a: &GradCheckArgs) -> Result<Outcome> {
    let names: Vec<&str> = match a.op.as_deref() {
        None => PRIMITIVES.iter().copied().chain([MODEL_CHECK]).collect(),
        Some(op) if op == MODEL_CHECK || PRIMITIVES.contains(&op) => vec![op],
        Some(op) => {
            return Err(Error::Config(format!(
                "unknown op `{op}`; expected `{MODEL_CHECK}` or one of {}",
                PRIMITIVES.join(", ")
            )))
        }
    };
    let mut ok = true;
    for name in names {
        let r = if name == MODEL_CHECK {
            check_model(a.seed, a.inject_bug)?
        } else {
            check_primitive(name, a.seed, a.inject_bug)?
        };
        print_check(&r);
        ok &= r.passed();
    }
    Ok(if ok {
        Outcome::Success
    } else {
        Outcome::VerificationFailed
    })
}
