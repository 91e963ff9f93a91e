//! Command-line front end wiring the library into reproducible experiments.
//!
//! Settings resolve in three layers: explicit flags win, then entries from an
//! optional `key=value` config file, then built-in defaults (including the
//! per-dataset learning-rate presets).

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::TrainedModel;
use crate::dfg::{
    export_dot, mine_dfg, propagation_matrix, write_counts_csv, write_matrix_csv, PropagationKind,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    accuracy_by_stage, aggregate_runs, mae_by_stage, render_report_csv, render_report_text,
    AggregateMetrics, StageMetrics,
};
use crate::eventlog::{chronological_case_split, log_statistics, EventLog, ParseOptions};
use crate::features::build_samples;
use crate::models::{Head, Variant};
use crate::training::{
    parse_summary_csv, run_experiment, write_experiment_artifacts, DatasetTag, DfgScope,
    ExperimentConfig, DEFAULT_MAX_EPOCHS, DEFAULT_PATIENCE, DEFAULT_RUNS, DEFAULT_TRAIN_FRACTION,
    DEFAULT_VALIDATION_FRACTION,
};

/// Environment variable naming the default output root (fallback `./runs`).
pub const OUT_ROOT_ENV: &str = "FLOWCAST_OUT";

#[derive(Parser)]
#[command(
    name = "flowcast",
    version,
    about = "Predict next activities and times in business-process event logs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Event-log file (delimited text with a header row)
    #[arg(long)]
    data: PathBuf,
    /// Header name of the case-id column
    #[arg(long, default_value = crate::eventlog::DEFAULT_CASE_COLUMN)]
    case_column: String,
    /// Header name of the activity column
    #[arg(long, default_value = crate::eventlog::DEFAULT_ACTIVITY_COLUMN)]
    activity_column: String,
    /// Header name of the timestamp column
    #[arg(long, default_value = crate::eventlog::DEFAULT_TIMESTAMP_COLUMN)]
    timestamp_column: String,
    /// Timestamp pattern (chrono strftime syntax)
    #[arg(long, default_value = crate::eventlog::DEFAULT_TIMESTAMP_FORMAT)]
    timestamp_format: String,
    /// Field delimiter
    #[arg(long, default_value_t = ',')]
    delimiter: char,
}

impl DataArgs {
    fn parse_options(&self) -> Result<ParseOptions> {
        if !self.delimiter.is_ascii() {
            return Err(Error::Usage(format!(
                "delimiter must be an ASCII character, got `{}`",
                self.delimiter
            )));
        }
        Ok(ParseOptions {
            delimiter: self.delimiter as u8,
            case_column: self.case_column.clone(),
            activity_column: self.activity_column.clone(),
            timestamp_column: self.timestamp_column.clone(),
            timestamp_format: self.timestamp_format.clone(),
        })
    }

    fn load(&self) -> Result<EventLog> {
        EventLog::from_path(&self.data, &self.parse_options()?)
    }
}

/// Training knobs shared by `train` and `reproduce`. Every option is layered:
/// flag over config-file entry over default.
#[derive(Args)]
struct TuningArgs {
    /// key=value defaults file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Learning rate (default: dataset preset)
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Epoch budget
    #[arg(long)]
    epochs: Option<usize>,
    /// Early-stopping patience (epochs without validation improvement)
    #[arg(long)]
    patience: Option<usize>,
    /// Dropout rate at both dropout sites
    #[arg(long)]
    dropout: Option<f64>,
    /// Hidden layer widths, e.g. 64,32
    #[arg(long)]
    hidden_dims: Option<String>,
    /// Base seed; run r uses seed base+r
    #[arg(long)]
    seed: Option<u64>,
    /// Runs per experiment
    #[arg(long)]
    runs: Option<usize>,
    /// Chronological train fraction (decimal or a/b)
    #[arg(long)]
    train_fraction: Option<String>,
    /// Validation fraction drawn from the training cases each run
    #[arg(long)]
    validation_fraction: Option<f64>,
    /// Mine the graph from `all` rows or the `train` split only
    #[arg(long)]
    dfg_scope: Option<String>,
    /// Output root (default: $FLOWCAST_OUT or ./runs)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print dataset statistics (events, cases, activity types, means)
    Stats {
        #[command(flatten)]
        data: DataArgs,
        /// Also write the statistics as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Mine the directly-follows graph; write DOT and optionally the matrices
    MineDfg {
        #[command(flatten)]
        data: DataArgs,
        /// DOT output file (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for edge counts and the four normalized matrices
        #[arg(long)]
        matrices_out: Option<PathBuf>,
    },
    /// Train one variant/head pair and evaluate it on the held-out test split
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Model variant: gcn-w | gcn-b | gcn-lb | gcn-lw | mlp
        #[arg(long)]
        variant: String,
        /// Prediction head: event | time
        #[arg(long)]
        head: String,
        /// Dataset preset: helpdesk | bpi12w | custom
        #[arg(long)]
        dataset_tag: Option<String>,
        #[command(flatten)]
        tuning: TuningArgs,
    },
    /// Score an existing checkpoint on a dataset's test split
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint file written by train/reproduce
        #[arg(long)]
        checkpoint: PathBuf,
        /// Chronological train fraction used to carve the test split
        #[arg(long)]
        train_fraction: Option<String>,
        /// Write the stage metrics as CSV into this directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render report tables from stored experiment summaries
    Report {
        /// Dataset directory containing <variant>-<head>/summary.csv trees
        #[arg(long)]
        runs_dir: PathBuf,
        /// Where to write report files (default: the runs directory)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run all 5 variants x 2 heads x N runs and emit the report tables
    Reproduce {
        #[command(flatten)]
        data: DataArgs,
        /// Dataset preset: helpdesk | bpi12w | custom
        #[arg(long)]
        dataset: String,
        /// Parallel experiments
        #[arg(long)]
        jobs: Option<usize>,
        #[command(flatten)]
        tuning: TuningArgs,
    },
}

/// Entry point used by the binary; returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Stats { data, csv } => run_stats(&data, csv.as_deref()),
        Command::MineDfg {
            data,
            out,
            matrices_out,
        } => run_mine_dfg(&data, out.as_deref(), matrices_out.as_deref()),
        Command::Train {
            data,
            variant,
            head,
            dataset_tag,
            tuning,
        } => run_train(&data, &variant, &head, dataset_tag.as_deref(), &tuning),
        Command::Evaluate {
            data,
            checkpoint,
            train_fraction,
            out,
        } => run_evaluate(
            &data,
            &checkpoint,
            train_fraction.as_deref(),
            out.as_deref(),
        ),
        Command::Report { runs_dir, out } => run_report(&runs_dir, out.as_deref()),
        Command::Reproduce {
            data,
            dataset,
            jobs,
            tuning,
        } => run_reproduce(&data, &dataset, jobs, &tuning),
    }
}

fn run_stats(data: &DataArgs, csv: Option<&Path>) -> Result<()> {
    let log = data.load()?;
    let stats = log_statistics(&log)?;
    print!("{}", stats.text_table());
    if let Some(path) = csv {
        std::fs::write(path, stats.csv()).map_err(|e| Error::file(path, e))?;
    }
    Ok(())
}

fn run_mine_dfg(data: &DataArgs, out: Option<&Path>, matrices_out: Option<&Path>) -> Result<()> {
    let log = data.load()?;
    let dfg = mine_dfg(&log)?;
    let dot = export_dot(&dfg, &log.alphabet);
    match out {
        Some(path) => std::fs::write(path, dot).map_err(|e| Error::file(path, e))?,
        None => print!("{dot}"),
    }
    if let Some(dir) = matrices_out {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let counts_path = dir.join("edge_counts.csv");
        let mut counts = Vec::new();
        write_counts_csv(&dfg.edge_counts, &mut counts)?;
        std::fs::write(&counts_path, counts).map_err(|e| Error::file(&counts_path, e))?;
        let kinds = [
            (PropagationKind::Weighted, "propagation_weighted.csv"),
            (PropagationKind::Binary, "propagation_binary.csv"),
            (
                PropagationKind::LaplacianWeighted,
                "propagation_laplacian_weighted.csv",
            ),
            (
                PropagationKind::LaplacianBinary,
                "propagation_laplacian_binary.csv",
            ),
        ];
        for (kind, name) in kinds {
            let matrix = propagation_matrix(&dfg, kind)?;
            let mut buffer = Vec::new();
            write_matrix_csv(&matrix.matrix, &mut buffer)?;
            let path = dir.join(name);
            std::fs::write(&path, buffer).map_err(|e| Error::file(&path, e))?;
        }
    }
    Ok(())
}

/// Config-file layer: `key=value` lines, `#` comments, unknown keys rejected.
struct Settings {
    entries: HashMap<String, String>,
}

const KNOWN_KEYS: [&str; 12] = [
    "learning-rate",
    "epochs",
    "patience",
    "dropout",
    "hidden-dims",
    "seed",
    "runs",
    "train-fraction",
    "validation-fraction",
    "dfg-scope",
    "dataset-tag",
    "out",
];

impl Settings {
    fn load(path: Option<&Path>) -> Result<Settings> {
        let mut entries = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
            for (number, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    return Err(Error::Usage(format!(
                        "{}:{}: expected key=value, got `{line}`",
                        path.display(),
                        number + 1
                    )));
                };
                let key = key.trim().to_string();
                if !KNOWN_KEYS.contains(&key.as_str()) {
                    return Err(Error::Usage(format!(
                        "{}:{}: unknown setting `{key}`",
                        path.display(),
                        number + 1
                    )));
                }
                entries.insert(key, value.trim().to_string());
            }
        }
        Ok(Settings { entries })
    }

    /// Flag value if set, else the config-file entry, else the default.
    fn resolve<V: Clone, E: std::fmt::Display>(
        &self,
        key: &str,
        flag: Option<V>,
        parse: impl Fn(&str) -> std::result::Result<V, E>,
        default: V,
    ) -> Result<V> {
        if let Some(value) = flag {
            return Ok(value);
        }
        match self.entries.get(key) {
            Some(raw) => parse(raw).map_err(|e| Error::Usage(format!("setting `{key}`: {e}"))),
            None => Ok(default),
        }
    }
}

fn parse_fraction(text: &str) -> std::result::Result<f64, String> {
    let value = if let Some((numerator, denominator)) = text.split_once('/') {
        let n: f64 = numerator
            .trim()
            .parse()
            .map_err(|e| format!("bad numerator `{numerator}`: {e}"))?;
        let d: f64 = denominator
            .trim()
            .parse()
            .map_err(|e| format!("bad denominator `{denominator}`: {e}"))?;
        if d == 0.0 {
            return Err("fraction denominator is zero".to_string());
        }
        n / d
    } else {
        text.parse()
            .map_err(|e| format!("bad fraction `{text}`: {e}"))?
    };
    if !(value > 0.0 && value < 1.0) {
        return Err(format!("fraction must be in (0, 1), got {value}"));
    }
    Ok(value)
}

fn parse_hidden_dims(text: &str) -> std::result::Result<(usize, usize), String> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(format!("expected two widths like 64,32 got `{text}`"));
    }
    let first = parts[0]
        .parse()
        .map_err(|e| format!("bad width `{}`: {e}", parts[0]))?;
    let second = parts[1]
        .parse()
        .map_err(|e| format!("bad width `{}`: {e}", parts[1]))?;
    if first == 0 || second == 0 {
        return Err("hidden widths must be at least 1".to_string());
    }
    Ok((first, second))
}

struct ResolvedTuning {
    experiment: ExperimentConfig,
    out_root: PathBuf,
}

fn resolve_tuning(
    tuning: &TuningArgs,
    dataset: DatasetTag,
    variant: Variant,
    head: Head,
    default_runs: usize,
) -> Result<ResolvedTuning> {
    let settings = Settings::load(tuning.config.as_deref())?;
    let mut experiment = ExperimentConfig::new(dataset, variant, head);
    experiment.learning_rate = match tuning.learning_rate {
        Some(lr) => Some(lr),
        None => settings
            .resolve("learning-rate", None, |s| s.parse::<f64>(), f64::NAN)
            .map(|v| if v.is_nan() { None } else { Some(v) })?,
    };
    experiment.max_epochs = settings.resolve(
        "epochs",
        tuning.epochs,
        |s| s.parse::<usize>(),
        DEFAULT_MAX_EPOCHS,
    )?;
    experiment.patience = settings.resolve(
        "patience",
        tuning.patience,
        |s| s.parse::<usize>(),
        DEFAULT_PATIENCE,
    )?;
    experiment.dropout_rate = settings.resolve(
        "dropout",
        tuning.dropout,
        |s| s.parse::<f64>(),
        crate::models::DEFAULT_DROPOUT_RATE,
    )?;
    experiment.hidden_dims = settings.resolve(
        "hidden-dims",
        tuning
            .hidden_dims
            .as_deref()
            .map(parse_hidden_dims)
            .transpose()
            .map_err(Error::Usage)?,
        parse_hidden_dims,
        crate::models::DEFAULT_HIDDEN_DIMS,
    )?;
    experiment.base_seed = settings.resolve("seed", tuning.seed, |s| s.parse::<u64>(), 0)?;
    experiment.n_runs =
        settings.resolve("runs", tuning.runs, |s| s.parse::<usize>(), default_runs)?;
    experiment.train_fraction = settings.resolve(
        "train-fraction",
        tuning
            .train_fraction
            .as_deref()
            .map(parse_fraction)
            .transpose()
            .map_err(Error::Usage)?,
        parse_fraction,
        DEFAULT_TRAIN_FRACTION,
    )?;
    experiment.validation_fraction = settings.resolve(
        "validation-fraction",
        tuning.validation_fraction,
        |s| s.parse::<f64>(),
        DEFAULT_VALIDATION_FRACTION,
    )?;
    experiment.dfg_scope = settings.resolve(
        "dfg-scope",
        tuning
            .dfg_scope
            .as_deref()
            .map(DfgScope::parse)
            .transpose()?,
        |s| DfgScope::parse(s).map_err(|e| e.to_string()),
        DfgScope::All,
    )?;

    let out_root = settings.resolve(
        "out",
        tuning.out.clone(),
        |s| Ok::<PathBuf, std::convert::Infallible>(PathBuf::from(s)),
        std::env::var_os(OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs")),
    )?;

    Ok(ResolvedTuning {
        experiment,
        out_root,
    })
}

/// Dataset label used for run directories and report file names.
fn dataset_name(tag: DatasetTag, data_path: &Path) -> String {
    match tag {
        DatasetTag::Custom => data_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".to_string()),
        other => other.token().to_string(),
    }
}

fn run_train(
    data: &DataArgs,
    variant: &str,
    head: &str,
    dataset_tag: Option<&str>,
    tuning: &TuningArgs,
) -> Result<()> {
    let variant = Variant::parse(variant)?;
    let head = Head::parse(head)?;
    let settings = Settings::load(tuning.config.as_deref())?;
    let tag = settings.resolve(
        "dataset-tag",
        dataset_tag.map(DatasetTag::parse).transpose()?,
        |s| DatasetTag::parse(s).map_err(|e| e.to_string()),
        DatasetTag::Custom,
    )?;
    let resolved = resolve_tuning(tuning, tag, variant, head, 1)?;

    let log = data.load()?;
    let result = run_experiment(&log, &resolved.experiment)?;
    let name = dataset_name(tag, &data.data);
    let experiment_dir = write_experiment_artifacts(&resolved.out_root, &name, &result)?;

    let rows = vec![(variant, result.aggregate.clone())];
    print!("{}", render_report_text(&name, &rows, true));
    println!("artifacts: {}", experiment_dir.display());
    Ok(())
}

fn run_evaluate(
    data: &DataArgs,
    checkpoint: &Path,
    train_fraction: Option<&str>,
    out: Option<&Path>,
) -> Result<()> {
    let trained = TrainedModel::load(checkpoint)?;
    let log = data.load()?;
    if log.num_nodes() != trained.model.config.num_nodes {
        return Err(Error::Shape(format!(
            "checkpoint was trained on {} activity types, log has {}",
            trained.model.config.num_nodes,
            log.num_nodes()
        )));
    }
    let fraction = train_fraction
        .map(parse_fraction)
        .transpose()
        .map_err(Error::Usage)?
        .unwrap_or(DEFAULT_TRAIN_FRACTION);
    let (_, test_log) = chronological_case_split(&log, fraction)?;
    let test_samples = build_samples(&test_log, &trained.scaling)?;
    let metrics = match trained.model.config.head {
        Head::Event => accuracy_by_stage(&trained, &test_samples)?,
        Head::Time => mae_by_stage(&trained, &test_samples)?,
    };

    let aggregate = aggregate_runs(std::slice::from_ref(&metrics))?;
    let rows = vec![(trained.model.config.variant, aggregate)];
    let name = dataset_name(DatasetTag::Custom, &data.data);
    print!("{}", render_report_text(&name, &rows, false));
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let path = dir.join("metrics.csv");
        let content = format!("{}\n{}\n", StageMetrics::csv_header(), metrics.csv_row());
        std::fs::write(&path, content).map_err(|e| Error::file(&path, e))?;
    }
    Ok(())
}

fn run_report(runs_dir: &Path, out: Option<&Path>) -> Result<()> {
    let mut rows: Vec<crate::training::SummaryRow> = Vec::new();
    let entries = std::fs::read_dir(runs_dir).map_err(|e| Error::file(runs_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::file(runs_dir, e))?;
        let summary_path = entry.path().join("summary.csv");
        if summary_path.is_file() {
            let text = std::fs::read_to_string(&summary_path)
                .map_err(|e| Error::file(&summary_path, e))?;
            rows.push(parse_summary_csv(&text)?);
        }
    }
    if rows.is_empty() {
        return Err(Error::Usage(format!(
            "no <variant>-<head>/summary.csv files under {}",
            runs_dir.display()
        )));
    }
    let dataset = rows[0].dataset.clone();
    let out_dir = out.unwrap_or(runs_dir);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    write_reports(out_dir, &dataset, &rows, true)
}

/// Renders and writes `report_<dataset>_<head>.{txt,csv}` for every head
/// present; rows are ordered by the canonical variant order.
fn write_reports(
    out_dir: &Path,
    dataset: &str,
    rows: &[crate::training::SummaryRow],
    print: bool,
) -> Result<()> {
    for head in Head::all() {
        let mut table: Vec<(Variant, AggregateMetrics)> = Vec::new();
        for variant in Variant::all() {
            if let Some(row) = rows.iter().find(|r| r.head == head && r.variant == variant) {
                table.push((variant, row.aggregate.clone()));
            }
        }
        if table.is_empty() {
            continue;
        }
        let text = render_report_text(dataset, &table, false);
        let csv = render_report_csv(dataset, &table);
        let text_path = out_dir.join(format!("report_{dataset}_{}.txt", head.token()));
        let csv_path = out_dir.join(format!("report_{dataset}_{}.csv", head.token()));
        std::fs::write(&text_path, &text).map_err(|e| Error::file(&text_path, e))?;
        std::fs::write(&csv_path, &csv).map_err(|e| Error::file(&csv_path, e))?;
        if print {
            println!("{text}");
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    crate_version: String,
    dataset: String,
    data_file: String,
    data_sha256: String,
    case_column: String,
    activity_column: String,
    timestamp_column: String,
    timestamp_format: String,
    delimiter: char,
    n_runs: usize,
    base_seed: u64,
    run_seeds: Vec<u64>,
    max_epochs: usize,
    patience: usize,
    hidden_dims: (usize, usize),
    dropout_rate: f64,
    train_fraction: f64,
    validation_fraction: f64,
    dfg_scope: String,
    learning_rates: Vec<(String, f64)>,
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn run_reproduce(
    data: &DataArgs,
    dataset: &str,
    jobs: Option<usize>,
    tuning: &TuningArgs,
) -> Result<()> {
    let tag = DatasetTag::parse(dataset)?;
    let log = data.load()?;
    let name = dataset_name(tag, &data.data);

    // One experiment per (variant, head); resolve_tuning is cheap, so the
    // settings file is simply re-read per pair.
    let mut experiments: Vec<ExperimentConfig> = Vec::new();
    let mut out_root = PathBuf::new();
    for variant in Variant::all() {
        for head in Head::all() {
            let resolved = resolve_tuning(tuning, tag, variant, head, DEFAULT_RUNS)?;
            out_root = resolved.out_root;
            experiments.push(resolved.experiment);
        }
    }

    // Experiments with a summary on disk are treated as done, so an
    // interrupted grid resumes where it stopped.
    let mut rows = Vec::new();
    let mut pending = Vec::new();
    for experiment in experiments.iter() {
        let summary_path = out_root.join(&name).join(format!(
            "{}-{}/summary.csv",
            experiment.variant.token(),
            experiment.head.token()
        ));
        if summary_path.is_file() {
            let text = std::fs::read_to_string(&summary_path)
                .map_err(|e| Error::file(&summary_path, e))?;
            println!(
                "{}-{}: already complete, skipping",
                experiment.variant.token(),
                experiment.head.token()
            );
            rows.push(parse_summary_csv(&text)?);
        } else {
            pending.push(experiment.clone());
        }
    }

    let jobs = jobs.unwrap_or(1).max(1);
    rows.extend(run_parallel(&log, &pending, jobs, &out_root, &name)?);
    rows.sort_by_key(|r| {
        let variant = Variant::all().iter().position(|&v| v == r.variant);
        let head = Head::all().iter().position(|&h| h == r.head);
        (variant, head)
    });

    let dataset_dir = out_root.join(&name);
    std::fs::create_dir_all(&dataset_dir).map_err(|e| Error::file(&dataset_dir, e))?;
    write_reports(&dataset_dir, &name, &rows, true)?;

    let first = &experiments[0];
    let manifest = Manifest {
        command: "reproduce".to_string(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        dataset: name.clone(),
        data_file: data.data.display().to_string(),
        data_sha256: sha256_hex(&data.data)?,
        case_column: data.case_column.clone(),
        activity_column: data.activity_column.clone(),
        timestamp_column: data.timestamp_column.clone(),
        timestamp_format: data.timestamp_format.clone(),
        delimiter: data.delimiter,
        n_runs: first.n_runs,
        base_seed: first.base_seed,
        run_seeds: (1..=first.n_runs)
            .map(|r| first.base_seed + r as u64)
            .collect(),
        max_epochs: first.max_epochs,
        patience: first.patience,
        hidden_dims: first.hidden_dims,
        dropout_rate: first.dropout_rate,
        train_fraction: first.train_fraction,
        validation_fraction: first.validation_fraction,
        dfg_scope: first.dfg_scope.token().to_string(),
        learning_rates: experiments
            .iter()
            .map(|e| {
                (
                    format!("{}-{}", e.variant.token(), e.head.token()),
                    e.effective_learning_rate(),
                )
            })
            .collect(),
    };
    let manifest_path = dataset_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("cannot serialize manifest: {e}")))?;
    std::fs::write(&manifest_path, json).map_err(|e| Error::file(&manifest_path, e))?;
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

/// Runs one experiment and persists its run directory immediately, so an
/// interrupted grid leaves every finished experiment on disk.
fn run_and_write(
    log: &EventLog,
    config: &ExperimentConfig,
    out_root: &Path,
    name: &str,
) -> Result<crate::training::SummaryRow> {
    let result = run_experiment(log, config)?;
    write_experiment_artifacts(out_root, name, &result)?;
    println!(
        "{}-{}: done ({} = {:.4})",
        config.variant.token(),
        config.head.token(),
        result.aggregate.kind.token(),
        result.aggregate.overall.mean.unwrap_or(f64::NAN)
    );
    Ok(crate::training::SummaryRow {
        dataset: name.to_string(),
        variant: config.variant,
        head: config.head,
        aggregate: result.aggregate,
    })
}

/// Runs the experiments over a fixed-size worker pool. Each experiment is
/// internally seeded and writes to its own directory, so the schedule cannot
/// affect any output.
fn run_parallel(
    log: &EventLog,
    experiments: &[ExperimentConfig],
    jobs: usize,
    out_root: &Path,
    name: &str,
) -> Result<Vec<crate::training::SummaryRow>> {
    if jobs == 1 || experiments.len() <= 1 {
        return experiments
            .iter()
            .map(|c| run_and_write(log, c, out_root, name))
            .collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<crate::training::SummaryRow>>>> =
        experiments.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(experiments.len()) {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::Relaxed);
                if index >= experiments.len() {
                    break;
                }
                let row = run_and_write(log, &experiments[index], out_root, name);
                *slots[index].lock().unwrap() = Some(row);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .unwrap()
                .expect("worker filled every slot")
        })
        .collect()
}
