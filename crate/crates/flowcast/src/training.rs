//! Training protocol: single-sample Adam updates, per-epoch validation with
//! best-checkpoint selection and early stopping, and multi-run experiments
//! with aggregated metrics.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{TrainedModel, CHECKPOINT_FORMAT_VERSION};
use crate::dfg::mine_dfg;
use crate::error::{Error, Result};
use crate::evaluation::{
    accuracy_by_stage, aggregate_runs, mae_by_stage, AggregateMetrics, StageMetrics,
};
use crate::eventlog::{chronological_case_split, sample_validation_split, EventLog};
use crate::features::{build_samples, fit_feature_scaling, FeatureScaling, Sample};
use crate::models::{build_model, Head, Model, ModelConfig, Variant};
use crate::neuralnet::{compute_loss, AdamHyper, AdamState, Network, Target};

pub const DEFAULT_MAX_EPOCHS: usize = 150;
pub const DEFAULT_PATIENCE: usize = 20;
pub const DEFAULT_TRAIN_FRACTION: f64 = 2.0 / 3.0;
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.2;
pub const DEFAULT_RUNS: usize = 5;

/// Dataset preset selector for the shipped per-variant learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetTag {
    Helpdesk,
    Bpi12w,
    Custom,
}

impl DatasetTag {
    pub fn token(self) -> &'static str {
        match self {
            DatasetTag::Helpdesk => "helpdesk",
            DatasetTag::Bpi12w => "bpi12w",
            DatasetTag::Custom => "custom",
        }
    }

    pub fn parse(token: &str) -> Result<DatasetTag> {
        match token {
            "helpdesk" => Ok(DatasetTag::Helpdesk),
            "bpi12w" => Ok(DatasetTag::Bpi12w),
            "custom" => Ok(DatasetTag::Custom),
            other => Err(Error::Usage(format!(
                "unknown dataset tag `{other}` (expected helpdesk | bpi12w | custom)"
            ))),
        }
    }
}

impl std::fmt::Display for DatasetTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.token())
    }
}

/// Tuned learning rate for a dataset/variant/head combination.
pub fn preset_learning_rate(dataset: DatasetTag, variant: Variant, head: Head) -> f64 {
    match dataset {
        DatasetTag::Helpdesk => match (variant, head) {
            (Variant::Mlp, _) => 1e-4,
            (_, Head::Time) => 1e-3,
            (Variant::GcnLw, Head::Event) => 1e-3,
            (_, Head::Event) => 1e-4,
        },
        DatasetTag::Bpi12w => match (variant, head) {
            (Variant::GcnB | Variant::Mlp, Head::Event) => 1e-5,
            _ => 1e-4,
        },
        DatasetTag::Custom => 1e-3,
    }
}

/// Knobs for one training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub shuffle_each_epoch: bool,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate,
            max_epochs: DEFAULT_MAX_EPOCHS,
            patience: DEFAULT_PATIENCE,
            seed,
            shuffle_each_epoch: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Parameter(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.max_epochs == 0 || self.patience > self.max_epochs {
            return Err(Error::Parameter(format!(
                "need 0 < patience <= max_epochs, got patience {} and max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// Per-epoch losses of a run; `best_epoch` is 1-based and points at the
/// first epoch reaching the minimal validation loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub best_epoch: usize,
    pub wall_seconds: f64,
}

impl TrainHistory {
    pub fn n_epochs(&self) -> usize {
        self.train_loss.len()
    }

    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(writer, "epoch,train_loss,validation_loss")?;
        for (i, (train, validation)) in self
            .train_loss
            .iter()
            .zip(self.validation_loss.iter())
            .enumerate()
        {
            writeln!(writer, "{},{},{}", i + 1, train, validation)?;
        }
        Ok(())
    }
}

/// Samples paired with their targets under a given head; samples without a
/// target under that head (end-of-case for the time head) are dropped.
fn targeted<'a>(
    model: &Model,
    samples: &'a [Sample],
    scaling: &FeatureScaling,
) -> Vec<(&'a Sample, Target)> {
    samples
        .iter()
        .filter_map(|s| model.target_for(s, scaling).map(|t| (s, t)))
        .collect()
}

fn mean_loss(
    network: &Network,
    set: &[(&Sample, Target)],
    kind: crate::neuralnet::LossKind,
) -> Result<f64> {
    let mut total = 0.0;
    for (sample, target) in set {
        let output = network.forward(sample.features.view(), None)?;
        total += compute_loss(&output, target, kind)?;
    }
    Ok(total / set.len() as f64)
}

/// Mean loss of a model over the samples it has targets for, dropout off.
/// Reproduces the loss recorded at checkpoint time bit-for-bit.
pub fn validation_loss(model: &Model, samples: &[Sample], scaling: &FeatureScaling) -> Result<f64> {
    let set = targeted(model, samples, scaling);
    if set.is_empty() {
        return Err(Error::Split(
            "no samples with a defined target for this head".to_string(),
        ));
    }
    mean_loss(&model.network, &set, model.config.loss_kind())
}

/// Trains with single-sample Adam updates (order reshuffled per epoch),
/// validates after each epoch with dropout off, keeps the parameters of the
/// best validation loss, and stops early after `patience` epochs without
/// improvement.
pub fn train_single(
    model: Model,
    train: &[Sample],
    validation: &[Sample],
    scaling: &FeatureScaling,
    config: &TrainConfig,
) -> Result<(TrainedModel, TrainHistory)> {
    config.validate()?;
    let loss_kind = model.config.loss_kind();
    let train_set = targeted(&model, train, scaling);
    let validation_set = targeted(&model, validation, scaling);
    if train_set.is_empty() || validation_set.is_empty() {
        return Err(Error::Split(
            "training and validation sets must both contain targeted samples".to_string(),
        ));
    }

    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut network = model.network;
    let mut adam = AdamState::new(
        &network,
        AdamHyper::with_learning_rate(config.learning_rate),
    );

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory {
        train_loss: Vec::new(),
        validation_loss: Vec::new(),
        best_epoch: 0,
        wall_seconds: 0.0,
    };
    let mut best_loss = f64::INFINITY;
    let mut best_network = network.clone();

    for epoch in 1..=config.max_epochs {
        if config.shuffle_each_epoch {
            order.shuffle(&mut rng);
        }
        let mut epoch_total = 0.0;
        for &i in &order {
            let (sample, target) = &train_set[i];
            let trace = network.forward_trace(sample.features.view(), Some(&mut rng))?;
            let loss = compute_loss(&trace.output, target, loss_kind)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}, case {} position {}",
                    sample.case_id, sample.position
                )));
            }
            epoch_total += loss;
            let grads = network.compute_gradients(&trace, target, loss_kind)?;
            adam.update(&mut network, &grads).map_err(|_| {
                Error::Numeric(format!(
                    "non-finite gradient at epoch {epoch}, case {} position {}",
                    sample.case_id, sample.position
                ))
            })?;
        }
        history
            .train_loss
            .push(epoch_total / train_set.len() as f64);

        let validation_loss = mean_loss(&network, &validation_set, loss_kind)?;
        if !validation_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        history.validation_loss.push(validation_loss);

        if validation_loss < best_loss {
            best_loss = validation_loss;
            history.best_epoch = epoch;
            best_network = network.clone();
        }
        if epoch - history.best_epoch >= config.patience {
            break;
        }
    }

    history.wall_seconds = started.elapsed().as_secs_f64();
    let trained = TrainedModel {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model: Model {
            config: model.config,
            network: best_network,
        },
        scaling: scaling.clone(),
        seed: config.seed,
        best_validation_loss: best_loss,
        best_epoch: history.best_epoch,
    };
    Ok((trained, history))
}

/// Whether the directly-follows graph is mined from the full log or from the
/// training split only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DfgScope {
    All,
    Train,
}

impl DfgScope {
    pub fn token(self) -> &'static str {
        match self {
            DfgScope::All => "all",
            DfgScope::Train => "train",
        }
    }

    pub fn parse(token: &str) -> Result<DfgScope> {
        match token {
            "all" => Ok(DfgScope::All),
            "train" => Ok(DfgScope::Train),
            other => Err(Error::Usage(format!(
                "unknown dfg scope `{other}` (expected all | train)"
            ))),
        }
    }
}

/// Everything needed to run one (variant, head) experiment end to end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetTag,
    pub variant: Variant,
    pub head: Head,
    /// Overrides the dataset preset when set.
    pub learning_rate: Option<f64>,
    pub max_epochs: usize,
    pub patience: usize,
    pub base_seed: u64,
    pub n_runs: usize,
    pub hidden_dims: (usize, usize),
    pub dropout_rate: f64,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub dfg_scope: DfgScope,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetTag, variant: Variant, head: Head) -> ExperimentConfig {
        ExperimentConfig {
            dataset,
            variant,
            head,
            learning_rate: None,
            max_epochs: DEFAULT_MAX_EPOCHS,
            patience: DEFAULT_PATIENCE,
            base_seed: 0,
            n_runs: DEFAULT_RUNS,
            hidden_dims: crate::models::DEFAULT_HIDDEN_DIMS,
            dropout_rate: crate::models::DEFAULT_DROPOUT_RATE,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
            dfg_scope: DfgScope::All,
        }
    }

    pub fn effective_learning_rate(&self) -> f64 {
        self.learning_rate
            .unwrap_or_else(|| preset_learning_rate(self.dataset, self.variant, self.head))
    }
}

/// Artifacts of one run within an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub trained: TrainedModel,
    pub history: TrainHistory,
    pub metrics: StageMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub runs: Vec<RunResult>,
    pub aggregate: AggregateMetrics,
}

/// Runs `n_runs` seeded trainings of one variant/head pair and evaluates each
/// best checkpoint on the held-out chronological test split.
///
/// Per run `r`, the seed is `base_seed + r`; it drives the validation draw,
/// the parameter initialization and the shuffle/dropout stream. The test
/// samples are only materialized after every run has finished training.
pub fn run_experiment(log: &EventLog, config: &ExperimentConfig) -> Result<ExperimentResult> {
    if config.n_runs == 0 {
        return Err(Error::Parameter("n_runs must be at least 1".to_string()));
    }
    let (train_log, test_log) = chronological_case_split(log, config.train_fraction)?;
    let dfg = match config.dfg_scope {
        DfgScope::All => mine_dfg(log)?,
        DfgScope::Train => mine_dfg(&train_log)?,
    };
    let scaling = fit_feature_scaling(&train_log);
    let model_config = ModelConfig {
        variant: config.variant,
        head: config.head,
        num_nodes: log.num_nodes(),
        hidden_dims: config.hidden_dims,
        dropout_rate: config.dropout_rate,
    };
    let learning_rate = config.effective_learning_rate();

    let mut trained_runs = Vec::with_capacity(config.n_runs);
    for run in 1..=config.n_runs {
        let seed = config.base_seed + run as u64;
        let (effective_train, validation) =
            sample_validation_split(&train_log, config.validation_fraction, seed)?;
        let train_samples = build_samples(&effective_train, &scaling)?;
        let validation_samples = build_samples(&validation, &scaling)?;
        let graph = if config.variant == Variant::Mlp {
            None
        } else {
            Some(&dfg)
        };
        let model = build_model(&model_config, graph, seed)?;
        let train_config = TrainConfig {
            learning_rate,
            max_epochs: config.max_epochs,
            patience: config.patience,
            seed,
            shuffle_each_epoch: true,
        };
        let (trained, history) = train_single(
            model,
            &train_samples,
            &validation_samples,
            &scaling,
            &train_config,
        )?;
        trained_runs.push((run, seed, trained, history));
    }

    // The test split is only touched now, after all training has finished.
    let test_samples = build_samples(&test_log, &scaling)?;
    let mut runs = Vec::with_capacity(config.n_runs);
    for (run, seed, trained, history) in trained_runs {
        let metrics = match config.head {
            Head::Event => accuracy_by_stage(&trained, &test_samples)?,
            Head::Time => mae_by_stage(&trained, &test_samples)?,
        };
        runs.push(RunResult {
            run,
            seed,
            trained,
            history,
            metrics,
        });
    }

    let aggregate = aggregate_runs(&runs.iter().map(|r| r.metrics.clone()).collect::<Vec<_>>())?;
    Ok(ExperimentResult {
        config: config.clone(),
        runs,
        aggregate,
    })
}

/// Serialized summary of an experiment: configuration echo plus the
/// aggregated per-cell means and standard deviations.
pub fn summary_csv(dataset_name: &str, result: &ExperimentResult) -> String {
    let mut out = summary_csv_header();
    out.push('\n');
    out.push_str(&format!(
        "{dataset_name},{},{},{},{},{},{}",
        result.config.variant.token(),
        result.config.head.token(),
        result.aggregate.kind.token(),
        result.aggregate.n_runs,
        result.config.effective_learning_rate(),
        result.config.base_seed,
    ));
    let cells = result.aggregate.cells();
    for cell in cells {
        out.push(',');
        if let Some(mean) = cell.mean {
            out.push_str(&mean.to_string());
        }
    }
    for cell in cells {
        out.push(',');
        if let Some(sd) = cell.sd {
            out.push_str(&sd.to_string());
        }
    }
    for cell in cells {
        out.push_str(&format!(",{}", cell.count));
    }
    out.push('\n');
    out
}

/// Row parsed back from a `summary.csv`, enough to re-render report tables.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub dataset: String,
    pub variant: Variant,
    pub head: Head,
    pub aggregate: AggregateMetrics,
}

/// Parses the output of [`summary_csv`].
pub fn parse_summary_csv(text: &str) -> Result<SummaryRow> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parameter("summary is empty".to_string()))?;
    let expected = summary_csv_header();
    if header != expected {
        return Err(Error::Parameter(format!(
            "unexpected summary header `{header}`"
        )));
    }
    let row = lines
        .next()
        .ok_or_else(|| Error::Parameter("summary has no data row".to_string()))?;
    let fields: Vec<&str> = row.split(',').collect();
    if fields.len() != 7 + 27 {
        return Err(Error::Parameter(format!(
            "summary row has {} fields, expected {}",
            fields.len(),
            7 + 27
        )));
    }
    let parse_f64 = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            return Ok(None);
        }
        s.parse::<f64>()
            .map(Some)
            .map_err(|e| Error::Parameter(format!("bad number `{s}` in summary: {e}")))
    };
    let kind = match fields[3] {
        "accuracy" => crate::evaluation::MetricKind::Accuracy,
        "mae_days" => crate::evaluation::MetricKind::MaeDays,
        other => {
            return Err(Error::Parameter(format!(
                "unknown metric `{other}` in summary"
            )))
        }
    };
    let n_runs: usize = fields[4]
        .parse()
        .map_err(|e| Error::Parameter(format!("bad n_runs in summary: {e}")))?;

    let mut cells = [crate::evaluation::AggregateCell {
        mean: None,
        sd: None,
        count: 0,
    }; 9];
    for (i, cell) in cells.iter_mut().enumerate() {
        cell.mean = parse_f64(fields[7 + i])?;
        cell.sd = parse_f64(fields[7 + 9 + i])?;
        cell.count = fields[7 + 18 + i]
            .parse()
            .map_err(|e| Error::Parameter(format!("bad count in summary: {e}")))?;
    }
    Ok(SummaryRow {
        dataset: fields[0].to_string(),
        variant: Variant::parse(fields[1])?,
        head: Head::parse(fields[2])?,
        aggregate: AggregateMetrics {
            kind,
            n_runs,
            quartiles: std::array::from_fn(|i| cells[i]),
            quarters: std::array::from_fn(|i| cells[4 + i]),
            overall: cells[8],
        },
    })
}

fn summary_csv_header() -> String {
    let mut out = String::from("dataset,variant,head,metric,n_runs,learning_rate,base_seed");
    for name in crate::evaluation::CELL_NAMES {
        out.push_str(&format!(",{name}_mean"));
    }
    for name in crate::evaluation::CELL_NAMES {
        out.push_str(&format!(",{name}_sd"));
    }
    for name in crate::evaluation::CELL_NAMES {
        out.push_str(&format!(",{name}_count"));
    }
    out
}

/// Writes the run directory tree of an experiment:
/// `<root>/<dataset>/<variant>-<head>/run-<r>/{checkpoint.json, history.csv,
/// metrics.csv}` plus the experiment-level `summary.csv`. Returns the
/// experiment directory.
pub fn write_experiment_artifacts(
    root: &Path,
    dataset_name: &str,
    result: &ExperimentResult,
) -> Result<std::path::PathBuf> {
    let experiment_dir = root.join(dataset_name).join(format!(
        "{}-{}",
        result.config.variant.token(),
        result.config.head.token()
    ));
    for run in &result.runs {
        let run_dir = experiment_dir.join(format!("run-{}", run.run));
        std::fs::create_dir_all(&run_dir).map_err(|e| Error::file(&run_dir, e))?;
        run.trained.save(&run_dir.join("checkpoint.json"))?;
        let history_file = std::fs::File::create(run_dir.join("history.csv"))
            .map_err(|e| Error::file(run_dir.join("history.csv"), e))?;
        run.history.write_csv(history_file)?;
        let metrics_path = run_dir.join("metrics.csv");
        let content = format!(
            "{}\n{}\n",
            StageMetrics::csv_header(),
            run.metrics.csv_row()
        );
        std::fs::write(&metrics_path, content).map_err(|e| Error::file(&metrics_path, e))?;
    }
    let summary_path = experiment_dir.join("summary.csv");
    std::fs::write(&summary_path, summary_csv(dataset_name, result))
        .map_err(|e| Error::file(&summary_path, e))?;
    Ok(experiment_dir)
}
