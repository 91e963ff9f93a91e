//! Test-set metrics (accuracy, MAE in days) overall and per process stage,
//! aggregation across runs, and the result-table renderers.

use serde::{Deserialize, Serialize};

use crate::checkpoint::TrainedModel;
use crate::error::{Error, Result};
use crate::features::{Sample, SECONDS_PER_DAY};
use crate::models::{Head, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    Accuracy,
    MaeDays,
}

impl MetricKind {
    pub fn token(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::MaeDays => "mae_days",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "Accuracy for next-event prediction",
            MetricKind::MaeDays => "MAE (days) for next-timestamp prediction",
        }
    }
}

/// One stage cell: the metric value over its member samples, absent when the
/// cell is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCell {
    pub value: Option<f64>,
    pub count: usize,
}

/// Metric values per event-quartile, per duration-quarter, and overall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub kind: MetricKind,
    pub quartiles: [StageCell; 4],
    pub quarters: [StageCell; 4],
    pub overall: StageCell,
}

/// Sums in pairwise order for bit-stable, accurate reductions.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let (left, right) = values.split_at(n / 2);
            pairwise_sum(left) + pairwise_sum(right)
        }
    }
}

fn cell_of(scores: &[f64]) -> StageCell {
    if scores.is_empty() {
        StageCell {
            value: None,
            count: 0,
        }
    } else {
        StageCell {
            value: Some(pairwise_sum(scores) / scores.len() as f64),
            count: scores.len(),
        }
    }
}

/// Buckets per-sample scores by stage and reduces each bucket to its mean.
fn collect_stage_metrics(
    kind: MetricKind,
    scored: impl Iterator<Item = (u8, u8, f64)>,
) -> StageMetrics {
    let mut by_quartile: [Vec<f64>; 4] = Default::default();
    let mut by_quarter: [Vec<f64>; 4] = Default::default();
    let mut all = Vec::new();
    for (quartile, quarter, score) in scored {
        by_quartile[quartile as usize - 1].push(score);
        by_quarter[quarter as usize - 1].push(score);
        all.push(score);
    }
    StageMetrics {
        kind,
        quartiles: std::array::from_fn(|i| cell_of(&by_quartile[i])),
        quarters: std::array::from_fn(|i| cell_of(&by_quarter[i])),
        overall: cell_of(&all),
    }
}

/// Share of correctly predicted next activities (argmax of the class
/// distribution, end-of-case counts as a class), per stage and overall.
pub fn accuracy_by_stage(trained: &TrainedModel, samples: &[Sample]) -> Result<StageMetrics> {
    if trained.model.config.head != Head::Event {
        return Err(Error::Usage(
            "accuracy_by_stage needs an event-head model".to_string(),
        ));
    }
    let mut scored = Vec::with_capacity(samples.len());
    for sample in samples {
        let probabilities = trained.model.predict_event(sample.features.view(), None)?;
        let predicted = probabilities
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("probabilities are finite"))
            .map(|(i, _)| i)
            .expect("distribution is non-empty");
        let correct = if predicted == sample.event_target {
            1.0
        } else {
            0.0
        };
        scored.push((sample.quartile, sample.quarter, correct));
    }
    Ok(collect_stage_metrics(
        MetricKind::Accuracy,
        scored.into_iter(),
    ))
}

/// Mean absolute error of the predicted time until the next event, in days.
/// Only samples with a defined time target are evaluated.
pub fn mae_by_stage(trained: &TrainedModel, samples: &[Sample]) -> Result<StageMetrics> {
    if trained.model.config.head != Head::Time {
        return Err(Error::Usage(
            "mae_by_stage needs a time-head model".to_string(),
        ));
    }
    let mut scored = Vec::new();
    for sample in samples {
        let Some(target_seconds) = sample.time_target_seconds else {
            continue;
        };
        let predicted_seconds =
            trained
                .model
                .predict_time(sample.features.view(), &trained.scaling, None)?;
        let error_days = (predicted_seconds - target_seconds).abs() / SECONDS_PER_DAY;
        scored.push((sample.quartile, sample.quarter, error_days));
    }
    Ok(collect_stage_metrics(
        MetricKind::MaeDays,
        scored.into_iter(),
    ))
}

/// One aggregated cell: mean and population standard deviation across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub count: usize,
}

/// Per-cell mean and standard deviation of several runs' stage metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub kind: MetricKind,
    pub n_runs: usize,
    pub quartiles: [AggregateCell; 4],
    pub quarters: [AggregateCell; 4],
    pub overall: AggregateCell,
}

fn aggregate_cell(cells: &[StageCell]) -> AggregateCell {
    let values: Vec<f64> = cells.iter().filter_map(|c| c.value).collect();
    let count = cells.iter().map(|c| c.count).max().unwrap_or(0);
    if values.is_empty() {
        return AggregateCell {
            mean: None,
            sd: None,
            count,
        };
    }
    let n = values.len() as f64;
    let mean = pairwise_sum(&values) / n;
    let squared: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let sd = (pairwise_sum(&squared) / n).sqrt();
    AggregateCell {
        mean: Some(mean),
        sd: Some(sd),
        count,
    }
}

pub fn aggregate_runs(per_run: &[StageMetrics]) -> Result<AggregateMetrics> {
    let Some(first) = per_run.first() else {
        return Err(Error::Parameter("no run metrics to aggregate".to_string()));
    };
    if per_run.iter().any(|m| m.kind != first.kind) {
        return Err(Error::Parameter(
            "cannot aggregate metrics of different kinds".to_string(),
        ));
    }
    let column = |extract: &dyn Fn(&StageMetrics) -> StageCell| -> Vec<StageCell> {
        per_run.iter().map(extract).collect()
    };
    Ok(AggregateMetrics {
        kind: first.kind,
        n_runs: per_run.len(),
        quartiles: std::array::from_fn(|i| aggregate_cell(&column(&|m| m.quartiles[i]))),
        quarters: std::array::from_fn(|i| aggregate_cell(&column(&|m| m.quarters[i]))),
        overall: aggregate_cell(&column(&|m| m.overall)),
    })
}

impl StageMetrics {
    fn cells(&self) -> impl Iterator<Item = &StageCell> {
        self.quartiles
            .iter()
            .chain(self.quarters.iter())
            .chain(std::iter::once(&self.overall))
    }

    pub fn csv_header() -> String {
        let mut columns = vec!["metric".to_string()];
        for name in CELL_NAMES {
            columns.push(name.to_string());
        }
        for name in CELL_NAMES {
            columns.push(format!("{name}_count"));
        }
        columns.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut fields = vec![self.kind.token().to_string()];
        fields.extend(
            self.cells()
                .map(|c| c.value.map(|v| v.to_string()).unwrap_or_default()),
        );
        fields.extend(self.cells().map(|c| c.count.to_string()));
        fields.join(",")
    }
}

/// Cell order used in every table and CSV: quartiles 1-4, quarters 1-4, overall.
pub const CELL_NAMES: [&str; 9] = [
    "quartile_1",
    "quartile_2",
    "quartile_3",
    "quartile_4",
    "quarter_1",
    "quarter_2",
    "quarter_3",
    "quarter_4",
    "overall",
];

impl AggregateMetrics {
    pub fn cells(&self) -> [AggregateCell; 9] {
        [
            self.quartiles[0],
            self.quartiles[1],
            self.quartiles[2],
            self.quartiles[3],
            self.quarters[0],
            self.quarters[1],
            self.quarters[2],
            self.quarters[3],
            self.overall,
        ]
    }
}

fn format_cell(value: Option<f64>) -> String {
    value
        .map(|v| format!("{v:.4}"))
        .unwrap_or_else(|| "n/a".to_string())
}

/// Renders the aligned text table: one row per variant, columns quartiles
/// 1-4, duration quarters 1-4, overall. With `include_sd` each value carries
/// its across-run standard deviation.
pub fn render_report_text(
    dataset: &str,
    rows: &[(Variant, AggregateMetrics)],
    include_sd: bool,
) -> String {
    let metric = rows
        .first()
        .map(|(_, m)| m.kind.description())
        .unwrap_or("no metrics");
    let mut out = format!("{metric} — {dataset}\n");
    let headers = [
        "Model", "Q1", "Q2", "Q3", "Q4", "D1", "D2", "D3", "D4", "Overall",
    ];

    let mut table: Vec<Vec<String>> = vec![headers.iter().map(|h| h.to_string()).collect()];
    for (variant, metrics) in rows {
        let mut row = vec![variant.token().to_string()];
        for cell in metrics.cells() {
            let mut text = format_cell(cell.mean);
            if include_sd {
                if let Some(sd) = cell.sd {
                    text.push_str(&format!(" ({sd:.4})"));
                }
            }
            row.push(text);
        }
        table.push(row);
    }

    let widths: Vec<usize> = (0..headers.len())
        .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    out.push_str("Q1-Q4: quartiles by event position; D1-D4: quarters by case duration\n");
    for row in &table {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:>w$}"))
            .collect();
        out.push_str(&line.join("  "));
        out.push('\n');
    }
    out
}

/// CSV twin of the text report, full precision.
pub fn render_report_csv(dataset: &str, rows: &[(Variant, AggregateMetrics)]) -> String {
    let mut out = String::from("dataset,variant,metric,n_runs");
    for name in CELL_NAMES {
        out.push_str(&format!(",{name}"));
    }
    for name in CELL_NAMES {
        out.push_str(&format!(",{name}_sd"));
    }
    out.push('\n');
    for (variant, metrics) in rows {
        out.push_str(&format!(
            "{dataset},{},{},{}",
            variant.token(),
            metrics.kind.token(),
            metrics.n_runs
        ));
        for cell in metrics.cells() {
            out.push(',');
            if let Some(mean) = cell.mean {
                out.push_str(&mean.to_string());
            }
        }
        for cell in metrics.cells() {
            out.push(',');
            if let Some(sd) = cell.sd {
                out.push_str(&sd.to_string());
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics_from(scores: &[(u8, u8, f64)]) -> StageMetrics {
        collect_stage_metrics(MetricKind::Accuracy, scores.iter().copied())
    }

    #[test]
    fn perfect_scores_give_ones_everywhere() {
        let scored: Vec<(u8, u8, f64)> = (0..16)
            .map(|i| ((i % 4 + 1) as u8, (i / 4 + 1) as u8, 1.0))
            .collect();
        let m = metrics_from(&scored);
        for cell in m.cells() {
            assert_eq!(cell.value, Some(1.0));
        }
        assert_eq!(m.overall.count, 16);
    }

    #[test]
    fn hand_counted_quartile_accuracy() {
        let scored = [(1u8, 1u8, 1.0), (1, 1, 0.0), (2, 1, 1.0), (2, 1, 1.0)];
        let m = metrics_from(&scored);
        assert_eq!(m.quartiles[0].value, Some(0.5));
        assert_eq!(m.quartiles[1].value, Some(1.0));
        assert_eq!(m.overall.value, Some(0.75));
        assert_eq!(m.quartiles[2].value, None);
        assert_eq!(m.quartiles[2].count, 0);
    }

    #[test]
    fn constant_zero_prediction_mae() {
        // Targets of 1 and 2 days with zero predictions average to 1.5 days.
        let scored = [(1u8, 1u8, 1.0), (4, 4, 2.0)];
        let m = collect_stage_metrics(MetricKind::MaeDays, scored.iter().copied());
        assert_eq!(m.overall.value, Some(1.5));
    }

    #[test]
    fn constant_error_fills_every_cell_with_it() {
        let scored: Vec<(u8, u8, f64)> = (0..8)
            .map(|i| ((i % 4 + 1) as u8, (i % 4 + 1) as u8, 0.25))
            .collect();
        let m = collect_stage_metrics(MetricKind::MaeDays, scored.iter().copied());
        for cell in m.cells() {
            assert_eq!(cell.value, Some(0.25));
        }
    }

    #[test]
    fn overall_recombines_from_cells() {
        let scored: Vec<(u8, u8, f64)> = (0..97)
            .map(|i| {
                (
                    (i % 4 + 1) as u8,
                    (i % 3 + 1) as u8,
                    (i as f64 * 0.37).sin().abs(),
                )
            })
            .collect();
        let m = collect_stage_metrics(MetricKind::MaeDays, scored.iter().copied());
        for cells in [&m.quartiles, &m.quarters] {
            let weighted: f64 = cells
                .iter()
                .filter_map(|c| c.value.map(|v| v * c.count as f64))
                .sum();
            let total: usize = cells.iter().map(|c| c.count).sum();
            assert_eq!(total, 97);
            assert!((weighted / total as f64 - m.overall.value.unwrap()).abs() <= 1e-9);
        }
    }

    #[test]
    fn pairwise_sum_matches_naive_on_small_inputs() {
        let values: Vec<f64> = (0..13).map(|i| i as f64 * 0.1).collect();
        let naive: f64 = values.iter().sum();
        assert!((pairwise_sum(&values) - naive).abs() < 1e-12);
        assert_eq!(pairwise_sum(&[]), 0.0);
        assert_eq!(pairwise_sum(&[4.5]), 4.5);
    }

    #[test]
    fn aggregation_of_single_run_has_zero_sd() {
        let m = metrics_from(&[(1, 1, 1.0), (2, 2, 0.0)]);
        let agg = aggregate_runs(std::slice::from_ref(&m)).unwrap();
        assert_eq!(agg.n_runs, 1);
        assert_eq!(agg.overall.mean, m.overall.value);
        assert_eq!(agg.overall.sd, Some(0.0));
    }

    #[test]
    fn aggregation_means_and_sd_across_runs() {
        let a = metrics_from(&[(1, 1, 1.0)]);
        let b = metrics_from(&[(1, 1, 0.0)]);
        let agg = aggregate_runs(&[a, b]).unwrap();
        assert_eq!(agg.overall.mean, Some(0.5));
        assert_eq!(agg.overall.sd, Some(0.5));
        assert_eq!(agg.quartiles[1].mean, None);
    }

    #[test]
    fn report_has_one_row_per_variant_and_round_trips() {
        let m = metrics_from(&[(1, 2, 1.0), (2, 3, 0.0), (3, 4, 1.0), (4, 1, 1.0)]);
        let agg = aggregate_runs(std::slice::from_ref(&m)).unwrap();
        let rows: Vec<(Variant, AggregateMetrics)> = Variant::all()
            .into_iter()
            .map(|v| (v, agg.clone()))
            .collect();

        let text = render_report_text("sample", &rows, false);
        assert_eq!(text.lines().count(), 2 + 1 + 5);
        assert!(text.contains("gcn-lw"));
        assert!(text.contains("0.7500"));

        let csv = render_report_csv("sample", &rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 6);
        // The mean cell parses back to exactly the in-memory value.
        let fields: Vec<&str> = lines[1].split(',').collect();
        let overall: f64 = fields[4 + 8].parse().unwrap();
        assert_eq!(overall, agg.overall.mean.unwrap());
    }

    #[test]
    fn single_metric_renders_nine_numeric_columns() {
        let m = metrics_from(&[(1, 1, 1.0)]);
        let agg = aggregate_runs(std::slice::from_ref(&m)).unwrap();
        let csv = render_report_csv("tiny", &[(Variant::Mlp, agg)]);
        let header_fields = csv.lines().next().unwrap().split(',').count();
        assert_eq!(header_fields, 4 + 9 + 9);
    }

    #[test]
    fn evaluation_of_a_frozen_model_is_bit_stable() {
        use crate::checkpoint::{TrainedModel, CHECKPOINT_FORMAT_VERSION};
        use crate::eventlog::parse_event_log;
        use crate::features::{build_samples, fit_feature_scaling};
        use crate::models::{build_model, ModelConfig};

        let text = "CaseID,ActivityID,CompleteTimestamp\n\
                    c1,a,2020-01-06 08:00:00\n\
                    c1,b,2020-01-06 08:01:00\n\
                    c1,c,2020-01-06 08:03:00\n\
                    c2,a,2020-01-07 09:00:00\n\
                    c2,c,2020-01-07 09:02:00\n";
        let log = parse_event_log(text.as_bytes(), &Default::default()).unwrap();
        let scaling = fit_feature_scaling(&log);
        let samples = build_samples(&log, &scaling).unwrap();
        let model = build_model(
            &ModelConfig::new(Variant::Mlp, Head::Event, log.num_nodes()),
            None,
            17,
        )
        .unwrap();
        let trained = TrainedModel {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model,
            scaling,
            seed: 17,
            best_validation_loss: 0.0,
            best_epoch: 0,
        };
        let first = accuracy_by_stage(&trained, &samples).unwrap();
        let second = accuracy_by_stage(&trained, &samples).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn metrics_csv_row_shape() {
        let m = metrics_from(&[(1, 1, 1.0), (2, 2, 0.0)]);
        let header = StageMetrics::csv_header();
        let row = m.csv_row();
        assert_eq!(header.split(',').count(), row.split(',').count());
        assert!(row.starts_with("accuracy,"));
    }
}
