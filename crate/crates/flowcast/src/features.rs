//! Per-prefix feature encoding, prediction targets and stage labels.
//!
//! Every event position of every case becomes one training sample: a
//! `num_nodes x 4` matrix holding, per activity, the scaled timing vector of
//! that activity's most recent occurrence in the prefix (zero rows for
//! activities not yet seen), the next activity as classification target, the
//! seconds until the next event as regression target, and the quartile /
//! duration-quarter the position falls into.

use std::io::Write;

use chrono::NaiveDateTime;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eventlog::{Case, EventLog};

pub const SECONDS_PER_DAY: f64 = 86_400.0;
pub const DAYS_PER_WEEK: f64 = 7.0;
/// Width of the per-event timing vector.
pub const FEATURE_DIM: usize = 4;

/// Divisors applied to the raw timing features and the regression target.
///
/// Durations are divided by their training-set means, clock time by the
/// seconds of a day and the weekday by 7; zero means fall back to 1 so the
/// all-zero "not seen yet" rows stay meaningful.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub mean_time_since_prev: f64,
    pub mean_time_since_start: f64,
    pub mean_time_target: f64,
}

impl FeatureScaling {
    /// Neutral scaling (all means 1); the fixed day/week divisors still apply.
    pub fn unit() -> Self {
        FeatureScaling {
            mean_time_since_prev: 1.0,
            mean_time_since_start: 1.0,
            mean_time_target: 1.0,
        }
    }
}

/// One prefix of one case, ready for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `num_nodes x 4` scaled feature matrix.
    pub features: Array2<f64>,
    /// Next activity index, or `num_nodes` for end-of-case.
    pub event_target: usize,
    /// Seconds until the next event; absent exactly at end-of-case.
    pub time_target_seconds: Option<f64>,
    /// Position-based stage, 1..=4.
    pub quartile: u8,
    /// Duration-based stage, 1..=4.
    pub quarter: u8,
    pub case_id: String,
    pub position: usize,
}

/// Raw (unscaled) timing vector of one event within its case.
fn raw_vector(case: &Case, position: usize) -> [f64; 4] {
    let event = &case.events[position];
    let prev_gap = if position == 0 {
        0.0
    } else {
        (event.epoch_seconds() - case.events[position - 1].epoch_seconds()) as f64
    };
    let since_start = (event.epoch_seconds() - case.events[0].epoch_seconds()) as f64;
    [
        prev_gap,
        since_start,
        event.seconds_since_midnight(),
        event.weekday_index(),
    ]
}

/// Means of the duration features and the regression target over a training
/// log, one contribution per event. Zero means are replaced by 1.
pub fn fit_feature_scaling(train: &EventLog) -> FeatureScaling {
    let mut sum_prev = 0.0;
    let mut sum_start = 0.0;
    let mut n_events = 0usize;
    let mut sum_target = 0.0;
    let mut n_targets = 0usize;

    for case in &train.cases {
        for position in 0..case.len() {
            let raw = raw_vector(case, position);
            sum_prev += raw[0];
            sum_start += raw[1];
            n_events += 1;
            if position + 1 < case.len() {
                sum_target += (case.events[position + 1].epoch_seconds()
                    - case.events[position].epoch_seconds()) as f64;
                n_targets += 1;
            }
        }
    }

    let mean = |sum: f64, n: usize| {
        if n == 0 {
            return 1.0;
        }
        let m = sum / n as f64;
        if m == 0.0 {
            1.0
        } else {
            m
        }
    };

    FeatureScaling {
        mean_time_since_prev: mean(sum_prev, n_events),
        mean_time_since_start: mean(sum_start, n_events),
        mean_time_target: mean(sum_target, n_targets),
    }
}

/// Encodes the prefix `events[0..=position]` as a `num_nodes x 4` matrix.
///
/// For each activity seen in the prefix, its row holds the scaled timing
/// vector of the activity's latest occurrence; all other rows stay zero.
pub fn encode_prefix(
    case: &Case,
    position: usize,
    num_nodes: usize,
    scaling: &FeatureScaling,
) -> Result<Array2<f64>> {
    if position >= case.len() {
        return Err(Error::Parameter(format!(
            "position {position} out of range for case of {} events",
            case.len()
        )));
    }
    let mut matrix = Array2::<f64>::zeros((num_nodes, FEATURE_DIM));
    for p in 0..=position {
        let raw = raw_vector(case, p);
        let activity = case.events[p].activity;
        matrix[(activity, 0)] = raw[0] / scaling.mean_time_since_prev;
        matrix[(activity, 1)] = raw[1] / scaling.mean_time_since_start;
        matrix[(activity, 2)] = raw[2] / SECONDS_PER_DAY;
        matrix[(activity, 3)] = raw[3] / DAYS_PER_WEEK;
    }
    Ok(matrix)
}

/// Position-based stage: splits the `n` events of a case into four
/// approximately equal runs; returns `floor(position * 4 / n) + 1`.
pub fn quartile_of(position: usize, case_length: usize) -> u8 {
    debug_assert!(position < case_length);
    (position * 4 / case_length) as u8 + 1
}

/// Duration-based stage: normalizes the case span to unit length and buckets
/// the event's offset into four equal intervals. Zero-duration cases map to 1.
pub fn quarter_of(
    event_time: NaiveDateTime,
    case_start: NaiveDateTime,
    case_duration_seconds: i64,
) -> Result<u8> {
    let offset = event_time.and_utc().timestamp() - case_start.and_utc().timestamp();
    if offset < 0 || offset > case_duration_seconds {
        return Err(Error::Parameter(format!(
            "event offset {offset}s outside case span of {case_duration_seconds}s"
        )));
    }
    if case_duration_seconds == 0 {
        return Ok(1);
    }
    let unit = offset as f64 / case_duration_seconds as f64;
    Ok(((4.0 * unit).floor() as u8 + 1).min(4))
}

/// Builds one sample per event position of every case.
pub fn build_samples(log: &EventLog, scaling: &FeatureScaling) -> Result<Vec<Sample>> {
    let num_nodes = log.num_nodes();
    let mut samples = Vec::with_capacity(log.n_events());
    for case in &log.cases {
        let n = case.len();
        let start = case.start();
        let duration = case.duration_seconds();
        for position in 0..n {
            let features = encode_prefix(case, position, num_nodes, scaling)?;
            let (event_target, time_target_seconds) = if position + 1 < n {
                let gap = (case.events[position + 1].epoch_seconds()
                    - case.events[position].epoch_seconds()) as f64;
                (case.events[position + 1].activity, Some(gap))
            } else {
                (num_nodes, None)
            };
            samples.push(Sample {
                features,
                event_target,
                time_target_seconds,
                quartile: quartile_of(position, n),
                quarter: quarter_of(case.events[position].timestamp, start, duration)?,
                case_id: case.case_id.clone(),
                position,
            });
        }
    }
    Ok(samples)
}

/// Writes samples as CSV: flattened features, targets and stage labels.
pub fn write_samples_csv<W: Write>(samples: &[Sample], mut writer: W) -> Result<()> {
    let Some(first) = samples.first() else {
        return Err(Error::EmptyLog);
    };
    let mut header = vec!["case_id".to_string(), "position".to_string()];
    for node in 0..first.features.nrows() {
        for feat in 0..FEATURE_DIM {
            header.push(format!("f{node}_{feat}"));
        }
    }
    header
        .extend(["event_target", "time_target_seconds", "quartile", "quarter"].map(str::to_string));
    writeln!(writer, "{}", header.join(","))?;

    for sample in samples {
        let mut fields = vec![sample.case_id.clone(), sample.position.to_string()];
        fields.extend(sample.features.iter().map(|v| v.to_string()));
        fields.push(sample.event_target.to_string());
        fields.push(
            sample
                .time_target_seconds
                .map(|t| t.to_string())
                .unwrap_or_default(),
        );
        fields.push(sample.quartile.to_string());
        fields.push(sample.quarter.to_string());
        writeln!(writer, "{}", fields.join(","))?;
    }
    Ok(())
}
