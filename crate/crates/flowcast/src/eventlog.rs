//! Event-log parsing, statistics and case-level splits.
//!
//! A log is a flat table of (case id, activity label, completion timestamp)
//! rows. Parsing groups rows into cases, sorts events chronologically within
//! each case and cases by their start timestamp, and interns activity labels
//! into a dense 0-based alphabet in first-appearance order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDateTime, Timelike};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_CASE_COLUMN: &str = "CaseID";
pub const DEFAULT_ACTIVITY_COLUMN: &str = "ActivityID";
pub const DEFAULT_TIMESTAMP_COLUMN: &str = "CompleteTimestamp";
/// `YYYY-MM-DD HH:MM:SS` with optional fractional seconds, read as UTC.
pub const DEFAULT_TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S%.f";

/// Column mapping, delimiter and timestamp format for a delimited log file.
#[derive(Debug, Clone)]
pub struct ParseOptions {
    pub delimiter: u8,
    pub case_column: String,
    pub activity_column: String,
    pub timestamp_column: String,
    pub timestamp_format: String,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            delimiter: b',',
            case_column: DEFAULT_CASE_COLUMN.to_string(),
            activity_column: DEFAULT_ACTIVITY_COLUMN.to_string(),
            timestamp_column: DEFAULT_TIMESTAMP_COLUMN.to_string(),
            timestamp_format: DEFAULT_TIMESTAMP_FORMAT.to_string(),
        }
    }
}

/// One process event: activity index into the log alphabet plus completion time.
///
/// Timestamps are truncated to whole seconds and interpreted as UTC.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub activity: usize,
    pub timestamp: NaiveDateTime,
}

impl Event {
    pub fn epoch_seconds(&self) -> i64 {
        self.timestamp.and_utc().timestamp()
    }

    /// Seconds elapsed since midnight of the event's own day.
    pub fn seconds_since_midnight(&self) -> f64 {
        f64::from(self.timestamp.time().num_seconds_from_midnight())
    }

    /// Day of the week, Monday = 0 .. Sunday = 6.
    pub fn weekday_index(&self) -> f64 {
        f64::from(self.timestamp.weekday().num_days_from_monday())
    }
}

/// One process instance: chronologically ordered events sharing a case id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Case {
    pub case_id: String,
    pub events: Vec<Event>,
}

impl Case {
    pub fn start(&self) -> NaiveDateTime {
        self.events[0].timestamp
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Seconds between the first and the last event, never negative.
    pub fn duration_seconds(&self) -> i64 {
        let first = self.events[0].epoch_seconds();
        let last = self.events[self.events.len() - 1].epoch_seconds();
        last - first
    }
}

/// Bijection between raw activity labels and dense 0-based indices,
/// assigned in first-appearance order while scanning the input rows.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActivityAlphabet {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl ActivityAlphabet {
    pub fn intern(&mut self, label: &str) -> usize {
        if let Some(&id) = self.index.get(label) {
            return id;
        }
        let id = self.labels.len();
        self.labels.push(label.to_string());
        self.index.insert(label.to_string(), id);
        id
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A parsed event log: cases ordered by start timestamp plus the activity alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventLog {
    pub cases: Vec<Case>,
    pub alphabet: ActivityAlphabet,
}

impl EventLog {
    /// Number of distinct activity types (graph nodes).
    pub fn num_nodes(&self) -> usize {
        self.alphabet.len()
    }

    pub fn n_cases(&self) -> usize {
        self.cases.len()
    }

    pub fn n_events(&self) -> usize {
        self.cases.iter().map(Case::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn from_path(path: &Path, options: &ParseOptions) -> Result<EventLog> {
        let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
        parse_event_log(file, options)
    }

    /// Writes the log back to delimited rows (header included). Events are
    /// emitted case by case in stored order, so re-parsing the output yields
    /// an identical log.
    pub fn write_csv<W: Write>(&self, writer: W, options: &ParseOptions) -> Result<()> {
        let mut out = csv::WriterBuilder::new()
            .delimiter(options.delimiter)
            .from_writer(writer);
        out.write_record([
            options.case_column.as_str(),
            options.activity_column.as_str(),
            options.timestamp_column.as_str(),
        ])?;
        for case in &self.cases {
            for event in &case.events {
                out.write_record([
                    case.case_id.as_str(),
                    self.alphabet.label(event.activity),
                    &event
                        .timestamp
                        .format(&options.timestamp_format)
                        .to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Clones the selected cases into a new log sharing this log's alphabet.
    fn subset(&self, case_indices: impl IntoIterator<Item = usize>) -> EventLog {
        EventLog {
            cases: case_indices
                .into_iter()
                .map(|i| self.cases[i].clone())
                .collect(),
            alphabet: self.alphabet.clone(),
        }
    }
}

/// Dataset-level statistics in the shape of an overview table.
#[derive(Debug, Clone, PartialEq)]
pub struct LogStats {
    pub n_events: usize,
    pub n_cases: usize,
    pub n_activity_types: usize,
    pub avg_case_duration_seconds: f64,
    pub avg_events_per_case: f64,
}

impl LogStats {
    pub fn text_table(&self) -> String {
        let rows = [
            ("No. of events", format!("{}", self.n_events)),
            ("No. of process cases", format!("{}", self.n_cases)),
            (
                "No. of activity types",
                format!("{}", self.n_activity_types),
            ),
            (
                "Avg. case duration (sec.)",
                format!("{:.3}", self.avg_case_duration_seconds),
            ),
            (
                "Avg. no. of events per case",
                format!("{:.3}", self.avg_events_per_case),
            ),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (key, value) in rows {
            out.push_str(&format!("{key:width$}  {value}\n"));
        }
        out
    }

    pub fn csv(&self) -> String {
        format!(
            "n_events,n_cases,n_activity_types,avg_case_duration_seconds,avg_events_per_case\n\
             {},{},{},{},{}\n",
            self.n_events,
            self.n_cases,
            self.n_activity_types,
            self.avg_case_duration_seconds,
            self.avg_events_per_case
        )
    }
}

/// Parses delimited rows into a canonical event log.
///
/// Cases are grouped by case id, events sorted by timestamp within each case
/// (ties keep input order), cases sorted by start timestamp, and the activity
/// alphabet assigned by first appearance of each raw label.
pub fn parse_event_log<R: Read>(reader: R, options: &ParseOptions) -> Result<EventLog> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .from_reader(reader);

    let headers = csv_reader.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let case_col = column(&options.case_column)?;
    let activity_col = column(&options.activity_column)?;
    let timestamp_col = column(&options.timestamp_column)?;

    let mut alphabet = ActivityAlphabet::default();
    let mut case_order: HashMap<String, usize> = HashMap::new();
    let mut case_ids: Vec<String> = Vec::new();
    let mut case_events: Vec<Vec<Event>> = Vec::new();

    for record in csv_reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |idx: usize| -> Result<&str> {
            record.get(idx).ok_or_else(|| Error::Row {
                line,
                message: format!(
                    "row has {} fields, expected at least {}",
                    record.len(),
                    idx + 1
                ),
            })
        };

        let case_id = field(case_col)?.to_string();
        let activity = alphabet.intern(field(activity_col)?);
        let raw_ts = field(timestamp_col)?;
        let timestamp = NaiveDateTime::parse_from_str(raw_ts, &options.timestamp_format)
            .map_err(|e| Error::Row {
                line,
                message: format!("cannot parse timestamp `{raw_ts}`: {e}"),
            })?
            .with_nanosecond(0)
            .expect("zero nanoseconds is always valid");

        let slot = *case_order.entry(case_id.clone()).or_insert_with(|| {
            case_ids.push(case_id.clone());
            case_events.push(Vec::new());
            case_events.len() - 1
        });
        case_events[slot].push(Event {
            activity,
            timestamp,
        });
    }

    if case_events.is_empty() {
        return Err(Error::EmptyLog);
    }

    let mut cases: Vec<Case> = case_ids
        .into_iter()
        .zip(case_events)
        .map(|(case_id, mut events)| {
            events.sort_by_key(|e| e.timestamp);
            Case { case_id, events }
        })
        .collect();
    cases.sort_by_key(Case::start);

    // Re-intern labels in normalized scan order so that serializing the log
    // and parsing it back reproduces the same alphabet.
    let mut normalized = ActivityAlphabet::default();
    let mut remap = vec![usize::MAX; alphabet.len()];
    for case in &cases {
        for event in &case.events {
            if remap[event.activity] == usize::MAX {
                remap[event.activity] = normalized.intern(alphabet.label(event.activity));
            }
        }
    }
    for case in &mut cases {
        for event in &mut case.events {
            event.activity = remap[event.activity];
        }
    }

    Ok(EventLog {
        cases,
        alphabet: normalized,
    })
}

/// Counts and means over a non-empty log.
pub fn log_statistics(log: &EventLog) -> Result<LogStats> {
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    let n_events = log.n_events();
    let n_cases = log.n_cases();
    let total_duration: i64 = log.cases.iter().map(Case::duration_seconds).sum();
    Ok(LogStats {
        n_events,
        n_cases,
        n_activity_types: log.num_nodes(),
        avg_case_duration_seconds: total_duration as f64 / n_cases as f64,
        avg_events_per_case: n_events as f64 / n_cases as f64,
    })
}

/// Floor of `fraction * n` with a snap to the nearest integer, so exact
/// rationals such as 2/3 * 3804 land on 2536 instead of one below it.
fn fraction_count(fraction: f64, n: usize) -> usize {
    let scaled = fraction * n as f64;
    let nearest = scaled.round();
    if (scaled - nearest).abs() < 1e-9 {
        nearest as usize
    } else {
        scaled.floor() as usize
    }
}

/// Splits whole cases chronologically: the first `floor(train_fraction * n)`
/// cases by start timestamp become the training log, the rest the test log.
pub fn chronological_case_split(
    log: &EventLog,
    train_fraction: f64,
) -> Result<(EventLog, EventLog)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Parameter(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    if log.n_cases() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 cases, got {}",
            log.n_cases()
        )));
    }
    let n_train = fraction_count(train_fraction, log.n_cases());
    let train = log.subset(0..n_train);
    let test = log.subset(n_train..log.n_cases());
    Ok((train, test))
}

/// Draws `floor(fraction * n)` whole cases uniformly without replacement as a
/// validation log; the remainder keeps its chronological order as the
/// effective training log. Deterministic for a fixed seed.
pub fn sample_validation_split(
    train: &EventLog,
    fraction: f64,
    seed: u64,
) -> Result<(EventLog, EventLog)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Parameter(format!(
            "validation fraction must be in (0, 1), got {fraction}"
        )));
    }
    if train.n_cases() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 cases, got {}",
            train.n_cases()
        )));
    }
    let n = train.n_cases();
    let n_validation = fraction_count(fraction, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = rand::seq::index::sample(&mut rng, n, n_validation).into_vec();
    selected.sort_unstable();

    let mut is_validation = vec![false; n];
    for &i in &selected {
        is_validation[i] = true;
    }
    let remaining = (0..n).filter(|&i| !is_validation[i]);
    Ok((train.subset(remaining), train.subset(selected)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn opts() -> ParseOptions {
        ParseOptions::default()
    }

    fn parse(text: &str) -> Result<EventLog> {
        parse_event_log(text.as_bytes(), &opts())
    }

    const TWO_ROWS: &str = "CaseID,ActivityID,CompleteTimestamp\n\
                            c1,A,2020-01-06 08:00:00\n\
                            c1,B,2020-01-06 08:01:00\n";

    #[test]
    fn parses_minimal_log() {
        let log = parse(TWO_ROWS).unwrap();
        assert_eq!(log.n_cases(), 1);
        assert_eq!(log.n_events(), 2);
        assert_eq!(log.alphabet.id("A"), Some(0));
        assert_eq!(log.alphabet.id("B"), Some(1));
        assert_eq!(log.cases[0].duration_seconds(), 60);
    }

    #[test]
    fn sorts_events_within_case() {
        let text = "CaseID,ActivityID,CompleteTimestamp\n\
                    c1,B,2020-01-06 09:00:00\n\
                    c1,A,2020-01-06 08:00:00\n";
        let log = parse(text).unwrap();
        let events = &log.cases[0].events;
        assert!(events[0].timestamp < events[1].timestamp);
        // Interning follows the normalized order, so A (earliest event) is 0.
        assert_eq!(log.alphabet.id("A"), Some(0));
        assert_eq!(log.alphabet.id("B"), Some(1));
    }

    #[test]
    fn timestamp_ties_keep_input_order() {
        let text = "CaseID,ActivityID,CompleteTimestamp\n\
                    c1,X,2020-01-06 08:00:00\n\
                    c1,Y,2020-01-06 08:00:00\n";
        let log = parse(text).unwrap();
        let acts: Vec<usize> = log.cases[0].events.iter().map(|e| e.activity).collect();
        assert_eq!(acts, vec![0, 1]);
    }

    #[test]
    fn cases_sorted_by_start() {
        let text = "CaseID,ActivityID,CompleteTimestamp\n\
                    late,A,2020-02-01 00:00:00\n\
                    early,A,2020-01-01 00:00:00\n";
        let log = parse(text).unwrap();
        assert_eq!(log.cases[0].case_id, "early");
        assert_eq!(log.cases[1].case_id, "late");
    }

    #[test]
    fn missing_column_names_it() {
        let text = "CaseID,Activity,CompleteTimestamp\nc1,A,2020-01-06 08:00:00\n";
        match parse(text) {
            Err(Error::MissingColumn(name)) => assert_eq!(name, "ActivityID"),
            other => panic!("expected missing-column error, got {other:?}"),
        }
    }

    #[test]
    fn bad_timestamp_reports_line() {
        let text = "CaseID,ActivityID,CompleteTimestamp\n\
                    c1,A,2020-01-06 08:00:00\n\
                    c1,B,not-a-time\n";
        match parse(text) {
            Err(Error::Row { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected row error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        let text = "CaseID,ActivityID,CompleteTimestamp\n";
        assert!(matches!(parse(text), Err(Error::EmptyLog)));
    }

    #[test]
    fn extra_columns_are_ignored() {
        let text = "Resource,CaseID,ActivityID,Cost,CompleteTimestamp\n\
                    r9,c1,A,12.5,2020-01-06 08:00:00\n\
                    r4,c1,B,3.0,2020-01-06 08:01:00\n";
        let log = parse(text).unwrap();
        assert_eq!(log.n_events(), 2);
        assert_eq!(log.alphabet.labels(), ["A", "B"]);
    }

    #[test]
    fn fractional_seconds_are_truncated() {
        let text = "CaseID,ActivityID,CompleteTimestamp\n\
                    c1,A,2020-01-06 08:00:00.750\n";
        let log = parse(text).unwrap();
        assert_eq!(
            log.cases[0].events[0]
                .timestamp
                .and_utc()
                .timestamp_subsec_nanos(),
            0
        );
    }

    #[test]
    fn statistics_on_degenerate_log() {
        let text = "CaseID,ActivityID,CompleteTimestamp\nc1,A,2020-01-06 08:00:00\n";
        let stats = log_statistics(&parse(text).unwrap()).unwrap();
        assert_eq!(stats.n_events, 1);
        assert_eq!(stats.n_cases, 1);
        assert_eq!(stats.n_activity_types, 1);
        assert_eq!(stats.avg_case_duration_seconds, 0.0);
        assert_eq!(stats.avg_events_per_case, 1.0);
    }

    fn one_event_cases(n: usize) -> EventLog {
        let mut text = String::from("CaseID,ActivityID,CompleteTimestamp\n");
        for i in 0..n {
            let day = i % 28 + 1;
            let month = i / 28 % 12 + 1;
            let year = 2000 + i / 336;
            text.push_str(&format!("c{i},A,{year:04}-{month:02}-{day:02} 00:00:00\n"));
        }
        parse(&text).unwrap()
    }

    #[test]
    fn chronological_split_respects_floor() {
        let text = "CaseID,ActivityID,CompleteTimestamp\n\
                    c1,A,2020-01-01 00:00:00\n\
                    c2,A,2020-01-02 00:00:00\n\
                    c3,A,2020-01-03 00:00:00\n";
        let log = parse(text).unwrap();
        let (train, test) = chronological_case_split(&log, 2.0 / 3.0).unwrap();
        assert_eq!(
            train
                .cases
                .iter()
                .map(|c| c.case_id.as_str())
                .collect::<Vec<_>>(),
            vec!["c1", "c2"]
        );
        assert_eq!(test.cases[0].case_id, "c3");
    }

    #[test]
    fn chronological_split_half_of_two() {
        let log = one_event_cases(2);
        let (train, test) = chronological_case_split(&log, 0.5).unwrap();
        assert_eq!(train.n_cases(), 1);
        assert_eq!(test.n_cases(), 1);
    }

    #[test]
    fn split_rejects_single_case() {
        let log = one_event_cases(1);
        assert!(matches!(
            chronological_case_split(&log, 0.5),
            Err(Error::Split(_))
        ));
        assert!(matches!(
            sample_validation_split(&log, 0.2, 0),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn two_thirds_of_3804_is_2536() {
        assert_eq!(fraction_count(2.0 / 3.0, 3804), 2536);
    }

    #[test]
    fn validation_split_size_and_determinism() {
        let log = one_event_cases(10);
        let (train_a, val_a) = sample_validation_split(&log, 0.2, 42).unwrap();
        let (train_b, val_b) = sample_validation_split(&log, 0.2, 42).unwrap();
        assert_eq!(val_a.n_cases(), 2);
        assert_eq!(train_a.n_cases(), 8);
        assert_eq!(val_a, val_b);
        assert_eq!(train_a, train_b);
    }

    #[test]
    fn validation_split_varies_across_seeds() {
        let log = one_event_cases(50);
        let picks: Vec<Vec<String>> = (0..5)
            .map(|seed| {
                let (_, val) = sample_validation_split(&log, 0.2, seed).unwrap();
                val.cases.iter().map(|c| c.case_id.clone()).collect()
            })
            .collect();
        assert!(picks.iter().any(|p| p != &picks[0]));
    }

    #[test]
    fn validation_of_2536_cases_is_507() {
        assert_eq!(fraction_count(0.2, 2536), 507);
    }

    #[test]
    fn round_trip_preserves_log() {
        let text = "CaseID,ActivityID,CompleteTimestamp\n\
                    c2,B,2020-01-02 10:30:00\n\
                    c1,A,2020-01-01 08:00:00\n\
                    c1,B,2020-01-01 09:15:30\n\
                    c2,A,2020-01-02 11:00:00\n";
        let log = parse(text).unwrap();
        let mut buffer = Vec::new();
        log.write_csv(&mut buffer, &opts()).unwrap();
        let reparsed = parse_event_log(buffer.as_slice(), &opts()).unwrap();
        assert_eq!(log, reparsed);
    }

    proptest! {
        #[test]
        fn splits_partition_the_cases(n in 2usize..40, fraction in 0.05f64..0.95, seed in 0u64..1000) {
            let log = one_event_cases(n);
            let (train, test) = chronological_case_split(&log, fraction).unwrap();
            prop_assert_eq!(train.n_cases() + test.n_cases(), n);
            if !train.is_empty() && !test.is_empty() {
                let last_train = train.cases.last().unwrap().start();
                prop_assert!(last_train <= test.cases[0].start());
            }
            if train.n_cases() >= 2 {
                let (rest, val) = sample_validation_split(&train, fraction, seed).unwrap();
                prop_assert_eq!(rest.n_cases() + val.n_cases(), train.n_cases());
                let mut ids: Vec<&str> = rest
                    .cases
                    .iter()
                    .chain(val.cases.iter())
                    .map(|c| c.case_id.as_str())
                    .collect();
                ids.sort_unstable();
                ids.dedup();
                prop_assert_eq!(ids.len(), train.n_cases());
            }
        }
    }
}
