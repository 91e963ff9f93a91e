//! Shared fixtures for the integration suites.
#![allow(dead_code)] // not every suite uses every helper

use std::path::{Path, PathBuf};

/// CSV text of the deterministic log: `n_cases` cases of a -> b -> c with
/// 60-second gaps, case starts one hour apart.
pub fn abc_csv(n_cases: usize) -> String {
    let mut text = String::from("CaseID,ActivityID,CompleteTimestamp\n");
    let base = chrono::NaiveDate::from_ymd_opt(2020, 1, 6)
        .unwrap()
        .and_hms_opt(8, 0, 0)
        .unwrap();
    for case in 0..n_cases {
        let start = base + chrono::Duration::hours(case as i64);
        for (position, activity) in ["a", "b", "c"].iter().enumerate() {
            let ts = start + chrono::Duration::seconds(60 * position as i64);
            text.push_str(&format!(
                "case{case},{activity},{}\n",
                ts.format("%Y-%m-%d %H:%M:%S")
            ));
        }
    }
    text
}

pub fn write_file(dir: &Path, name: &str, content: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, content).unwrap();
    path
}

/// Parses the deterministic log straight from its CSV text.
pub fn abc_log(n_cases: usize) -> flowcast::eventlog::EventLog {
    flowcast::eventlog::parse_event_log(abc_csv(n_cases).as_bytes(), &Default::default()).unwrap()
}
