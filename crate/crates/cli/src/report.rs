//! Benchmark reports: JSON with full timelines, per-run CSV, long-form
//! sweep CSV and a TTFT/TBT table.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use gatewise_core::clock::Timestamp;
use gatewise_core::metrics::{Metric, MetricsSummary, RequestStatus, RequestTimeline, SUMMARY_COLUMNS};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::BenchmarkRun;

/// Bumped on any incompatible change to the JSON report.
pub const REPORT_VERSION: u32 = 1;

/// A timeout fraction at or above this prints "Timeout" in the table.
pub const TIMEOUT_CELL_FRACTION: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RequestDetail {
    pub replica_id: Option<String>,
    pub error: Option<String>,
    /// Tokens that arrived with a sequence number below one already seen.
    pub reordered: u64,
    /// Tokens the engine reported but the client never received.
    pub lost_tokens: u64,
    pub engine_total_tokens: Option<u64>,
}

/// Stream integrity and load-discipline checks over one run.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StreamChecks {
    pub reordered_tokens: u64,
    pub lost_tokens: u64,
    /// Completed requests whose client token count differs from the
    /// engine's DONE total.
    pub token_count_mismatches: u64,
    /// Completed requests that carried server timing.
    pub with_server_timing: u64,
    /// Most requests open at once, from the submission and finish instants.
    pub peak_inflight: usize,
}

impl StreamChecks {
    pub fn from_run(timelines: &[RequestTimeline], details: &[RequestDetail]) -> Self {
        let mut c = StreamChecks::default();
        for (t, d) in timelines.iter().zip(details) {
            c.reordered_tokens += d.reordered;
            c.lost_tokens += d.lost_tokens;
            if t.status == RequestStatus::Completed {
                if let Some(total) = d.engine_total_tokens {
                    c.with_server_timing += 1;
                    if total != t.n_generated {
                        c.token_count_mismatches += 1;
                    }
                }
            }
        }
        c.peak_inflight = peak_inflight(timelines);
        c
    }
}

/// Largest number of overlapping `[submitted, finished)` intervals.
pub fn peak_inflight(timelines: &[RequestTimeline]) -> usize {
    let mut events: Vec<(Timestamp, i32)> = Vec::with_capacity(timelines.len() * 2);
    for t in timelines {
        events.push((t.submitted, 1));
        if let Some(f) = t.finished {
            events.push((f, -1));
        }
    }
    // A finish and a submission at the same instant do not overlap.
    events.sort();
    let (mut open, mut peak) = (0i64, 0i64);
    for (_, d) in events {
        open += i64::from(d);
        peak = peak.max(open);
    }
    peak as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub label: String,
    pub concurrency: usize,
    /// Requests issued. Equals the run's total unless interrupted.
    pub total_requests: usize,
    pub stream: bool,
    pub timeout_secs: f64,
    pub interrupted: bool,
    pub summary: Option<MetricsSummary>,
    pub checks: StreamChecks,
    pub timelines: Vec<RequestTimeline>,
    pub details: Vec<RequestDetail>,
    pub error: Option<String>,
}

impl BenchmarkReport {
    /// A report for a run that could not be carried out.
    pub fn failed(run: &BenchmarkRun, error: String) -> Self {
        Self {
            label: run.label.clone(),
            concurrency: run.concurrency,
            total_requests: 0,
            stream: run.stream,
            timeout_secs: run.timeout.as_secs_f64(),
            interrupted: false,
            summary: None,
            checks: StreamChecks::default(),
            timelines: Vec::new(),
            details: Vec::new(),
            error: Some(error),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub version: u32,
    pub reports: Vec<BenchmarkReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
    Table,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "table" => Ok(Format::Table),
            _ => Err(format!("unknown format {s:?} (json, csv or table)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub fn write_json<W: Write>(reports: &[BenchmarkReport], out: W) -> Result<(), ReportError> {
    let file = ReportFile { version: REPORT_VERSION, reports: reports.to_vec() };
    serde_json::to_writer_pretty(out, &file)?;
    Ok(())
}

pub fn read_json(text: &str) -> Result<ReportFile, ReportError> {
    Ok(serde_json::from_str(text)?)
}

/// Column names of the per-run CSV.
pub fn csv_columns() -> Vec<&'static str> {
    let mut cols = vec!["label", "concurrency", "stream", "error"];
    cols.extend(SUMMARY_COLUMNS);
    cols
}

fn cell(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Null => String::new(),
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One row per run with every summary field.
pub fn write_csv<W: Write>(reports: &[BenchmarkReport], out: W) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_columns())?;
    for r in reports {
        let mut row =
            vec![r.label.clone(), r.concurrency.to_string(), r.stream.to_string(), r.error.clone().unwrap_or_default()];
        let summary = r.summary.as_ref().map(serde_json::to_value).transpose()?;
        for col in SUMMARY_COLUMNS {
            row.push(summary.as_ref().map(|s| cell(&s[col])).unwrap_or_default());
        }
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per (run, metric), ordered as the runs are.
pub fn write_long_csv<W: Write>(reports: &[BenchmarkReport], out: W) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "concurrency", "metric", "mean_ms", "p50_ms", "p90_ms", "p99_ms"])?;
    let f = |v: f64| format!("{v:.4}");
    for r in reports {
        let Some(s) = &r.summary else { continue };
        for m in Metric::ALL {
            let row = match s.stats(m) {
                Some(st) => [f(st.mean), f(st.p50), f(st.p90), f(st.p99)],
                None => Default::default(),
            };
            w.write_record([r.label.clone(), r.concurrency.to_string(), m.name().to_string()].into_iter().chain(row))?;
        }
        let tput = format!("{:.4}", s.throughput_tok_s);
        w.write_record([r.label.as_str(), &r.concurrency.to_string(), "throughput_tok_s", &tput, "", "", ""])?;
    }
    w.flush()?;
    Ok(())
}

/// Concurrency × TTFT/TBT table. Runs where most requests timed out show
/// "Timeout" instead of numbers.
pub fn write_table<W: Write>(reports: &[BenchmarkReport], mut out: W) -> Result<(), ReportError> {
    writeln!(
        out,
        "{:<12} {:>6} {:>12} {:>12} {:>12} {:>12} {:>12} {:>9}",
        "label", "c", "TTFT mean", "TTFT p50", "TBT mean", "TBT p50", "tok/s", "timeout"
    )?;
    for r in reports {
        let label = if r.label.is_empty() { "-" } else { r.label.as_str() };
        let Some(s) = &r.summary else {
            writeln!(out, "{label:<12} {:>6} error: {}", r.concurrency, r.error.as_deref().unwrap_or("unknown"))?;
            continue;
        };
        let timed_out = s.timeout_fraction >= TIMEOUT_CELL_FRACTION;
        let ms = |v: Option<f64>| match v {
            _ if timed_out => "Timeout".to_string(),
            Some(v) => format!("{v:.2} ms"),
            None => "-".to_string(),
        };
        writeln!(
            out,
            "{label:<12} {:>6} {:>12} {:>12} {:>12} {:>12} {:>12.1} {:>8.1}%",
            r.concurrency,
            ms(s.ttft_user_ms_mean),
            ms(s.ttft_user_ms_p50),
            ms(s.tbt_ms_mean),
            ms(s.tbt_ms_p50),
            s.throughput_tok_s,
            s.timeout_fraction * 100.0,
        )?;
    }
    Ok(())
}

pub fn emit<W: Write>(reports: &[BenchmarkReport], format: Format, out: W) -> Result<(), ReportError> {
    match format {
        Format::Json => write_json(reports, out),
        Format::Csv => write_csv(reports, out),
        Format::Table => write_table(reports, out),
    }
}

/// Writes `report.json`, `runs.csv`, `metrics.csv` and `table.txt` into
/// `dir`, returning the paths.
pub fn write_dir(reports: &[BenchmarkReport], dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    std::fs::create_dir_all(dir)?;
    let paths = ["report.json", "runs.csv", "metrics.csv", "table.txt"].map(|n| dir.join(n));
    write_json(reports, std::fs::File::create(&paths[0])?)?;
    write_csv(reports, std::fs::File::create(&paths[1])?)?;
    write_long_csv(reports, std::fs::File::create(&paths[2])?)?;
    write_table(reports, std::fs::File::create(&paths[3])?)?;
    Ok(paths.to_vec())
}
