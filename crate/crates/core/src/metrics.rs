//! Request lifecycle timelines and the latency/throughput metrics derived
//! from them.
//!
//! A [`RequestTimeline`] carries the seven lifecycle instants of one request:
//!
//! | field                    | meaning                                               |
//! |--------------------------|-------------------------------------------------------|
//! | `submitted`              | user submits the request                              |
//! | `router_received`        | router/gateway receives it                            |
//! | `engine_started`         | engine starts local inference                         |
//! | `engine_responded`       | engine finishes (buffered) or emits its first token   |
//! | `gateway_first_response` | gateway receives the first engine response            |
//! | `first_token`            | user receives the first token                         |
//! | `finished`               | user receives the full output                         |
//!
//! All metric functions are pure. Durations are integer nanoseconds; anything
//! involving a division is returned as `f64`.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestStatus {
    Completed,
    Timeout,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestTimeline {
    pub request_id: String,
    pub submitted: Timestamp,
    pub router_received: Option<Timestamp>,
    pub engine_started: Option<Timestamp>,
    pub engine_responded: Option<Timestamp>,
    pub gateway_first_response: Option<Timestamp>,
    pub first_token: Option<Timestamp>,
    pub finished: Option<Timestamp>,
    pub n_generated: u64,
    pub status: RequestStatus,
}

impl RequestTimeline {
    /// A timeline with only the submission instant known.
    pub fn submitted(request_id: impl Into<String>, at: Timestamp) -> Self {
        Self {
            request_id: request_id.into(),
            submitted: at,
            router_received: None,
            engine_started: None,
            engine_responded: None,
            gateway_first_response: None,
            first_token: None,
            finished: None,
            n_generated: 0,
            status: RequestStatus::Failed,
        }
    }

    /// A completed timeline with every instant populated.
    pub fn completed(request_id: impl Into<String>, instants: [Timestamp; 7], n_generated: u64) -> Self {
        let [t0, t1, t2, t3, t4, t5, t6] = instants;
        Self {
            request_id: request_id.into(),
            submitted: t0,
            router_received: Some(t1),
            engine_started: Some(t2),
            engine_responded: Some(t3),
            gateway_first_response: Some(t4),
            first_token: Some(t5),
            finished: Some(t6),
            n_generated,
            status: RequestStatus::Completed,
        }
    }

    /// Checks the ordering and token-count invariants of a completed
    /// timeline. Missing server-side instants are allowed.
    pub fn validate(&self) -> Result<(), MetricError> {
        if self.status != RequestStatus::Completed {
            return Ok(());
        }
        if self.n_generated < 1 {
            return Err(MetricError::InsufficientTokens { n_generated: self.n_generated, required: 1 });
        }
        let chain = [
            Some(self.submitted),
            self.router_received,
            self.engine_started,
            self.engine_responded,
            self.gateway_first_response,
            self.first_token,
            self.finished,
        ];
        let mut last = self.submitted;
        for t in chain.into_iter().flatten() {
            if t < last {
                return Err(MetricError::OutOfOrder);
            }
            last = t;
        }
        Ok(())
    }
}

/// `[start, end]` of a concurrent run and the tokens generated within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunWindow {
    pub start: Timestamp,
    pub end: Timestamp,
    pub total_tokens: u64,
}

impl RunWindow {
    pub fn new(start: Timestamp, end: Timestamp, total_tokens: u64) -> Result<Self, MetricError> {
        if end <= start {
            return Err(MetricError::DegenerateWindow);
        }
        Ok(Self { start, end, total_tokens })
    }

    pub fn duration(&self) -> Duration {
        self.end.saturating_since(self.start)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("metric undefined for a request with status {0:?}")]
    NotCompleted(RequestStatus),
    #[error("timeline is missing the `{0}` instant")]
    MissingInstant(&'static str),
    #[error("timeline instants are out of order")]
    OutOfOrder,
    #[error("{n_generated} generated tokens, need at least {required}")]
    InsufficientTokens { n_generated: u64, required: u64 },
    #[error("run window must end after it starts")]
    DegenerateWindow,
    #[error("cannot aggregate an empty set of timelines")]
    EmptyInput,
}

fn require_completed(tl: &RequestTimeline) -> Result<(), MetricError> {
    match tl.status {
        RequestStatus::Completed => Ok(()),
        other => Err(MetricError::NotCompleted(other)),
    }
}

fn instant(value: Option<Timestamp>, name: &'static str) -> Result<Timestamp, MetricError> {
    value.ok_or(MetricError::MissingInstant(name))
}

fn span(later: Timestamp, earlier: Timestamp) -> Result<Duration, MetricError> {
    later.checked_since(earlier).ok_or(MetricError::OutOfOrder)
}

/// Time for the user to see the response: first token minus submission.
pub fn average_latency(tl: &RequestTimeline) -> Result<Duration, MetricError> {
    require_completed(tl)?;
    span(instant(tl.first_token, "first_token")?, tl.submitted)
}

/// Full end-to-end latency: final token minus submission.
pub fn e2e_latency(tl: &RequestTimeline) -> Result<Duration, MetricError> {
    require_completed(tl)?;
    span(instant(tl.finished, "finished")?, tl.submitted)
}

/// Time spent outside the engine on the way in and on the way back out.
pub fn gateway_latency(tl: &RequestTimeline) -> Result<Duration, MetricError> {
    require_completed(tl)?;
    let started = instant(tl.engine_started, "engine_started")?;
    let responded = instant(tl.engine_responded, "engine_responded")?;
    let first = instant(tl.first_token, "first_token")?;
    Ok(span(started, tl.submitted)? + span(first, responded)?)
}

pub fn engine_latency(tl: &RequestTimeline) -> Result<Duration, MetricError> {
    require_completed(tl)?;
    let started = instant(tl.engine_started, "engine_started")?;
    let responded = instant(tl.engine_responded, "engine_responded")?;
    span(responded, started)
}

/// Time to first token measured at the gateway: first engine response
/// arriving at the gateway minus submission.
pub fn ttft(tl: &RequestTimeline) -> Result<Duration, MetricError> {
    require_completed(tl)?;
    span(instant(tl.gateway_first_response, "gateway_first_response")?, tl.submitted)
}

/// Time to first token as the user observes it.
pub fn ttft_user(tl: &RequestTimeline) -> Result<Duration, MetricError> {
    require_completed(tl)?;
    span(instant(tl.first_token, "first_token")?, tl.submitted)
}

/// Mean gap between consecutive tokens after the first, in nanoseconds.
pub fn tbt(tl: &RequestTimeline) -> Result<f64, MetricError> {
    require_completed(tl)?;
    if tl.n_generated < 2 {
        return Err(MetricError::InsufficientTokens { n_generated: tl.n_generated, required: 2 });
    }
    let gap = span(instant(tl.finished, "finished")?, instant(tl.first_token, "first_token")?)?;
    Ok(gap.as_nanos() as f64 / (tl.n_generated - 1) as f64)
}

/// Tokens per second over the run window.
pub fn throughput(w: &RunWindow) -> Result<f64, MetricError> {
    if w.end <= w.start {
        return Err(MetricError::DegenerateWindow);
    }
    let secs = (w.end.0 - w.start.0) as f64 / 1e9;
    Ok(w.total_tokens as f64 / secs)
}

/// The per-request metrics that [`aggregate`] summarises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    AverageLatency,
    E2eLatency,
    GatewayLatency,
    EngineLatency,
    Ttft,
    TtftUser,
    Tbt,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::AverageLatency,
        Metric::E2eLatency,
        Metric::GatewayLatency,
        Metric::EngineLatency,
        Metric::Ttft,
        Metric::TtftUser,
        Metric::Tbt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::AverageLatency => "average_latency",
            Metric::E2eLatency => "e2e_latency",
            Metric::GatewayLatency => "gateway_latency",
            Metric::EngineLatency => "engine_latency",
            Metric::Ttft => "ttft",
            Metric::TtftUser => "ttft_user",
            Metric::Tbt => "tbt",
        }
    }

    /// Value in nanoseconds.
    pub fn eval(self, tl: &RequestTimeline) -> Result<f64, MetricError> {
        let d = match self {
            Metric::AverageLatency => average_latency(tl)?,
            Metric::E2eLatency => e2e_latency(tl)?,
            Metric::GatewayLatency => gateway_latency(tl)?,
            Metric::EngineLatency => engine_latency(tl)?,
            Metric::Ttft => ttft(tl)?,
            Metric::TtftUser => ttft_user(tl)?,
            Metric::Tbt => return tbt(tl),
        };
        Ok(d.as_nanos() as f64)
    }
}

/// Mean and nearest-rank percentiles, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

/// Nearest-rank percentile of an ascending sample: the value at 1-based
/// rank `ceil(p/100 * n)`.
pub fn nearest_rank(sorted: &[f64], pct: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = ((pct / 100.0) * n as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, n) - 1])
}

impl Stats {
    /// Summarises nanosecond samples; `None` when there are none.
    pub fn from_nanos(mut samples: Vec<f64>) -> Option<Stats> {
        if samples.is_empty() {
            return None;
        }
        samples.sort_by(f64::total_cmp);
        let to_ms = |ns: f64| ns / 1e6;
        let sum: f64 = samples.iter().sum();
        Some(Stats {
            mean: to_ms(sum / samples.len() as f64),
            p50: to_ms(nearest_rank(&samples, 50.0)?),
            p90: to_ms(nearest_rank(&samples, 90.0)?),
            p99: to_ms(nearest_rank(&samples, 99.0)?),
        })
    }
}

/// Aggregate view of one run. Serialises as a flat record: the field names
/// below are the column names of the CSV report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub count_total: u64,
    pub count_completed: u64,
    pub count_timeout: u64,
    pub count_failed: u64,
    pub timeout_fraction: f64,
    pub total_tokens: u64,
    pub window_secs: f64,
    pub throughput_tok_s: f64,
    pub average_latency_ms_mean: Option<f64>,
    pub average_latency_ms_p50: Option<f64>,
    pub average_latency_ms_p90: Option<f64>,
    pub average_latency_ms_p99: Option<f64>,
    pub e2e_latency_ms_mean: Option<f64>,
    pub e2e_latency_ms_p50: Option<f64>,
    pub e2e_latency_ms_p90: Option<f64>,
    pub e2e_latency_ms_p99: Option<f64>,
    pub gateway_latency_ms_mean: Option<f64>,
    pub gateway_latency_ms_p50: Option<f64>,
    pub gateway_latency_ms_p90: Option<f64>,
    pub gateway_latency_ms_p99: Option<f64>,
    pub engine_latency_ms_mean: Option<f64>,
    pub engine_latency_ms_p50: Option<f64>,
    pub engine_latency_ms_p90: Option<f64>,
    pub engine_latency_ms_p99: Option<f64>,
    pub ttft_ms_mean: Option<f64>,
    pub ttft_ms_p50: Option<f64>,
    pub ttft_ms_p90: Option<f64>,
    pub ttft_ms_p99: Option<f64>,
    pub ttft_user_ms_mean: Option<f64>,
    pub ttft_user_ms_p50: Option<f64>,
    pub ttft_user_ms_p90: Option<f64>,
    pub ttft_user_ms_p99: Option<f64>,
    pub tbt_ms_mean: Option<f64>,
    pub tbt_ms_p50: Option<f64>,
    pub tbt_ms_p90: Option<f64>,
    pub tbt_ms_p99: Option<f64>,
}

/// Column names of the flat summary record, in serialisation order.
pub const SUMMARY_COLUMNS: [&str; 36] = [
    "count_total",
    "count_completed",
    "count_timeout",
    "count_failed",
    "timeout_fraction",
    "total_tokens",
    "window_secs",
    "throughput_tok_s",
    "average_latency_ms_mean",
    "average_latency_ms_p50",
    "average_latency_ms_p90",
    "average_latency_ms_p99",
    "e2e_latency_ms_mean",
    "e2e_latency_ms_p50",
    "e2e_latency_ms_p90",
    "e2e_latency_ms_p99",
    "gateway_latency_ms_mean",
    "gateway_latency_ms_p50",
    "gateway_latency_ms_p90",
    "gateway_latency_ms_p99",
    "engine_latency_ms_mean",
    "engine_latency_ms_p50",
    "engine_latency_ms_p90",
    "engine_latency_ms_p99",
    "ttft_ms_mean",
    "ttft_ms_p50",
    "ttft_ms_p90",
    "ttft_ms_p99",
    "ttft_user_ms_mean",
    "ttft_user_ms_p50",
    "ttft_user_ms_p90",
    "ttft_user_ms_p99",
    "tbt_ms_mean",
    "tbt_ms_p50",
    "tbt_ms_p90",
    "tbt_ms_p99",
];

fn split(stats: Option<Stats>) -> [Option<f64>; 4] {
    match stats {
        Some(s) => [Some(s.mean), Some(s.p50), Some(s.p90), Some(s.p99)],
        None => [None; 4],
    }
}

fn join(mean: Option<f64>, p50: Option<f64>, p90: Option<f64>, p99: Option<f64>) -> Option<Stats> {
    Some(Stats { mean: mean?, p50: p50?, p90: p90?, p99: p99? })
}

impl MetricsSummary {
    pub fn stats(&self, metric: Metric) -> Option<Stats> {
        match metric {
            Metric::AverageLatency => join(
                self.average_latency_ms_mean,
                self.average_latency_ms_p50,
                self.average_latency_ms_p90,
                self.average_latency_ms_p99,
            ),
            Metric::E2eLatency => join(
                self.e2e_latency_ms_mean,
                self.e2e_latency_ms_p50,
                self.e2e_latency_ms_p90,
                self.e2e_latency_ms_p99,
            ),
            Metric::GatewayLatency => join(
                self.gateway_latency_ms_mean,
                self.gateway_latency_ms_p50,
                self.gateway_latency_ms_p90,
                self.gateway_latency_ms_p99,
            ),
            Metric::EngineLatency => join(
                self.engine_latency_ms_mean,
                self.engine_latency_ms_p50,
                self.engine_latency_ms_p90,
                self.engine_latency_ms_p99,
            ),
            Metric::Ttft => join(self.ttft_ms_mean, self.ttft_ms_p50, self.ttft_ms_p90, self.ttft_ms_p99),
            Metric::TtftUser => {
                join(self.ttft_user_ms_mean, self.ttft_user_ms_p50, self.ttft_user_ms_p90, self.ttft_user_ms_p99)
            }
            Metric::Tbt => join(self.tbt_ms_mean, self.tbt_ms_p50, self.tbt_ms_p90, self.tbt_ms_p99),
        }
    }

    /// Writes the CSV header and this summary as one row.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.serialize(self)?;
        w.flush()?;
        Ok(())
    }
}

/// Summarises a run. Latency statistics cover completed requests only;
/// every request's generated tokens count toward the window's throughput.
pub fn aggregate(timelines: &[RequestTimeline], window: &RunWindow) -> Result<MetricsSummary, MetricError> {
    if timelines.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let count = |s: RequestStatus| timelines.iter().filter(|t| t.status == s).count() as u64;
    let count_total = timelines.len() as u64;
    let count_timeout = count(RequestStatus::Timeout);

    let completed: Vec<&RequestTimeline> = timelines.iter().filter(|t| t.status == RequestStatus::Completed).collect();
    let per_metric = |m: Metric| {
        let samples: Vec<f64> = completed.iter().filter_map(|t| m.eval(t).ok()).collect();
        split(Stats::from_nanos(samples))
    };
    let [average_latency_ms_mean, average_latency_ms_p50, average_latency_ms_p90, average_latency_ms_p99] =
        per_metric(Metric::AverageLatency);
    let [e2e_latency_ms_mean, e2e_latency_ms_p50, e2e_latency_ms_p90, e2e_latency_ms_p99] =
        per_metric(Metric::E2eLatency);
    let [gateway_latency_ms_mean, gateway_latency_ms_p50, gateway_latency_ms_p90, gateway_latency_ms_p99] =
        per_metric(Metric::GatewayLatency);
    let [engine_latency_ms_mean, engine_latency_ms_p50, engine_latency_ms_p90, engine_latency_ms_p99] =
        per_metric(Metric::EngineLatency);
    let [ttft_ms_mean, ttft_ms_p50, ttft_ms_p90, ttft_ms_p99] = per_metric(Metric::Ttft);
    let [ttft_user_ms_mean, ttft_user_ms_p50, ttft_user_ms_p90, ttft_user_ms_p99] = per_metric(Metric::TtftUser);
    let [tbt_ms_mean, tbt_ms_p50, tbt_ms_p90, tbt_ms_p99] = per_metric(Metric::Tbt);

    Ok(MetricsSummary {
        count_total,
        count_completed: completed.len() as u64,
        count_timeout,
        count_failed: count(RequestStatus::Failed),
        timeout_fraction: count_timeout as f64 / count_total as f64,
        total_tokens: window.total_tokens,
        window_secs: window.duration().as_secs_f64(),
        throughput_tok_s: throughput(window)?,
        average_latency_ms_mean,
        average_latency_ms_p50,
        average_latency_ms_p90,
        average_latency_ms_p99,
        e2e_latency_ms_mean,
        e2e_latency_ms_p50,
        e2e_latency_ms_p90,
        e2e_latency_ms_p99,
        gateway_latency_ms_mean,
        gateway_latency_ms_p50,
        gateway_latency_ms_p90,
        gateway_latency_ms_p99,
        engine_latency_ms_mean,
        engine_latency_ms_p50,
        engine_latency_ms_p90,
        engine_latency_ms_p99,
        ttft_ms_mean,
        ttft_ms_p50,
        ttft_ms_p90,
        ttft_ms_p99,
        ttft_user_ms_mean,
        ttft_user_ms_p50,
        ttft_user_ms_p90,
        ttft_user_ms_p99,
        tbt_ms_mean,
        tbt_ms_p50,
        tbt_ms_p90,
        tbt_ms_p99,
    })
}
