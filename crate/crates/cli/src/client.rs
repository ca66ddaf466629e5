//! Closed-loop load generator against an OpenAI-compatible endpoint.
//!
//! Each of the `c` workers keeps exactly one request open and submits the
//! next one as soon as its previous one ends, so in-flight requests never
//! exceed `c`. Workers record their own timelines; nothing is shared until
//! the run is over.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use futures::StreamExt;
use gatewise_core::clock::Timestamp;
use gatewise_core::metrics::{aggregate, MetricError, RequestStatus, RequestTimeline, RunWindow};
use gatewise_core::trailer::ServerTiming;
use gatewise_gateway::api::{ChatChunk, ChatCompletion};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::dataset::{sample_prompts, PromptRecord};
use crate::report::{BenchmarkReport, RequestDetail, StreamChecks};

/// Requests per unit of concurrency when no total is given.
pub const REQUESTS_PER_CONCURRENCY: usize = 20;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRun {
    /// Base URL, e.g. `http://127.0.0.1:8080`.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub concurrency: usize,
    /// Overrides `20 × concurrency`.
    pub total_requests: Option<usize>,
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
    pub stream: bool,
    pub max_tokens: u32,
    pub model: String,
    pub seed: u64,
    pub label: String,
}

mod duration_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

impl BenchmarkRun {
    pub fn new(endpoint: impl Into<String>, concurrency: usize) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: None,
            concurrency,
            total_requests: None,
            timeout: DEFAULT_TIMEOUT,
            stream: true,
            max_tokens: gatewise_core::engine::DEFAULT_MAX_TOKENS,
            model: "default".into(),
            seed: 0,
            label: String::new(),
        }
    }

    pub fn total(&self) -> usize {
        self.total_requests.unwrap_or(REQUESTS_PER_CONCURRENCY * self.concurrency)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.concurrency == 0 {
            return Err(BenchError::InvalidRun("concurrency must be positive".into()));
        }
        if self.timeout.is_zero() {
            return Err(BenchError::InvalidRun("timeout must be positive".into()));
        }
        if self.total() == 0 {
            return Err(BenchError::InvalidRun("total_requests must be positive".into()));
        }
        Ok(())
    }

    fn chat_url(&self) -> String {
        format!("{}/v1/chat/completions", self.endpoint.trim_end_matches('/'))
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid run: {0}")]
    InvalidRun(String),
    #[error("endpoint {endpoint} unreachable: {reason}")]
    Unreachable { endpoint: String, reason: String },
    #[error("no prompts to send")]
    NoPrompts,
    #[error(transparent)]
    Metrics(#[from] MetricError),
    #[error("http client: {0}")]
    Client(#[from] reqwest::Error),
}

#[derive(Debug, Default)]
struct Progress {
    first_token: Option<Timestamp>,
    finished: Option<Timestamp>,
    tokens: u64,
    next_seq: u32,
    reordered: u64,
    timing: Option<ServerTiming>,
    done: bool,
    error: Option<String>,
    connect_error: bool,
}

enum Line {
    More,
    Stop,
}

impl Progress {
    fn handle_data(&mut self, data: &str) -> Line {
        if data == "[DONE]" {
            self.done = true;
            self.finished = Some(Timestamp::now());
            return Line::Stop;
        }
        let value: serde_json::Value = match serde_json::from_str(data) {
            Ok(v) => v,
            Err(e) => {
                self.error = Some(format!("bad event: {e}"));
                return Line::Stop;
            }
        };
        if let Some(err) = value.get("error") {
            self.error = Some(err.to_string());
            return Line::Stop;
        }
        let chunk: ChatChunk = match serde_json::from_value(value) {
            Ok(c) => c,
            Err(e) => {
                self.error = Some(format!("bad chunk: {e}"));
                return Line::Stop;
            }
        };
        let has_text = chunk.choices.first().and_then(|c| c.delta.content.as_deref()).is_some_and(|t| !t.is_empty());
        if has_text {
            self.first_token.get_or_insert_with(Timestamp::now);
            self.tokens += 1;
            if let Some(seq) = chunk.x_seq {
                if seq < self.next_seq {
                    self.reordered += 1;
                }
                self.next_seq = self.next_seq.max(seq + 1);
            }
        }
        if chunk.x_timeline.is_some() {
            self.timing = chunk.x_timeline;
        }
        Line::More
    }

    async fn drive(&mut self, client: &reqwest::Client, run: &BenchmarkRun, body: &serde_json::Value) {
        let mut req = client.post(run.chat_url()).json(body);
        if let Some(k) = &run.api_key {
            req = req.bearer_auth(k);
        }
        let resp = match req.send().await {
            Ok(r) => r,
            Err(e) => {
                self.connect_error = e.is_connect();
                self.error = Some(e.to_string());
                return;
            }
        };
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().await.unwrap_or_default();
            self.error = Some(format!("HTTP {status}: {text}"));
            return;
        }
        if !run.stream {
            match resp.json::<ChatCompletion>().await {
                Ok(c) => {
                    let now = Timestamp::now();
                    self.first_token = Some(now);
                    self.finished = Some(now);
                    self.tokens = u64::from(c.usage.completion_tokens);
                    self.timing = c.x_timeline;
                    self.done = true;
                }
                Err(e) => self.error = Some(e.to_string()),
            }
            return;
        }
        let mut body = resp.bytes_stream();
        let mut buf: Vec<u8> = Vec::new();
        while let Some(piece) = body.next().await {
            match piece {
                Ok(bytes) => buf.extend_from_slice(&bytes),
                Err(e) => {
                    self.error = Some(e.to_string());
                    return;
                }
            }
            while let Some(pos) = buf.iter().position(|&b| b == b'\n') {
                let line: Vec<u8> = buf.drain(..=pos).collect();
                let line = String::from_utf8_lossy(&line);
                let Some(data) = line.trim_end().strip_prefix("data:") else { continue };
                if let Line::Stop = self.handle_data(data.trim_start()) {
                    return;
                }
            }
        }
        if !self.done {
            self.error = Some("stream ended before [DONE]".into());
        }
    }
}

fn request_body(run: &BenchmarkRun, prompt: &PromptRecord) -> serde_json::Value {
    let mut messages = Vec::new();
    if !prompt.system.is_empty() {
        messages.push(serde_json::json!({"role": "system", "content": prompt.system}));
    }
    messages.push(serde_json::json!({"role": "user", "content": prompt.question}));
    serde_json::json!({
        "model": run.model,
        "messages": messages,
        "stream": run.stream,
        "max_tokens": run.max_tokens,
    })
}

struct Outcome {
    timeline: RequestTimeline,
    detail: RequestDetail,
    connect_error: bool,
}

async fn one_request(client: &reqwest::Client, run: &BenchmarkRun, index: usize, prompt: &PromptRecord) -> Outcome {
    let body = request_body(run, prompt);
    let submitted = Timestamp::now();
    let mut p = Progress::default();
    let timed_out = tokio::time::timeout(run.timeout, p.drive(client, run, &body)).await.is_err();

    let mut tl = RequestTimeline::submitted(format!("req-{index}"), submitted);
    tl.n_generated = p.tokens;
    tl.first_token = p.first_token;
    tl.status = if timed_out {
        RequestStatus::Timeout
    } else if p.done && p.error.is_none() {
        RequestStatus::Completed
    } else {
        RequestStatus::Failed
    };
    tl.finished = Some(p.finished.unwrap_or_else(Timestamp::now));
    let mut detail = RequestDetail {
        replica_id: p.timing.as_ref().map(|t| t.replica_id.clone()),
        error: if timed_out { Some("deadline exceeded".into()) } else { p.error.clone() },
        reordered: p.reordered,
        lost_tokens: 0,
        engine_total_tokens: p.timing.as_ref().map(|t| t.engine_total_tokens),
    };
    if tl.status == RequestStatus::Completed {
        let first = *tl.first_token.get_or_insert(tl.finished.expect("set above"));
        if let Some(t) = &p.timing {
            let placed = t.place(submitted, first);
            tl.router_received = Some(placed.router_received);
            tl.engine_started = Some(placed.engine_started);
            tl.engine_responded = Some(placed.engine_responded);
            tl.gateway_first_response = Some(placed.gateway_first_response);
            detail.lost_tokens = t.engine_total_tokens.saturating_sub(p.tokens);
        }
    }
    Outcome { timeline: tl, detail, connect_error: p.connect_error }
}

/// Runs the benchmark to completion.
pub async fn run_benchmark(run: &BenchmarkRun, prompts: &[PromptRecord]) -> Result<BenchmarkReport, BenchError> {
    run_benchmark_until(run, prompts, Arc::new(AtomicBool::new(false))).await
}

/// Like [`run_benchmark`], but stops issuing new requests once `stop` is
/// set; the report then covers the requests already issued.
pub async fn run_benchmark_until(
    run: &BenchmarkRun,
    prompts: &[PromptRecord],
    stop: Arc<AtomicBool>,
) -> Result<BenchmarkReport, BenchError> {
    run.validate()?;
    if prompts.is_empty() {
        return Err(BenchError::NoPrompts);
    }
    let total = run.total();
    let prompts: Arc<Vec<PromptRecord>> = Arc::new(sample_prompts(prompts, total, run.seed));
    let client = reqwest::Client::builder().pool_max_idle_per_host(run.concurrency).build()?;
    let shared = Arc::new(run.clone());
    let next = Arc::new(AtomicUsize::new(0));
    info!(endpoint = %run.endpoint, concurrency = run.concurrency, total, "starting run");

    let workers: Vec<_> = (0..run.concurrency)
        .map(|_| {
            let (client, run, prompts, next, stop) =
                (client.clone(), shared.clone(), prompts.clone(), next.clone(), stop.clone());
            tokio::spawn(async move {
                let mut out = Vec::new();
                loop {
                    if stop.load(Ordering::Relaxed) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= prompts.len() {
                        break;
                    }
                    out.push((i, one_request(&client, &run, i, &prompts[i]).await));
                }
                out
            })
        })
        .collect();
    let mut outcomes = Vec::with_capacity(total);
    for w in workers {
        outcomes.extend(w.await.expect("worker panicked"));
    }
    outcomes.sort_by_key(|(i, _)| *i);
    let interrupted = outcomes.len() < total;
    if interrupted {
        warn!(issued = outcomes.len(), total, "run interrupted");
    }
    if outcomes.is_empty() {
        return Err(BenchError::InvalidRun("interrupted before any request was issued".into()));
    }
    let completed = outcomes.iter().filter(|(_, o)| o.timeline.status == RequestStatus::Completed).count();
    if completed == 0 && outcomes.iter().all(|(_, o)| o.connect_error) {
        let reason = outcomes[0].1.detail.error.clone().unwrap_or_default();
        return Err(BenchError::Unreachable { endpoint: run.endpoint.clone(), reason });
    }

    let (timelines, details): (Vec<_>, Vec<_>) = outcomes.into_iter().map(|(_, o)| (o.timeline, o.detail)).unzip();
    let checks = StreamChecks::from_run(&timelines, &details);
    let start = timelines.iter().map(|t| t.submitted).min().expect("nonempty");
    let end = timelines.iter().filter_map(|t| t.finished).max().expect("every request finishes");
    let tokens = timelines.iter().map(|t| t.n_generated).sum();
    let window = RunWindow::new(start, end, tokens)?;
    let summary = aggregate(&timelines, &window)?;
    Ok(BenchmarkReport {
        label: run.label.clone(),
        concurrency: run.concurrency,
        total_requests: timelines.len(),
        stream: run.stream,
        timeout_secs: run.timeout.as_secs_f64(),
        interrupted,
        summary: Some(summary),
        checks,
        timelines,
        details,
        error: None,
    })
}

/// Runs one benchmark per concurrency, in order, pausing `cooldown`
/// between runs. A failed run is kept as a report carrying its error.
pub async fn sweep(
    concurrencies: &[usize],
    base: &BenchmarkRun,
    prompts: &[PromptRecord],
    cooldown: Duration,
) -> Vec<BenchmarkReport> {
    let mut out = Vec::with_capacity(concurrencies.len());
    for (k, &c) in concurrencies.iter().enumerate() {
        if k > 0 && !cooldown.is_zero() {
            tokio::time::sleep(cooldown).await;
        }
        let run = BenchmarkRun { concurrency: c, ..base.clone() };
        match run_benchmark(&run, prompts).await {
            Ok(r) => out.push(r),
            Err(e) => {
                warn!(concurrency = c, error = %e, "run failed");
                out.push(BenchmarkReport::failed(&run, e.to_string()));
            }
        }
    }
    out
}
