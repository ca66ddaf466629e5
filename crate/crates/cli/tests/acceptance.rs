//! Acceptance suite. Each test prints one PASS/FAIL line to stderr, which
//! the test harness does not capture, and then asserts the verdict.
//!
//! The tests share one lock so the timing-sensitive ones never overlap.
//! Run with `cargo test -p gatewise-cli --test acceptance`.

// Each async test owns its runtime, so holding the std lock across awaits
// only blocks other tests, which is the point.
#![allow(clippy::await_holding_lock)]

mod support;

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use gatewise_cli::report::write_table;
use gatewise_cli::simulate::{self, SimPoint};
use gatewise_cli::{dataset, run_benchmark, BenchmarkRun};
use gatewise_core::calibration;
use gatewise_core::clock::Timestamp;
use gatewise_core::engine::{BatchScheduler, KvPolicy, LatencyModel, ReplicaConfig, SchedEvent, SimRequest};
use gatewise_core::metrics::{
    aggregate, average_latency, engine_latency, gateway_latency, nearest_rank, Metric, RequestStatus, RequestTimeline,
    RunWindow,
};
use gatewise_core::router::{default_pool_cap, dispatches_while_unhealthy, RoutingEvent};
use gatewise_core::sim::WorkloadSpec;
use gatewise_gateway::observe::{read_dir_records, ObservationStatus};
use gatewise_gateway::ContentFilter;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::*;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, name: &str, pass: bool, detail: String) {
    let line = format!("criterion {n} [{name}]: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

// ---------------------------------------------------------------------------
// 1. Metric formulas
// ---------------------------------------------------------------------------

fn random_timeline(rng: &mut ChaCha8Rng, i: usize) -> RequestTimeline {
    let mut t: u64 = rng.random_range(0..1 << 40);
    let mut inst = [Timestamp::ZERO; 7];
    for slot in &mut inst {
        *slot = Timestamp(t);
        t += match rng.random_range(0..10) {
            0 => 0,
            1..=3 => rng.random_range(0..1_000),
            _ => rng.random_range(0..2_000_000_000),
        };
    }
    let n = match rng.random_range(0..10) {
        0 => 1,
        1 => 2,
        _ => rng.random_range(1..=512),
    };
    RequestTimeline::completed(format!("t{i}"), inst, n)
}

/// Every metric straight from the seven raw instants, in nanoseconds.
fn brute_force(tl: &RequestTimeline) -> [Option<f64>; 7] {
    let t0 = tl.submitted.0;
    let [t2, t3, t4, t5, t6] =
        [tl.engine_started, tl.engine_responded, tl.gateway_first_response, tl.first_token, tl.finished]
            .map(|t| t.unwrap().0);
    let tbt = (tl.n_generated >= 2).then(|| (t6 - t5) as f64 / (tl.n_generated - 1) as f64);
    [
        Some((t5 - t0) as f64),
        Some((t6 - t0) as f64),
        Some(((t2 - t0) + (t5 - t3)) as f64),
        Some((t3 - t2) as f64),
        Some((t4 - t0) as f64),
        Some((t5 - t0) as f64),
        tbt,
    ]
}

/// Nearest-rank percentile by counting: the smallest sample with at least
/// `pct`% of the samples at or below it.
fn brute_percentile(samples: &[f64], pct: u32) -> f64 {
    let n = samples.len();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    for (k, v) in sorted.iter().enumerate() {
        if (k + 1) * 100 >= pct as usize * n {
            return *v;
        }
    }
    unreachable!()
}

#[test]
fn criterion_1_metric_oracle() {
    let _g = serial();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let timelines: Vec<RequestTimeline> = (0..1000).map(|i| random_timeline(&mut rng, i)).collect();
    let mut mismatches = 0usize;
    let mut identity_breaks = 0usize;
    for tl in &timelines {
        let expected = brute_force(tl);
        for (m, want) in Metric::ALL.iter().zip(expected) {
            match (m.eval(tl).ok(), want) {
                (Some(got), Some(want)) if got.to_bits() == want.to_bits() => {}
                (None, None) => {}
                _ => mismatches += 1,
            }
        }
        let (g, e, a) = (gateway_latency(tl).unwrap(), engine_latency(tl).unwrap(), average_latency(tl).unwrap());
        if g + e != a {
            identity_breaks += 1;
        }
    }

    // Aggregates: throughput and nearest-rank percentiles over the set.
    let start = timelines.iter().map(|t| t.submitted).min().unwrap();
    let end = timelines.iter().filter_map(|t| t.finished).max().unwrap();
    let tokens: u64 = timelines.iter().map(|t| t.n_generated).sum();
    let summary = aggregate(&timelines, &RunWindow::new(start, end, tokens).unwrap()).unwrap();
    let want_tput = tokens as f64 / ((end.0 - start.0) as f64 / 1e9);
    if summary.throughput_tok_s.to_bits() != want_tput.to_bits() {
        mismatches += 1;
    }
    for (k, m) in Metric::ALL.iter().enumerate() {
        let samples: Vec<f64> = timelines.iter().filter_map(|t| brute_force(t)[k]).collect();
        let stats = summary.stats(*m).unwrap();
        for (pct, got) in [(50, stats.p50), (90, stats.p90), (99, stats.p99)] {
            if got.to_bits() != (brute_percentile(&samples, pct) / 1e6).to_bits() {
                mismatches += 1;
            }
        }
        assert_eq!(nearest_rank(&[1.0, 2.0], 50.0), Some(1.0));
    }
    let elapsed = started.elapsed();
    verdict(
        1,
        "metric oracle",
        mismatches == 0 && identity_breaks == 0 && elapsed < Duration::from_secs(1),
        format!("1000 timelines, {mismatches} mismatches, {identity_breaks} identity breaks, {elapsed:.2?}"),
    );
}

// ---------------------------------------------------------------------------
// 2. Scheduler safety
// ---------------------------------------------------------------------------

#[derive(Default)]
struct Violations {
    kv_over: usize,
    seq: usize,
    count: usize,
    unfinished: usize,
    stalled: usize,
}

fn check_workload(seed: u64, v: &mut Violations) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_batch = rng.random_range(1..=64);
    let n = rng.random_range(1..=24u64);
    let reqs: Vec<SimRequest> =
        (0..n).map(|i| SimRequest::new(i, rng.random_range(1..=256), rng.random_range(1..=128))).collect();
    let biggest = reqs.iter().map(SimRequest::kv_budget).max().unwrap();
    let all: u64 = reqs.iter().map(SimRequest::kv_budget).sum();
    let capacity = rng.random_range(biggest / 2..=all.max(biggest));
    let latency = LatencyModel::from_millis(
        rng.random_range(0.0..5.0),
        rng.random_range(0.0..0.05),
        rng.random_range(0.1..10.0),
        rng.random_range(0.0..0.5),
    );
    let mut cfg = ReplicaConfig::new("w", 1, 1, latency).with_capacity(capacity, max_batch);
    cfg.kv_policy = if rng.random_bool(0.5) { KvPolicy::ReserveFull } else { KvPolicy::Grow };
    let mut sched = BatchScheduler::new(&cfg);

    let mut accepted = std::collections::HashMap::new();
    let mut pending: Vec<SimRequest> = reqs.clone();
    let late = pending.split_off(pending.len() / 2);
    let mut late = late.into_iter();
    for r in pending {
        if sched.submit(r.clone(), sched.clock()).is_ok() {
            accepted.insert(r.request_id, r.target_output_tokens);
        }
    }
    let mut next_seq: std::collections::HashMap<u64, u32> = Default::default();
    let mut finished: std::collections::HashMap<u64, u32> = Default::default();
    let mut steps = 0;
    loop {
        // Trickle the second half in between iterations.
        if rng.random_bool(0.3) || !sched.has_work() {
            if let Some(r) = late.next() {
                if sched.submit(r.clone(), sched.clock()).is_ok() {
                    accepted.insert(r.request_id, r.target_output_tokens);
                }
            }
        }
        if !sched.has_work() && late.len() == 0 {
            break;
        }
        steps += 1;
        if steps > 200_000 {
            v.stalled += 1;
            break;
        }
        let out = sched.step();
        if sched.kv_used() > sched.kv_capacity() {
            v.kv_over += 1;
        }
        for e in out.events {
            match e {
                SchedEvent::Token { request_id, seq, .. } => {
                    let want = next_seq.entry(request_id).or_insert(0);
                    if seq != *want || !accepted.contains_key(&request_id) {
                        v.seq += 1;
                    }
                    *want = seq + 1;
                }
                SchedEvent::Finished { request_id, total_tokens, .. } => {
                    finished.insert(request_id, total_tokens);
                }
                _ => {}
            }
        }
    }
    for (id, target) in &accepted {
        match finished.get(id) {
            Some(total) if total == target && next_seq.get(id) == Some(target) => {}
            Some(_) => v.count += 1,
            None => v.unfinished += 1,
        }
    }
    (accepted.len(), reqs.len() - accepted.len())
}

#[test]
fn criterion_2_scheduler_safety() {
    let _g = serial();
    let started = Instant::now();
    let mut v = Violations::default();
    let (mut accepted, mut rejected) = (0, 0);
    for seed in 0..10_000 {
        let (a, r) = check_workload(seed, &mut v);
        accepted += a;
        rejected += r;
    }
    let elapsed = started.elapsed();
    let clean = v.kv_over + v.seq + v.count + v.unfinished + v.stalled == 0;
    verdict(
        2,
        "scheduler safety",
        clean && elapsed < Duration::from_secs(30),
        format!(
            "10000 workloads, {accepted} accepted, {rejected} rejected; kv overruns {}, seq breaks {}, count errors {}, unfinished {}, stalled {}; {elapsed:.2?}",
            v.kv_over, v.seq, v.count, v.unfinished, v.stalled
        ),
    );
}

// ---------------------------------------------------------------------------
// 3 and 4. Simulated layout sweep
// ---------------------------------------------------------------------------

const SWEPT: [usize; 6] = [1, 4, 16, 64, 128, 256];

fn layout_sweep(with_dynamic: bool) -> (Vec<SimPoint>, Duration) {
    let started = Instant::now();
    let mut layouts = simulate::static_layouts();
    if with_dynamic {
        layouts.push(simulate::dynamic_layout());
    }
    let points = simulate::sweep(&layouts, &SWEPT, &WorkloadSpec::default()).unwrap();
    (points, started.elapsed())
}

#[test]
fn criterion_3_layout_ordering() {
    let _g = serial();
    let (pts, elapsed) = layout_sweep(false);
    let t = |l: &str, c: usize| simulate::throughput(&pts, l, c).unwrap();
    let mut broken = Vec::new();
    for c in SWEPT.into_iter().filter(|&c| c <= 4) {
        if t("1xTP8", c) <= t("4xTP2", c) {
            broken.push(format!("c={c}: 1xTP8 {:.0} <= 4xTP2 {:.0}", t("1xTP8", c), t("4xTP2", c)));
        }
    }
    for c in SWEPT.into_iter().filter(|&c| c >= 128) {
        if !(t("4xTP2", c) > t("2xTP4", c) && t("2xTP4", c) > t("1xTP8", c)) {
            broken.push(format!("c={c}: order 4xTP2 > 2xTP4 > 1xTP8 violated"));
        }
    }
    let mut table = Vec::new();
    simulate::write_table(&pts, &mut table).unwrap();
    let _ = std::io::stderr().write_all(&table);
    verdict(
        3,
        "layout ordering",
        broken.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "c=1: TP8 {:.0} vs TP2 {:.0} tok/s; c=256: TP2 {:.0} > TP4 {:.0} > TP8 {:.0}; {elapsed:.2?}{}",
            t("1xTP8", 1),
            t("4xTP2", 1),
            t("4xTP2", 256),
            t("2xTP4", 256),
            t("1xTP8", 256),
            if broken.is_empty() { String::new() } else { format!("; {}", broken.join("; ")) }
        ),
    );
}

#[test]
fn criterion_4_dynamic_dominance() {
    let _g = serial();
    let (pts, elapsed) = layout_sweep(true);
    let mut worst = f64::INFINITY;
    let mut worst_c = 0;
    for c in SWEPT {
        let best = ["1xTP8", "2xTP4", "4xTP2"]
            .iter()
            .map(|l| simulate::throughput(&pts, l, c).unwrap())
            .fold(f64::MIN, f64::max);
        let ratio = simulate::throughput(&pts, "dynamic", c).unwrap() / best;
        if ratio < worst {
            worst = ratio;
            worst_c = c;
        }
    }
    verdict(
        4,
        "dynamic dominance",
        worst >= 0.95 && elapsed < Duration::from_secs(60),
        format!("worst dynamic/best-static ratio {worst:.3} at c={worst_c}; {elapsed:.2?}"),
    );
}

// ---------------------------------------------------------------------------
// 5. End-to-end streaming
// ---------------------------------------------------------------------------

async fn side_traffic(url: String) -> usize {
    let client = reqwest::Client::new();
    let chat = format!("{url}/v1/chat/completions");
    let good = |content: &str| serde_json::json!({"messages": [{"role": "user", "content": content}], "stream": true, "max_tokens": 8});
    let mut sent = 0;
    for i in 0..50 {
        let no_key = client.post(&chat).json(&good("hello")).send();
        let blocked = client.post(&chat).bearer_auth(KEY).json(&good("please say forbidden-term now")).send();
        let malformed = client.post(&chat).bearer_auth(KEY).body(format!("{{broken {i}")).send();
        let (a, b, c) = tokio::join!(no_key, blocked, malformed);
        assert_eq!(a.unwrap().status(), 401);
        assert_eq!(b.unwrap().status(), 422);
        assert_eq!(c.unwrap().status(), 400);
        sent += 3;
    }
    sent
}

#[tokio::test(flavor = "multi_thread")]
async fn criterion_5_end_to_end_streaming() {
    let _g = serial();
    let started = Instant::now();
    let model = calibration::scaled(calibration::preset(2).unwrap(), 0.1);
    let cl = cluster(4, model, 64).await;
    let dir = tempfile::tempdir().unwrap();
    let opts = GatewayOptions { filter: ContentFilter::new(["forbidden-term"]), ..Default::default() };
    let gw = gateway(&cl.topology, dir.path(), opts).await;

    let run = BenchmarkRun {
        api_key: Some(KEY.into()),
        max_tokens: 128,
        label: "e2e".into(),
        ..BenchmarkRun::new(gw.url(), 64)
    };
    let side = tokio::spawn(side_traffic(gw.url()));
    let report = run_benchmark(&run, &dataset::synthetic(100)).await.unwrap();
    let rejected_sent = side.await.unwrap();
    gw.state().sink().flush().await;

    let s = report.summary.as_ref().unwrap();
    let c = &report.checks;
    let conserved = s.count_completed + s.count_timeout + s.count_failed == 1280 && report.total_requests == 1280;
    let streams_ok = c.reordered_tokens == 0
        && c.lost_tokens == 0
        && c.token_count_mismatches == 0
        && c.with_server_timing == s.count_completed
        && c.peak_inflight <= 64;

    // Pipeline ordering, from the observation records and the routing log.
    let records = read_dir_records(dir.path()).unwrap();
    let mut order_breaks = 0;
    for r in &records {
        let gated = matches!(
            r.status,
            ObservationStatus::Unauthorized
                | ObservationStatus::RateLimited
                | ObservationStatus::BadRequest
                | ObservationStatus::Filtered
        );
        if gated && r.n_tokens == 0 && (r.attempts != 0 || r.dispatched.is_some()) {
            order_breaks += 1;
        }
        if let Some(d) = r.dispatched {
            match r.admitted {
                Some(a) if r.received <= a && a <= d => {}
                _ => order_breaks += 1,
            }
        }
    }
    let log = gw.state().registry().routing_log();
    let dispatched = log.iter().filter(|e| matches!(e, RoutingEvent::Dispatched { .. })).count();
    let attempts: u32 = records.iter().map(|r| r.attempts).sum();
    let records_ok = records.len() == 1280 + rejected_sent && dispatched == attempts as usize;
    let elapsed = started.elapsed();
    verdict(
        5,
        "end-to-end streaming",
        conserved && streams_ok && order_breaks == 0 && records_ok && elapsed < Duration::from_secs(300),
        format!(
            "{} completed, {} timeout, {} failed; reordered {}, lost {}, count mismatches {}; peak inflight {}; {} records, {} gated, {order_breaks} ordering breaks, {dispatched} dispatches = {attempts} attempts; {:.0} tok/s; {elapsed:.2?}",
            s.count_completed, s.count_timeout, s.count_failed, c.reordered_tokens, c.lost_tokens,
            c.token_count_mismatches, c.peak_inflight, records.len(), rejected_sent, s.throughput_tok_s
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Fault tolerance
// ---------------------------------------------------------------------------

#[tokio::test(flavor = "multi_thread")]
async fn criterion_6_fault_tolerance() {
    let _g = serial();
    let started = Instant::now();
    let cl = cluster(3, LatencyModel::from_millis(1.0, 0.002, 2.0, 0.05), 64).await;
    let dir = tempfile::tempdir().unwrap();
    let gw = gateway(&cl.topology, dir.path(), GatewayOptions::default()).await;

    let run = BenchmarkRun { api_key: Some(KEY.into()), max_tokens: 64, ..BenchmarkRun::new(gw.url(), 12) };
    let prompts = dataset::synthetic(50);
    let task = {
        let (run, prompts) = (run.clone(), prompts.clone());
        tokio::spawn(async move { run_benchmark(&run, &prompts).await.unwrap() })
    };
    tokio::time::sleep(Duration::from_millis(800)).await;
    cl.engines[1].kill().await;
    let report = task.await.unwrap();

    let total = report.timelines.len();
    let failed = |streaming: bool| {
        report
            .timelines
            .iter()
            .filter(|t| t.status == RequestStatus::Failed && (t.n_generated > 0) == streaming)
            .count()
    };
    let (pre_stream_failures, mid_stream_failures) = (failed(false), failed(true));
    let rate = pre_stream_failures as f64 / total as f64;
    let log = gw.state().registry().routing_log();
    let marked =
        log.iter().any(|e| matches!(e, RoutingEvent::MarkedUnhealthy { replica_id, .. } if replica_id == "r1"));
    let violations = dispatches_while_unhealthy(&log).len();

    // Restart and let the prober bring it back.
    cl.engines[1].restart().await.unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    let healthy = loop {
        let snap = gw.state().registry().snapshot();
        if snap.iter().find(|r| r.replica_id == "r1").is_some_and(|r| r.healthy) {
            break true;
        }
        if Instant::now() > deadline {
            break false;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    };
    let after = run_benchmark(&BenchmarkRun { concurrency: 6, ..run.clone() }, &prompts).await.unwrap();
    let served_by_r1 = after.details.iter().filter(|d| d.replica_id.as_deref() == Some("r1")).count();
    let after_ok = after.summary.as_ref().unwrap().count_completed as usize == after.timelines.len();
    let violations_after = dispatches_while_unhealthy(&gw.state().registry().routing_log()).len();
    let elapsed = started.elapsed();
    verdict(
        6,
        "fault tolerance",
        rate < 0.01
            && marked
            && violations == 0
            && violations_after == 0
            && healthy
            && served_by_r1 > 0
            && after_ok
            && elapsed < Duration::from_secs(60),
        format!(
            "{total} requests, {pre_stream_failures} failed before streaming ({:.2}%), {mid_stream_failures} cut mid-stream; r1 marked unhealthy: {marked}; dispatches while unhealthy: {}; back after restart: {healthy}, served {served_by_r1}/{} afterwards; {elapsed:.2?}",
            rate * 100.0,
            violations + violations_after,
            after.timelines.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Timeout semantics
// ---------------------------------------------------------------------------

#[tokio::test(flavor = "multi_thread")]
async fn criterion_7_timeout_semantics() {
    let _g = serial();
    let started = Instant::now();
    // At full scale 512 tokens at batch 8 take 512 × 156 ms ≈ 80 s, past the
    // 60 s deadline. Everything is compressed 100×.
    let full = LatencyModel::from_millis(1500.0, 1.0, 140.0, 2.0);
    let model = calibration::scaled(full, 0.01);
    let predicted = model.prefill(64) + model.decode(8) * 512;
    let cl = cluster(1, model, 64).await;
    let dir = tempfile::tempdir().unwrap();
    let gw = gateway(&cl.topology, dir.path(), GatewayOptions::default()).await;

    let run = BenchmarkRun {
        api_key: Some(KEY.into()),
        timeout: Duration::from_millis(600),
        ..BenchmarkRun::new(gw.url(), 8)
    };
    let report = run_benchmark(&run, &dataset::synthetic(10)).await.unwrap();
    let s = report.summary.as_ref().unwrap();
    let mut table = Vec::new();
    write_table(std::slice::from_ref(&report), &mut table).unwrap();
    let table = String::from_utf8(table).unwrap();
    let elapsed = started.elapsed();
    verdict(
        7,
        "timeout semantics",
        s.timeout_fraction >= 0.9 && table.contains("Timeout") && elapsed < Duration::from_secs(60),
        format!(
            "{} of {} timed out ({:.1}%) at 0.6 s, predicted full response {predicted:.2?}; table shows Timeout: {}; {elapsed:.2?}",
            s.count_timeout,
            s.count_total,
            s.timeout_fraction * 100.0,
            table.contains("Timeout")
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Gateway scalability
// ---------------------------------------------------------------------------

#[tokio::test(flavor = "multi_thread")]
async fn criterion_8_gateway_scalability() {
    let _g = serial();
    let started = Instant::now();
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cl = cluster(4, LatencyModel::from_millis(0.0, 0.0, 0.05, 0.0), 64).await;
    let dir = tempfile::tempdir().unwrap();
    let gw = gateway(&cl.topology, dir.path(), GatewayOptions::default()).await;

    let mut medians = Vec::new();
    for c in [4, 256] {
        let run = BenchmarkRun { api_key: Some(KEY.into()), max_tokens: 16, ..BenchmarkRun::new(gw.url(), c) };
        let report = run_benchmark(&run, &dataset::synthetic(64)).await.unwrap();
        let s = report.summary.unwrap();
        assert_eq!(s.count_completed, s.count_total, "c={c}");
        medians.push(s.gateway_latency_ms_p50.unwrap());
    }
    let ratio = medians[1] / medians[0];
    let elapsed = started.elapsed();
    verdict(
        8,
        "gateway scalability",
        ratio < 10.0 && elapsed < Duration::from_secs(120),
        format!(
            "median gateway latency {:.3} ms at c=4, {:.3} ms at c=256, ratio {ratio:.2} on {cores} core(s); {elapsed:.2?}",
            medians[0], medians[1]
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. Connection reuse
// ---------------------------------------------------------------------------

#[tokio::test(flavor = "multi_thread")]
async fn criterion_9_connection_reuse() {
    let _g = serial();
    let started = Instant::now();
    let cl = cluster(1, LatencyModel::from_millis(0.5, 0.0, 1.0, 0.0), 64).await;
    let dir = tempfile::tempdir().unwrap();
    let gw = gateway(&cl.topology, dir.path(), GatewayOptions::default()).await;

    let run = BenchmarkRun {
        api_key: Some(KEY.into()),
        max_tokens: 8,
        total_requests: Some(100),
        ..BenchmarkRun::new(gw.url(), 1)
    };
    let report = run_benchmark(&run, &dataset::synthetic(10)).await.unwrap();
    let completed = report.summary.unwrap().count_completed;
    let accepted = cl.engines[0].accepted_connections();
    let cap = default_pool_cap(64) as u64;
    let elapsed = started.elapsed();
    verdict(
        9,
        "connection reuse",
        completed == 100 && accepted <= cap && elapsed < Duration::from_secs(10),
        format!("100 sequential requests, {completed} completed, {accepted} engine connections accepted (cap {cap}); {elapsed:.2?}"),
    );
}
