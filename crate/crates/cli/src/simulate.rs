//! Virtual-clock sweeps over the calibrated 8-GPU layouts.

use gatewise_core::calibration;
use gatewise_core::engine::ReplicaConfig;
use gatewise_core::metrics::MetricsSummary;
use gatewise_core::router::RoutingPolicy;
use gatewise_core::sim::{simulate_closed_loop, SimError, WorkloadSpec};
use serde::{Deserialize, Serialize};

use crate::client::REQUESTS_PER_CONCURRENCY;

#[derive(Debug, Clone)]
pub struct Layout {
    pub name: String,
    pub replicas: Vec<ReplicaConfig>,
    pub policy: RoutingPolicy,
}

/// 1xTP8, 2xTP4 and 4xTP2 behind least-inflight routing.
pub fn static_layouts() -> Vec<Layout> {
    calibration::static_layouts()
        .into_iter()
        .map(|(name, replicas)| Layout { name: name.into(), replicas, policy: RoutingPolicy::LeastInflight })
        .collect()
}

/// TP8 below the concurrency threshold, TP2 replicas above it.
pub fn dynamic_layout() -> Layout {
    let (replicas, policy) = calibration::dynamic_layout();
    Layout { name: "dynamic".into(), replicas, policy }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPoint {
    pub layout: String,
    pub concurrency: usize,
    pub throughput_tok_s: f64,
    pub peak_inflight: usize,
    pub summary: MetricsSummary,
}

/// Runs `20 × c` requests per point, the same request list for every
/// layout at a given concurrency.
pub fn sweep(layouts: &[Layout], concurrencies: &[usize], workload: &WorkloadSpec) -> Result<Vec<SimPoint>, SimError> {
    let mut out = Vec::with_capacity(layouts.len() * concurrencies.len());
    for &c in concurrencies {
        let requests = workload.generate(REQUESTS_PER_CONCURRENCY * c);
        for l in layouts {
            let run = simulate_closed_loop(&l.replicas, &l.policy, &requests, c)?;
            out.push(SimPoint {
                layout: l.name.clone(),
                concurrency: c,
                throughput_tok_s: run.summary.throughput_tok_s,
                peak_inflight: run.peak_inflight,
                summary: run.summary,
            });
        }
    }
    Ok(out)
}

/// Throughput of `layout` at `c`, if swept.
pub fn throughput(points: &[SimPoint], layout: &str, c: usize) -> Option<f64> {
    points.iter().find(|p| p.layout == layout && p.concurrency == c).map(|p| p.throughput_tok_s)
}

pub fn write_csv<W: std::io::Write>(points: &[SimPoint], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layout", "concurrency", "throughput_tok_s", "ttft_ms_p50", "tbt_ms_p50", "peak_inflight"])?;
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
    for p in points {
        w.write_record([
            p.layout.clone(),
            p.concurrency.to_string(),
            format!("{:.4}", p.throughput_tok_s),
            opt(p.summary.ttft_ms_p50),
            opt(p.summary.tbt_ms_p50),
            p.peak_inflight.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Throughput grid: one row per concurrency, one column per layout.
pub fn write_table<W: std::io::Write>(points: &[SimPoint], mut out: W) -> std::io::Result<()> {
    let mut layouts: Vec<&str> = Vec::new();
    let mut cs: Vec<usize> = Vec::new();
    for p in points {
        if !layouts.contains(&p.layout.as_str()) {
            layouts.push(&p.layout);
        }
        if !cs.contains(&p.concurrency) {
            cs.push(p.concurrency);
        }
    }
    write!(out, "{:>6}", "c")?;
    for l in &layouts {
        write!(out, " {l:>12}")?;
    }
    writeln!(out, "   (tok/s)")?;
    for c in cs {
        write!(out, "{c:>6}")?;
        for l in &layouts {
            match throughput(points, l, c) {
                Some(t) => write!(out, " {t:>12.1}")?,
                None => write!(out, " {:>12}", "-")?,
            }
        }
        writeln!(out)?;
    }
    Ok(())
}
