//! Benchmark harness for the gateway: dataset loading, closed-loop load
//! generation, simulator sweeps and reports.

pub mod client;
pub mod dataset;
pub mod report;
pub mod simulate;

pub use client::{run_benchmark, run_benchmark_until, sweep, BenchError, BenchmarkRun};
pub use dataset::{load_dataset, parse_dataset, sample_prompts, DatasetError, PromptRecord};
pub use report::{emit, BenchmarkReport, Format, ReportFile, StreamChecks};
