use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use gatewise_cli::report::{self, Format};
use gatewise_cli::simulate;
use gatewise_cli::{dataset, BenchError, BenchmarkReport, BenchmarkRun};
use gatewise_core::sim::WorkloadSpec;

/// Closed-loop benchmark harness for OpenAI-compatible chat endpoints.
#[derive(Parser)]
#[command(name = "bench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One run at a fixed concurrency.
    Run {
        #[command(flatten)]
        load: LoadArgs,
        #[arg(long, short)]
        concurrency: usize,
    },
    /// One run per concurrency, in order.
    Sweep {
        #[command(flatten)]
        load: LoadArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        concurrencies: Vec<usize>,
        /// Pause between runs.
        #[arg(long, default_value = "2s", value_parser = humantime::parse_duration)]
        cooldown: Duration,
    },
    /// Virtual-clock sweep of the calibrated layouts; no network.
    Simulate {
        #[arg(long, value_delimiter = ',', default_value = "1,4,16,64,128,256")]
        concurrencies: Vec<usize>,
        /// Skip the threshold-routed layout.
        #[arg(long)]
        no_dynamic: bool,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "table")]
        format: Format,
    },
}

#[derive(Args)]
struct LoadArgs {
    /// Base URL of the gateway.
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    endpoint: String,
    #[arg(long, env = "GATEWISE_API_KEY")]
    api_key: Option<String>,
    /// Line-delimited JSON with `system` and `question` fields.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Requests per run; defaults to 20 × concurrency.
    #[arg(long)]
    total: Option<usize>,
    #[arg(long)]
    stream: bool,
    /// Per-request deadline, e.g. `60s` or `600ms`.
    #[arg(long, default_value = "60s", value_parser = humantime::parse_duration)]
    timeout: Duration,
    #[arg(long, default_value_t = 512)]
    max_tokens: u32,
    #[arg(long, default_value = "default")]
    model: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "")]
    label: String,
    /// Directory for report.json, runs.csv, metrics.csv and table.txt.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Format printed to stdout.
    #[arg(long, default_value = "table")]
    format: Format,
}

impl LoadArgs {
    fn run(&self, concurrency: usize) -> BenchmarkRun {
        BenchmarkRun {
            endpoint: self.endpoint.clone(),
            api_key: self.api_key.clone(),
            concurrency,
            total_requests: self.total,
            timeout: self.timeout,
            stream: self.stream,
            max_tokens: self.max_tokens,
            model: self.model.clone(),
            seed: self.seed,
            label: self.label.clone(),
        }
    }

    fn prompts(&self, n: usize) -> anyhow::Result<Vec<dataset::PromptRecord>> {
        match &self.dataset {
            Some(p) => dataset::load_dataset(p).with_context(|| format!("loading {}", p.display())),
            None => Ok(dataset::synthetic(n)),
        }
    }

    fn emit(&self, reports: &[BenchmarkReport]) -> anyhow::Result<()> {
        if let Some(dir) = &self.out {
            for p in report::write_dir(reports, dir)? {
                eprintln!("wrote {}", p.display());
            }
        }
        report::emit(reports, self.format, std::io::stdout().lock())?;
        Ok(())
    }
}

fn stop_on_ctrl_c() -> Arc<AtomicBool> {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    tokio::spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            eprintln!("interrupted; finishing open requests");
            flag.store(true, Ordering::Relaxed);
        }
    });
    stop
}

async fn real_main() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { load, concurrency } => {
            let run = load.run(concurrency);
            let prompts = load.prompts(run.total())?;
            match gatewise_cli::run_benchmark_until(&run, &prompts, stop_on_ctrl_c()).await {
                Ok(r) => {
                    load.emit(&[r])?;
                    Ok(ExitCode::SUCCESS)
                }
                Err(e @ BenchError::Unreachable { .. }) => {
                    eprintln!("error: {e}");
                    Ok(ExitCode::from(2))
                }
                Err(e) => Err(e.into()),
            }
        }
        Command::Sweep { load, concurrencies, cooldown } => {
            let most = concurrencies.iter().map(|&c| load.run(c).total()).max().unwrap_or(0);
            let prompts = load.prompts(most)?;
            let reports = gatewise_cli::sweep(&concurrencies, &load.run(1), &prompts, cooldown).await;
            load.emit(&reports)?;
            let failed = reports.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                eprintln!("{failed} of {} runs failed", reports.len());
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate { concurrencies, no_dynamic, seed, format } => {
            let mut layouts = simulate::static_layouts();
            if !no_dynamic {
                layouts.push(simulate::dynamic_layout());
            }
            let workload = WorkloadSpec { seed, ..Default::default() };
            let points =
                tokio::task::spawn_blocking(move || simulate::sweep(&layouts, &concurrencies, &workload)).await??;
            let out = std::io::stdout().lock();
            match format {
                Format::Table => simulate::write_table(&points, out)?,
                Format::Csv => simulate::write_csv(&points, out)?,
                Format::Json => serde_json::to_writer_pretty(out, &points)?,
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match real_main().await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
