//! Observability sink: one JSON line per terminal request, appended to a
//! file per UTC day by a single writer thread.
//!
//! Handlers only enqueue. Write failures are counted and logged; they never
//! reach a client.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::JoinHandle;

use chrono::{DateTime, NaiveDate, Utc};
use gatewise_core::clock::Timestamp;
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;
use tracing::warn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationStatus {
    Completed,
    /// The replica failed after tokens reached the client.
    Failed,
    /// No replica could serve the request.
    Unavailable,
    /// The client went away before the end of the response.
    Cancelled,
    Unauthorized,
    RateLimited,
    BadRequest,
    Filtered,
}

/// Gateway-side record of one request. Instants are on the gateway's
/// process clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub request_id: String,
    pub logged_at: DateTime<Utc>,
    pub api_key_id: Option<String>,
    pub replica_id: Option<String>,
    pub status: ObservationStatus,
    pub http_status: u16,
    pub stream: bool,
    pub n_tokens: u64,
    /// Replicas tried, including the one that answered.
    pub attempts: u32,
    /// t1: request received.
    pub received: Timestamp,
    /// Auth, rate limit and input filter all passed.
    pub admitted: Option<Timestamp>,
    /// t2 proxy: SUBMIT sent to the replica that answered.
    pub dispatched: Option<Timestamp>,
    /// t3/t4 proxy: first frame back from that replica.
    pub first_engine: Option<Timestamp>,
    /// t5 proxy: first byte of the response handed to the client.
    pub first_byte: Option<Timestamp>,
    pub finished: Option<Timestamp>,
    pub engine_queue_ns: Option<u64>,
    pub engine_inference_ns: Option<u64>,
    pub error: Option<String>,
}

impl ObservationRecord {
    pub fn new(request_id: impl Into<String>, received: Timestamp, stream: bool) -> Self {
        Self {
            request_id: request_id.into(),
            logged_at: Utc::now(),
            api_key_id: None,
            replica_id: None,
            status: ObservationStatus::Completed,
            http_status: 200,
            stream,
            n_tokens: 0,
            attempts: 0,
            received,
            admitted: None,
            dispatched: None,
            first_engine: None,
            first_byte: None,
            finished: None,
            engine_queue_ns: None,
            engine_inference_ns: None,
            error: None,
        }
    }
}

/// Destination of serialized records.
pub trait RecordWriter: Send + 'static {
    fn write_line(&mut self, day: NaiveDate, line: &str) -> io::Result<()>;
}

/// `observations-YYYY-MM-DD.jsonl` files in a directory, flushed after
/// every record.
pub struct DailyFiles {
    dir: PathBuf,
    current: Option<(NaiveDate, File)>,
}

impl DailyFiles {
    pub fn new(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir, current: None })
    }

    pub fn path_for(dir: &Path, day: NaiveDate) -> PathBuf {
        dir.join(format!("observations-{}.jsonl", day.format("%Y-%m-%d")))
    }
}

impl RecordWriter for DailyFiles {
    fn write_line(&mut self, day: NaiveDate, line: &str) -> io::Result<()> {
        if self.current.as_ref().is_none_or(|(d, _)| *d != day) {
            let f = OpenOptions::new().create(true).append(true).open(Self::path_for(&self.dir, day))?;
            self.current = Some((day, f));
        }
        let (_, f) = self.current.as_mut().expect("opened above");
        f.write_all(line.as_bytes())?;
        f.write_all(b"\n")?;
        f.flush()
    }
}

enum Msg {
    Record(Box<ObservationRecord>),
    Flush(oneshot::Sender<()>),
}

#[derive(Debug, Default)]
pub struct SinkStats {
    pub written: AtomicU64,
    pub failed: AtomicU64,
}

#[derive(Clone)]
pub struct ObservationSink {
    tx: mpsc::Sender<Msg>,
    stats: Arc<SinkStats>,
}

impl ObservationSink {
    /// Starts the writer thread. It exits once every sink clone is dropped.
    pub fn spawn(mut writer: impl RecordWriter) -> (Self, JoinHandle<()>) {
        let (tx, rx) = mpsc::channel::<Msg>();
        let stats = Arc::new(SinkStats::default());
        let thread_stats = stats.clone();
        let handle = std::thread::Builder::new()
            .name("observations".into())
            .spawn(move || {
                for msg in rx {
                    match msg {
                        Msg::Record(rec) => {
                            let line = serde_json::to_string(&rec).expect("record serializes");
                            match writer.write_line(rec.logged_at.date_naive(), &line) {
                                Ok(()) => thread_stats.written.fetch_add(1, Ordering::Relaxed),
                                Err(e) => {
                                    warn!(error = %e, request_id = %rec.request_id, "observation write failed");
                                    thread_stats.failed.fetch_add(1, Ordering::Relaxed)
                                }
                            };
                        }
                        Msg::Flush(done) => {
                            let _ = done.send(());
                        }
                    }
                }
            })
            .expect("spawn observation writer");
        (Self { tx, stats }, handle)
    }

    /// A sink that writes to daily files under `dir`.
    pub fn to_dir(dir: impl Into<PathBuf>) -> io::Result<(Self, JoinHandle<()>)> {
        Ok(Self::spawn(DailyFiles::new(dir)?))
    }

    pub fn record(&self, rec: ObservationRecord) {
        if self.tx.send(Msg::Record(Box::new(rec))).is_err() {
            self.stats.failed.fetch_add(1, Ordering::Relaxed);
        }
    }

    /// Resolves once every record enqueued before the call was handled.
    pub async fn flush(&self) {
        let (done, wait) = oneshot::channel();
        if self.tx.send(Msg::Flush(done)).is_ok() {
            let _ = wait.await;
        }
    }

    pub fn written(&self) -> u64 {
        self.stats.written.load(Ordering::Relaxed)
    }

    pub fn failed(&self) -> u64 {
        self.stats.failed.load(Ordering::Relaxed)
    }
}

/// Reads every record from the files in `dir`, oldest day first.
pub fn read_dir_records(dir: impl AsRef<Path>) -> io::Result<Vec<ObservationRecord>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        for line in std::fs::read_to_string(&p)?.lines().filter(|l| !l.is_empty()) {
            out.push(serde_json::from_str(line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?);
        }
    }
    Ok(out)
}
