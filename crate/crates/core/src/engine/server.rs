//! TCP front end of a simulated replica, speaking the framed protocol.

use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use futures::{SinkExt, StreamExt};
use parking_lot::Mutex;
use tokio::net::{TcpListener, TcpSocket, TcpStream};
use tokio::task::{JoinHandle, JoinSet};
use tokio_util::codec::Framed;
use tracing::{debug, warn};

use super::runtime::{ClockMode, EngineError, EngineHandle, StreamItem};
use super::{ReplicaConfig, SimRequest};
use crate::clock::Timestamp;
use crate::protocol::{code, DoneFrame, Frame, FrameCodec};

/// Failures to inject into a running server.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FaultPlan {
    /// Close the connection after this many tokens of a request.
    pub drop_after_tokens: Option<u32>,
    /// Answer every SUBMIT with an ERROR frame.
    pub reject_submits: bool,
}

struct Live {
    accept: JoinHandle<()>,
    engine: EngineHandle,
}

/// A replica listening on a fixed address. It can be killed and restarted
/// on the same address to simulate a crash.
pub struct EngineServer {
    addr: SocketAddr,
    config: ReplicaConfig,
    mode: ClockMode,
    accepted: Arc<AtomicU64>,
    fault: Arc<Mutex<FaultPlan>>,
    live: Mutex<Option<Live>>,
}

fn bind(addr: SocketAddr) -> io::Result<TcpListener> {
    let socket = if addr.is_ipv4() { TcpSocket::new_v4()? } else { TcpSocket::new_v6()? };
    socket.set_reuseaddr(true)?;
    socket.bind(addr)?;
    socket.listen(1024)
}

impl EngineServer {
    /// Binds `addr` (port 0 picks a free port) and starts serving.
    pub async fn start(addr: SocketAddr, config: ReplicaConfig, mode: ClockMode) -> io::Result<Self> {
        let listener = bind(addr)?;
        let addr = listener.local_addr()?;
        let server = Self {
            addr,
            config,
            mode,
            accepted: Arc::new(AtomicU64::new(0)),
            fault: Arc::new(Mutex::new(FaultPlan::default())),
            live: Mutex::new(None),
        };
        server.launch(listener);
        Ok(server)
    }

    fn launch(&self, listener: TcpListener) {
        let engine = EngineHandle::spawn(self.config.clone(), self.mode);
        let accept = tokio::spawn(accept_loop(listener, engine.clone(), self.accepted.clone(), self.fault.clone()));
        *self.live.lock() = Some(Live { accept, engine });
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn replica_id(&self) -> &str {
        &self.config.replica_id
    }

    /// Connections accepted since start, across restarts.
    pub fn accepted_connections(&self) -> u64 {
        self.accepted.load(Ordering::SeqCst)
    }

    pub fn set_fault(&self, plan: FaultPlan) {
        *self.fault.lock() = plan;
    }

    pub fn engine(&self) -> Option<EngineHandle> {
        self.live.lock().as_ref().map(|l| l.engine.clone())
    }

    pub fn is_running(&self) -> bool {
        self.live.lock().is_some()
    }

    /// Stops listening, drops every open connection and discards all
    /// in-flight work.
    pub async fn kill(&self) {
        let live = self.live.lock().take();
        if let Some(live) = live {
            live.accept.abort();
            let _ = live.accept.await;
            live.engine.shutdown();
        }
    }

    /// Rebinds the original address with a fresh engine.
    pub async fn restart(&self) -> io::Result<()> {
        self.kill().await;
        let listener = bind(self.addr)?;
        self.launch(listener);
        Ok(())
    }
}

impl Drop for EngineServer {
    fn drop(&mut self) {
        if let Some(live) = self.live.lock().take() {
            live.accept.abort();
            live.engine.shutdown();
        }
    }
}

async fn accept_loop(
    listener: TcpListener,
    engine: EngineHandle,
    accepted: Arc<AtomicU64>,
    fault: Arc<Mutex<FaultPlan>>,
) {
    // Connection tasks live in the set so aborting this task drops them.
    let mut conns = JoinSet::new();
    loop {
        tokio::select! {
            res = listener.accept() => match res {
                Ok((stream, peer)) => {
                    accepted.fetch_add(1, Ordering::SeqCst);
                    debug!(%peer, "engine accepted connection");
                    conns.spawn(serve_connection(stream, engine.clone(), fault.clone()));
                }
                Err(e) => warn!(error = %e, "accept failed"),
            },
            Some(_) = conns.join_next(), if !conns.is_empty() => {}
        }
    }
}

async fn serve_connection(stream: TcpStream, engine: EngineHandle, fault: Arc<Mutex<FaultPlan>>) {
    let _ = stream.set_nodelay(true);
    let (mut sink, mut inbound) = Framed::new(stream, FrameCodec::new()).split();
    while let Some(frame) = inbound.next().await {
        let frame = match frame {
            Ok(f) => f,
            Err(e) => {
                debug!(error = %e, "dropping connection on protocol error");
                return;
            }
        };
        match frame {
            Frame::Ping { nonce } => {
                if sink.send(Frame::Pong { nonce }).await.is_err() {
                    return;
                }
            }
            Frame::Submit(submit) => {
                let received = Timestamp::now();
                let plan = *fault.lock();
                let request_id = submit.request_id;
                if plan.reject_submits {
                    let err = Frame::Error { request_id, code: code::INTERNAL, message: "injected failure".into() };
                    if sink.send(err).await.is_err() {
                        return;
                    }
                    continue;
                }
                let req = SimRequest {
                    request_id,
                    prompt_tokens: submit.effective_prompt_tokens(),
                    target_output_tokens: submit.max_tokens,
                    seed: submit.seed,
                };
                let mut tokens = match engine.submit_received(req, Some(received)).await {
                    Ok(rx) => rx,
                    Err(e) => {
                        let code = match e {
                            EngineError::Rejected(super::scheduler::SubmitError::Overloaded(_)) => code::OVERLOADED,
                            EngineError::Rejected(_) => code::INVALID_REQUEST,
                            EngineError::Stopped => code::INTERNAL,
                        };
                        let err = Frame::Error { request_id, code, message: e.to_string() };
                        if sink.send(err).await.is_err() {
                            return;
                        }
                        continue;
                    }
                };
                let mut sent = 0u32;
                loop {
                    tokio::select! {
                        item = tokens.recv() => match item {
                            Some(StreamItem::Token { seq, text, .. }) => {
                                if plan.drop_after_tokens.is_some_and(|n| sent >= n) {
                                    engine.cancel(request_id);
                                    return;
                                }
                                if sink.send(Frame::Token { request_id, seq, text: text.to_owned() }).await.is_err() {
                                    engine.cancel(request_id);
                                    return;
                                }
                                sent += 1;
                            }
                            Some(StreamItem::Done { total_tokens, timing }) => {
                                let done = DoneFrame {
                                    request_id,
                                    total_tokens,
                                    queue_ns: timing.started.0.saturating_sub(timing.received.0),
                                    first_token_ns: timing.first_token.0.saturating_sub(timing.started.0),
                                    inference_ns: timing.finished.0.saturating_sub(timing.started.0),
                                };
                                if sink.send(Frame::Done(done)).await.is_err() {
                                    return;
                                }
                                break;
                            }
                            None => {
                                let err = Frame::Error { request_id, code: code::INTERNAL, message: "engine stopped".into() };
                                let _ = sink.send(err).await;
                                return;
                            }
                        },
                        incoming = inbound.next() => match incoming {
                            Some(Ok(Frame::Ping { nonce })) => {
                                if sink.send(Frame::Pong { nonce }).await.is_err() {
                                    engine.cancel(request_id);
                                    return;
                                }
                            }
                            Some(Ok(Frame::Submit(other))) => {
                                let err = Frame::Error {
                                    request_id: other.request_id,
                                    code: code::BUSY,
                                    message: "connection is busy streaming another request".into(),
                                };
                                if sink.send(err).await.is_err() {
                                    engine.cancel(request_id);
                                    return;
                                }
                            }
                            Some(Ok(_)) => {}
                            // Peer closed or broke the stream: stop generating.
                            Some(Err(_)) | None => {
                                engine.cancel(request_id);
                                return;
                            }
                        },
                    }
                }
            }
            other => {
                let err = Frame::Error {
                    request_id: 0,
                    code: code::INVALID_REQUEST,
                    message: format!("unexpected frame kind 0x{:02x}", other.kind()),
                };
                let _ = sink.send(err).await;
                return;
            }
        }
    }
}
