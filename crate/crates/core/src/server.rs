//! Mock inference server hosting a [`ToyModel`] over the wire protocol.
//!
//! Artificial latency is injected before each response is written, sized by a
//! [`LatencyModel`]. Servers constructed with the same [`SimulatedDevice`]
//! serialize that latency, which models several models sharing one
//! accelerator.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, ErrorKind};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, TryLockError};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use thiserror::Error;

use crate::protocol::{parse_message, write_message, ErrorCode, FrameError, Request, Response};
use crate::source::toy::ToyModel;
use crate::source::{prefill, LogitSource, PromptInput, Session, SourceError};

const IDLE_POLL: Duration = Duration::from_millis(25);

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("binding {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error("latency parameter {name} = {value} must be finite and non-negative")]
    Latency { name: &'static str, value: f64 },
}

/// Deterministic cost model, all values in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LatencyModel {
    pub per_token_prefill: f64,
    pub per_step: f64,
    /// Seconds per kilobyte (1024 bytes) of omni payload at prefill.
    pub omni_payload_factor: f64,
}

impl LatencyModel {
    pub fn new(
        per_token_prefill: f64,
        per_step: f64,
        omni_payload_factor: f64,
    ) -> Result<Self, ServerError> {
        for (name, value) in [
            ("per_token_prefill", per_token_prefill),
            ("per_step", per_step),
            ("omni_payload_factor", omni_payload_factor),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(ServerError::Latency { name, value });
            }
        }
        Ok(Self {
            per_token_prefill,
            per_step,
            omni_payload_factor,
        })
    }

    pub fn prefill_seconds(&self, tokens: usize, payload_bytes: usize) -> f64 {
        self.per_token_prefill * tokens as f64
            + self.omni_payload_factor * payload_bytes as f64 / 1024.0
    }

    pub fn step_seconds(&self) -> f64 {
        self.per_step
    }
}

/// A lock standing in for an accelerator: simulated work on one device is
/// serialized across every server sharing it.
#[derive(Debug, Clone, Default)]
pub struct SimulatedDevice(Arc<Mutex<()>>);

impl SimulatedDevice {
    pub fn new() -> Self {
        Self::default()
    }

    fn occupy(&self, seconds: f64) {
        if seconds <= 0.0 {
            return;
        }
        let _busy = self.0.lock().unwrap_or_else(|e| e.into_inner());
        thread::sleep(Duration::from_secs_f64(seconds));
    }
}

struct Entry {
    session: Session,
}

/// A session's owning connection and its state.
type Owned = (u64, Arc<Mutex<Entry>>);

struct Shared {
    model: ToyModel,
    latency: LatencyModel,
    device: SimulatedDevice,
    sessions: Mutex<HashMap<u64, Owned>>,
    next_session: AtomicU64,
    shutdown: AtomicBool,
}

impl Shared {
    fn live(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    fn handle(&self, conn_id: u64, request: Request) -> Response {
        match request {
            Request::Info => {
                let vocab = self.model.vocabulary();
                Response::Info {
                    model_id: self.model.id().to_string(),
                    vocab_size: vocab.size(),
                    fingerprint: vocab.fingerprint().to_string(),
                    context_limit: self.model.context_limit(),
                    tokens: vocab.tokens().map(<[String]>::to_vec),
                }
            }
            Request::Stats => Response::Stats {
                live_sessions: self.live(),
            },
            Request::Open { tokens, payload } => {
                if self.shutdown.load(Ordering::SeqCst) {
                    return Response::error(ErrorCode::ShuttingDown, "server is draining");
                }
                let omni = match payload.map(|p| p.decode()).transpose() {
                    Ok(p) => p,
                    Err(e) => return Response::error(ErrorCode::BadRequest, e.to_string()),
                };
                let payload_bytes = omni.as_ref().map_or(0, |p| p.data.len());
                let input = PromptInput {
                    text_tokens: tokens,
                    omni,
                };
                let (session, logits) = match prefill(&self.model, &input) {
                    Ok(v) => v,
                    Err(e) => return source_error(e),
                };
                self.device
                    .occupy(self.latency.prefill_seconds(input.text_tokens.len(), payload_bytes));
                let id = self.next_session.fetch_add(1, Ordering::SeqCst);
                self.sessions
                    .lock()
                    .unwrap()
                    .insert(id, (conn_id, Arc::new(Mutex::new(Entry { session }))));
                Response::Opened {
                    session: id,
                    logits: logits.into_inner(),
                }
            }
            Request::Step { session, token } => {
                let entry = match self.sessions.lock().unwrap().get(&session) {
                    Some((_, e)) => Arc::clone(e),
                    None => {
                        return Response::error(
                            ErrorCode::SessionNotFound,
                            format!("no session {session}"),
                        )
                    }
                };
                let mut guard = match entry.try_lock() {
                    Ok(g) => g,
                    Err(TryLockError::WouldBlock) => {
                        return Response::error(
                            ErrorCode::Conflict,
                            format!("session {session} has a step in flight"),
                        )
                    }
                    Err(TryLockError::Poisoned(p)) => p.into_inner(),
                };
                let logits = match guard.session.step(token) {
                    Ok(l) => l,
                    Err(e) => return source_error(e),
                };
                self.device.occupy(self.latency.step_seconds());
                drop(guard);
                Response::Logits {
                    session,
                    logits: logits.into_inner(),
                }
            }
            Request::Close { session } => {
                let removed = self.sessions.lock().unwrap().remove(&session);
                let existed = removed.is_some();
                if let Some((_, entry)) = removed {
                    let mut guard = entry.lock().unwrap_or_else(|e| e.into_inner());
                    let _ = guard.session.close();
                }
                Response::Closed { session, existed }
            }
        }
    }

    fn close_owned_by(&self, conn_id: u64) {
        let owned: Vec<_> = {
            let mut sessions = self.sessions.lock().unwrap();
            let ids: Vec<u64> = sessions
                .iter()
                .filter(|(_, (owner, _))| *owner == conn_id)
                .map(|(id, _)| *id)
                .collect();
            ids.into_iter().filter_map(|id| sessions.remove(&id)).collect()
        };
        for (_, entry) in owned {
            let mut guard = entry.lock().unwrap_or_else(|e| e.into_inner());
            let _ = guard.session.close();
        }
    }
}

fn source_error(e: SourceError) -> Response {
    let code = match &e {
        SourceError::EmptyPrompt => ErrorCode::EmptyPrompt,
        SourceError::Capacity { .. } => ErrorCode::Capacity,
        SourceError::TokenRange { .. } => ErrorCode::TokenRange,
        SourceError::Closed(_) => ErrorCode::SessionNotFound,
        _ => ErrorCode::Internal,
    };
    Response::error(code, e.to_string())
}

fn serve_connection(shared: Arc<Shared>, conn_id: u64, stream: TcpStream) {
    stream.set_nodelay(true).ok();
    if stream.set_read_timeout(Some(IDLE_POLL)).is_err() {
        return;
    }
    let mut writer = match stream.try_clone() {
        Ok(s) => BufWriter::new(s),
        Err(_) => return,
    };
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) => break,
            Ok(_) if buf.last() == Some(&b'\n') => {
                let line = String::from_utf8_lossy(&buf).trim_end().to_string();
                buf.clear();
                if line.is_empty() {
                    continue;
                }
                let response = match parse_message::<Request>(&line) {
                    Ok(req) => shared.handle(conn_id, req),
                    Err(FrameError::Version { got }) => Response::error(
                        ErrorCode::VersionMismatch,
                        format!("protocol version {got} not supported"),
                    ),
                    Err(e) => Response::error(ErrorCode::BadRequest, e.to_string()),
                };
                if write_message(&mut writer, &response).is_err() {
                    break;
                }
            }
            // EOF in the middle of a line
            Ok(_) => break,
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                if buf.is_empty() && shared.shutdown.load(Ordering::SeqCst) {
                    break;
                }
            }
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(_) => break,
        }
    }
    shared.close_owned_by(conn_id);
}

/// Handle to a running server. Dropping it shuts the server down.
pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// `host:port` suitable for [`crate::source::remote::RemoteSource::connect`].
    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }

    pub fn live_sessions(&self) -> usize {
        self.shared.live()
    }

    pub fn is_shutting_down(&self) -> bool {
        self.shared.shutdown.load(Ordering::SeqCst)
    }

    /// Stop accepting, let in-flight requests finish, release every session.
    /// Returns the number of sessions that were live when shutdown began.
    pub fn shutdown(mut self) -> usize {
        self.stop()
    }

    fn stop(&mut self) -> usize {
        let Some(acceptor) = self.acceptor.take() else {
            return 0;
        };
        let live = self.shared.live();
        self.shared.shutdown.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        let _ = acceptor.join();
        let remaining: Vec<_> = self.shared.sessions.lock().unwrap().drain().collect();
        for (_, (_, entry)) in remaining {
            let mut guard = entry.lock().unwrap_or_else(|e| e.into_inner());
            let _ = guard.session.close();
        }
        live
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Start serving `model` on `addr` (use port 0 for an ephemeral port).
pub fn serve<A: ToSocketAddrs + std::fmt::Display>(
    model: ToyModel,
    latency: LatencyModel,
    addr: A,
) -> Result<ServerHandle, ServerError> {
    serve_on_device(model, latency, SimulatedDevice::new(), addr)
}

pub fn serve_on_device<A: ToSocketAddrs + std::fmt::Display>(
    model: ToyModel,
    latency: LatencyModel,
    device: SimulatedDevice,
    addr: A,
) -> Result<ServerHandle, ServerError> {
    let listener = TcpListener::bind(&addr).map_err(|source| ServerError::Bind {
        addr: addr.to_string(),
        source,
    })?;
    let local = listener.local_addr().map_err(|source| ServerError::Bind {
        addr: addr.to_string(),
        source,
    })?;
    let shared = Arc::new(Shared {
        model,
        latency,
        device,
        sessions: Mutex::new(HashMap::new()),
        next_session: AtomicU64::new(1),
        shutdown: AtomicBool::new(false),
    });
    let accept_shared = Arc::clone(&shared);
    let acceptor = thread::Builder::new()
        .name("mock-server-accept".into())
        .spawn(move || {
            let mut workers: Vec<JoinHandle<()>> = Vec::new();
            let mut next_conn = 0u64;
            for stream in listener.incoming() {
                if accept_shared.shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                next_conn += 1;
                let conn_shared = Arc::clone(&accept_shared);
                let conn_id = next_conn;
                workers.retain(|w| !w.is_finished());
                match thread::Builder::new()
                    .name(format!("mock-server-conn-{conn_id}"))
                    .spawn(move || serve_connection(conn_shared, conn_id, stream))
                {
                    Ok(h) => workers.push(h),
                    Err(e) => log::error!("spawning connection worker: {e}"),
                }
            }
            for w in workers {
                let _ = w.join();
            }
        })
        .expect("spawn accept thread");
    Ok(ServerHandle {
        addr: local,
        shared,
        acceptor: Some(acceptor),
    })
}
