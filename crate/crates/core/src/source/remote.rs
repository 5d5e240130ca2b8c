//! Client for a logit server speaking [`crate::protocol`].
//!
//! Every session gets its own TCP connection, so sessions on the same source
//! can be driven from different threads without coordination. The server
//! releases a connection's sessions when it drops.

use std::io::{BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};
use std::thread;
use std::time::Duration;

use super::{LogitSource, PromptInput, SessionBackend, SourceError, TokenId, Vocabulary};
use crate::numerics::LogitVector;
use crate::protocol::{read_message, write_message, FrameError, Request, Response, WirePayload};

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            backoff: Duration::from_millis(50),
        }
    }
}

struct Connection {
    endpoint: String,
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Connection {
    fn open(endpoint: &str, retry: RetryPolicy) -> Result<Self, SourceError> {
        let mut last = String::new();
        let attempts = retry.attempts.max(1);
        for attempt in 1..=attempts {
            match connect(endpoint) {
                Ok(stream) => {
                    stream.set_nodelay(true).ok();
                    let reader = BufReader::new(stream.try_clone().map_err(|e| {
                        transport(endpoint, attempt, false, e.to_string())
                    })?);
                    return Ok(Self {
                        endpoint: endpoint.to_string(),
                        reader,
                        writer: BufWriter::new(stream),
                    });
                }
                Err(e) => {
                    last = e.to_string();
                    if attempt < attempts {
                        thread::sleep(retry.backoff * attempt);
                    }
                }
            }
        }
        Err(transport(endpoint, attempts, true, last))
    }

    fn call(&mut self, request: &Request) -> Result<Response, SourceError> {
        write_message(&mut self.writer, request)
            .map_err(|e| transport(&self.endpoint, 1, false, e.to_string()))?;
        let response = read_message(&mut self.reader).map_err(|e| match e {
            FrameError::Eof | FrameError::Io(_) => transport(&self.endpoint, 1, false, e.to_string()),
            other => SourceError::Protocol {
                code: "malformed_response".into(),
                message: other.to_string(),
            },
        })?;
        if let Response::Error { code, message } = response {
            return Err(SourceError::Protocol {
                code: code.as_str().to_string(),
                message,
            });
        }
        Ok(response)
    }
}

fn connect(endpoint: &str) -> std::io::Result<TcpStream> {
    let mut last = None;
    for addr in endpoint.to_socket_addrs()? {
        match TcpStream::connect_timeout(&addr, Duration::from_secs(5)) {
            Ok(s) => return Ok(s),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| std::io::Error::other("no address resolved")))
}

fn transport(endpoint: &str, attempts: u32, retryable: bool, message: String) -> SourceError {
    SourceError::Transport {
        endpoint: endpoint.to_string(),
        attempts,
        retryable,
        message,
    }
}

fn unexpected(r: &Response) -> SourceError {
    SourceError::Protocol {
        code: "unexpected_response".into(),
        message: format!("{r:?}"),
    }
}

/// A model hosted behind the wire protocol.
pub struct RemoteSource {
    id: String,
    endpoint: String,
    vocab: Vocabulary,
    context_limit: usize,
    retry: RetryPolicy,
}

impl RemoteSource {
    /// Connect and perform the `info` handshake.
    pub fn connect(endpoint: &str) -> Result<Self, SourceError> {
        Self::connect_with(endpoint, RetryPolicy::default())
    }

    pub fn connect_with(endpoint: &str, retry: RetryPolicy) -> Result<Self, SourceError> {
        let mut conn = Connection::open(endpoint, retry)?;
        match conn.call(&Request::Info)? {
            Response::Info {
                model_id,
                vocab_size,
                fingerprint,
                context_limit,
                tokens,
            } => Ok(Self {
                id: model_id,
                endpoint: endpoint.to_string(),
                vocab: Vocabulary::with_tokens(vocab_size, fingerprint, tokens),
                context_limit,
                retry,
            }),
            other => Err(unexpected(&other)),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// Live session count as reported by the server.
    pub fn server_live_sessions(&self) -> Result<usize, SourceError> {
        let mut conn = Connection::open(&self.endpoint, self.retry)?;
        match conn.call(&Request::Stats)? {
            Response::Stats { live_sessions } => Ok(live_sessions),
            other => Err(unexpected(&other)),
        }
    }
}

struct RemoteSession {
    conn: Connection,
    session: u64,
}

impl SessionBackend for RemoteSession {
    fn step(&mut self, token: TokenId) -> Result<LogitVector, SourceError> {
        match self.conn.call(&Request::Step {
            session: self.session,
            token,
        })? {
            Response::Logits { logits, .. } => Ok(LogitVector::new(logits)?),
            other => Err(unexpected(&other)),
        }
    }

    fn close(&mut self) -> Result<(), SourceError> {
        match self.conn.call(&Request::Close {
            session: self.session,
        })? {
            Response::Closed { .. } => Ok(()),
            other => Err(unexpected(&other)),
        }
    }
}

impl LogitSource for RemoteSource {
    fn id(&self) -> &str {
        &self.id
    }

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn context_limit(&self) -> usize {
        self.context_limit
    }

    fn open(
        &self,
        input: &PromptInput,
    ) -> Result<(Box<dyn SessionBackend>, LogitVector), SourceError> {
        let mut conn = Connection::open(&self.endpoint, self.retry)?;
        let request = Request::Open {
            tokens: input.text_tokens.clone(),
            payload: input.omni.as_ref().map(WirePayload::from),
        };
        match conn.call(&request)? {
            Response::Opened { session, logits } => {
                let logits = LogitVector::new(logits)?;
                Ok((Box::new(RemoteSession { conn, session }), logits))
            }
            other => Err(unexpected(&other)),
        }
    }
}
