//! Line-delimited JSON wire protocol between the remote client and the mock
//! inference server.
//!
//! Each message is one JSON object terminated by `\n` and carries the
//! protocol version in `v`. Requests are tagged by `op`, responses by
//! `status`. Logits travel as arrays of decimal floats written with shortest
//! round-trip formatting, so a decoded vector is bit-identical to the sent one.

use std::io::{BufRead, Write};

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::source::{OmniPayload, TokenId};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WirePayload {
    pub media_type: String,
    /// Standard base64 of the payload bytes.
    pub data: String,
}

impl From<&OmniPayload> for WirePayload {
    fn from(p: &OmniPayload) -> Self {
        Self {
            media_type: p.media_type.clone(),
            data: base64::engine::general_purpose::STANDARD.encode(&p.data),
        }
    }
}

impl WirePayload {
    pub fn decode(&self) -> Result<OmniPayload, base64::DecodeError> {
        let data = base64::engine::general_purpose::STANDARD.decode(&self.data)?;
        Ok(OmniPayload::new(self.media_type.clone(), data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Info,
    Open {
        tokens: Vec<TokenId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        payload: Option<WirePayload>,
    },
    Step {
        session: u64,
        token: TokenId,
    },
    Close {
        session: u64,
    },
    Stats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadRequest,
    VersionMismatch,
    SessionNotFound,
    Conflict,
    Capacity,
    TokenRange,
    EmptyPrompt,
    ShuttingDown,
    Internal,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::BadRequest => "bad_request",
            ErrorCode::VersionMismatch => "version_mismatch",
            ErrorCode::SessionNotFound => "session_not_found",
            ErrorCode::Conflict => "conflict",
            ErrorCode::Capacity => "capacity",
            ErrorCode::TokenRange => "token_range",
            ErrorCode::EmptyPrompt => "empty_prompt",
            ErrorCode::ShuttingDown => "shutting_down",
            ErrorCode::Internal => "internal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Response {
    Info {
        model_id: String,
        vocab_size: usize,
        fingerprint: String,
        context_limit: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tokens: Option<Vec<String>>,
    },
    Opened {
        session: u64,
        logits: Vec<f64>,
    },
    Logits {
        session: u64,
        logits: Vec<f64>,
    },
    Closed {
        session: u64,
        existed: bool,
    },
    Stats {
        live_sessions: usize,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
}

impl Response {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Response::Error {
            code,
            message: message.into(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub v: u32,
    #[serde(flatten)]
    pub body: T,
}

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("connection closed")]
    Eof,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed message: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("protocol version {got}, expected {PROTOCOL_VERSION}")]
    Version { got: u32 },
}

pub fn write_message<W: Write, T: Serialize>(w: &mut W, body: &T) -> std::io::Result<()> {
    let mut line = serde_json::to_vec(&Envelope {
        v: PROTOCOL_VERSION,
        body,
    })
    .map_err(std::io::Error::other)?;
    line.push(b'\n');
    w.write_all(&line)?;
    w.flush()
}

/// Parse one already-read line.
pub fn parse_message<T: for<'de> Deserialize<'de>>(line: &str) -> Result<T, FrameError> {
    #[derive(Deserialize)]
    struct Version {
        v: u32,
    }
    let version: Version = serde_json::from_str(line)?;
    if version.v != PROTOCOL_VERSION {
        return Err(FrameError::Version { got: version.v });
    }
    let env: Envelope<T> = serde_json::from_str(line)?;
    Ok(env.body)
}

pub fn read_message<R: BufRead, T: for<'de> Deserialize<'de>>(r: &mut R) -> Result<T, FrameError> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(FrameError::Eof);
    }
    parse_message(line.trim_end())
}
