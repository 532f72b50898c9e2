//! Framed protocol messages and the channels that carry them.
//!
//! Wire format: a 4-byte big-endian length prefix followed by one JSON
//! object. The JSON is canonical — object keys sorted, integers in lowercase
//! minimal hex (see [`crate::hexint`]) — so a message has exactly one byte
//! representation and transcripts can be hashed. Every frame carries
//! `version` (currently 1) and a `kind` tag; receivers reject unknown
//! versions, unknown kinds, and non-canonical integer spellings.
//!
//! Two [`Channel`] implementations exist: an in-process queue pair for tests
//! and benchmarks, and a TCP stream. Both enforce the protocol's strict
//! alternation (the client end may not send twice without receiving, and
//! vice versa), and both move the exact same frame bytes, so a session is
//! transport-agnostic down to its transcript digest.

use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::time::Duration;

use num_bigint::BigUint;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hexint;

/// Wire schema version emitted and accepted by this build.
pub const PROTOCOL_VERSION: u64 = 1;

/// Default TCP port for the worker.
pub const DEFAULT_PORT: u16 = 7741;

/// Upper bound on a frame body; guards against hostile length prefixes.
pub const MAX_FRAME_BYTES: u64 = 2 << 30;

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportError {
    #[error("receive timed out")]
    Timeout,
    #[error("channel closed by peer")]
    Closed,
    #[error("i/o failure: {0}")]
    Io(String),
    #[error("unsupported protocol version {got} (this build speaks {PROTOCOL_VERSION})")]
    Version { got: u64 },
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("strict alternation violated: {0}")]
    OutOfTurn(&'static str),
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_BYTES}-byte limit")]
    FrameTooLarge(u64),
}

/// Error codes a worker can attach to an [`ProtocolMessage::Error`] reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadMessage,
    WrongSession,
    MatrixAlreadyStored,
    NoMatrixStored,
    ValueOutOfRange,
}

/// The five message kinds of the protocol.
///
/// `round_index` appears exactly on the request/response pair; everything
/// else is identified by `session_id` alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProtocolMessage {
    /// Client → worker, once per session: the encrypted matrix.
    StoreMatrix {
        session_id: String,
        dim: usize,
        #[serde(with = "hexint::serde_hex_grid")]
        enc_matrix: Vec<Vec<BigUint>>,
    },
    /// Client → worker: the masked (and possibly scaled) query vector for
    /// one power-iteration round. Components are plaintext residues.
    MatVecRequest {
        session_id: String,
        round_index: u64,
        #[serde(with = "hexint::serde_hex_vec")]
        query: Vec<BigUint>,
    },
    /// Worker → client: componentwise encryption of `A · query`.
    MatVecResponse {
        session_id: String,
        round_index: u64,
        #[serde(with = "hexint::serde_hex_vec")]
        enc_product: Vec<BigUint>,
    },
    /// Worker → client: the matrix was stored.
    Ack { session_id: String },
    /// Worker → client: the request could not be served.
    Error {
        session_id: String,
        code: ErrorCode,
        message: String,
    },
}

impl ProtocolMessage {
    pub fn session_id(&self) -> &str {
        match self {
            ProtocolMessage::StoreMatrix { session_id, .. }
            | ProtocolMessage::MatVecRequest { session_id, .. }
            | ProtocolMessage::MatVecResponse { session_id, .. }
            | ProtocolMessage::Ack { session_id }
            | ProtocolMessage::Error { session_id, .. } => session_id,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ProtocolMessage::StoreMatrix { .. } => "store_matrix",
            ProtocolMessage::MatVecRequest { .. } => "mat_vec_request",
            ProtocolMessage::MatVecResponse { .. } => "mat_vec_response",
            ProtocolMessage::Ack { .. } => "ack",
            ProtocolMessage::Error { .. } => "error",
        }
    }

    /// Structural checks applied to every received frame.
    fn validate(&self) -> Result<(), TransportError> {
        let sid = self.session_id();
        if sid.len() != 32 || !sid.chars().all(|c| matches!(c, '0'..='9' | 'a'..='f')) {
            return Err(TransportError::Malformed(
                "session_id must be 32 lowercase hex characters".into(),
            ));
        }
        match self {
            ProtocolMessage::StoreMatrix { dim, enc_matrix, .. } => {
                if *dim == 0 {
                    return Err(TransportError::Malformed("dim must be at least 1".into()));
                }
                if enc_matrix.len() != *dim || enc_matrix.iter().any(|row| row.len() != *dim) {
                    return Err(TransportError::Malformed(format!(
                        "enc_matrix is not a {dim}×{dim} grid"
                    )));
                }
            }
            ProtocolMessage::MatVecRequest { query, .. } => {
                if query.is_empty() {
                    return Err(TransportError::Malformed("empty query vector".into()));
                }
            }
            ProtocolMessage::MatVecResponse { enc_product, .. } => {
                if enc_product.is_empty() {
                    return Err(TransportError::Malformed("empty product vector".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Fresh 32-hex-character session token.
pub fn new_session_id<R: RngCore + ?Sized>(rng: &mut R) -> String {
    let mut bytes = [0u8; 16];
    rng.fill_bytes(&mut bytes);
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
struct FrameRef<'a> {
    version: u64,
    #[serde(flatten)]
    message: &'a ProtocolMessage,
}

#[derive(Deserialize)]
struct Frame {
    #[allow(dead_code)]
    version: u64,
    #[serde(flatten)]
    message: ProtocolMessage,
}

/// Encodes a message as its unique frame: length prefix plus canonical JSON.
pub fn serialize(msg: &ProtocolMessage) -> Vec<u8> {
    let frame = FrameRef { version: PROTOCOL_VERSION, message: msg };
    // Round-tripping through Value sorts object keys at every level.
    let value = serde_json::to_value(&frame).expect("message serialization cannot fail");
    let body = serde_json::to_vec(&value).expect("JSON value serialization cannot fail");
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Decodes and validates one complete frame.
pub fn deserialize(bytes: &[u8]) -> Result<ProtocolMessage, TransportError> {
    if bytes.len() < 4 {
        return Err(TransportError::Malformed(
            "frame shorter than its length prefix".into(),
        ));
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
    if len != bytes.len() - 4 {
        return Err(TransportError::Malformed(format!(
            "length prefix says {len} bytes, frame has {}",
            bytes.len() - 4
        )));
    }
    parse_body(&bytes[4..])
}

fn parse_body(body: &[u8]) -> Result<ProtocolMessage, TransportError> {
    let value: serde_json::Value = serde_json::from_slice(body)
        .map_err(|e| TransportError::Malformed(format!("invalid JSON: {e}")))?;
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| TransportError::Malformed("missing or non-integer version".into()))?;
    if version != PROTOCOL_VERSION {
        return Err(TransportError::Version { got: version });
    }
    let frame: Frame = serde_json::from_value(value)
        .map_err(|e| TransportError::Malformed(e.to_string()))?;
    frame.message.validate()?;
    Ok(frame.message)
}

/// A bidirectional, alternating message channel between one client end and
/// one worker end.
pub trait Channel {
    fn send(&mut self, msg: &ProtocolMessage) -> Result<(), TransportError>;
    fn receive(&mut self, timeout: Duration) -> Result<ProtocolMessage, TransportError>;
}

/// Tracks whose turn it is on one endpoint. The client end starts on send,
/// the worker end on receive, and every completed operation flips the turn.
#[derive(Debug, Clone, Copy)]
struct TurnGuard {
    may_send: bool,
}

impl TurnGuard {
    fn client_end() -> Self {
        TurnGuard { may_send: true }
    }

    fn worker_end() -> Self {
        TurnGuard { may_send: false }
    }

    fn begin_send(&self) -> Result<(), TransportError> {
        if !self.may_send {
            return Err(TransportError::OutOfTurn(
                "must receive before sending again",
            ));
        }
        Ok(())
    }

    fn begin_receive(&self) -> Result<(), TransportError> {
        if self.may_send {
            return Err(TransportError::OutOfTurn(
                "must send before receiving again",
            ));
        }
        Ok(())
    }
}

/// In-process channel endpoint backed by a queue pair. Frames are fully
/// serialized and reparsed in transit, so this endpoint exercises exactly
/// the same encoding path as the TCP transport.
pub struct InProcessChannel {
    tx: mpsc::Sender<Vec<u8>>,
    rx: mpsc::Receiver<Vec<u8>>,
    turn: TurnGuard,
}

/// Creates a connected (client end, worker end) pair.
pub fn in_process_pair() -> (InProcessChannel, InProcessChannel) {
    let (tx_c, rx_w) = mpsc::channel();
    let (tx_w, rx_c) = mpsc::channel();
    (
        InProcessChannel { tx: tx_c, rx: rx_c, turn: TurnGuard::client_end() },
        InProcessChannel { tx: tx_w, rx: rx_w, turn: TurnGuard::worker_end() },
    )
}

impl Channel for InProcessChannel {
    fn send(&mut self, msg: &ProtocolMessage) -> Result<(), TransportError> {
        self.turn.begin_send()?;
        self.tx
            .send(serialize(msg))
            .map_err(|_| TransportError::Closed)?;
        self.turn.may_send = false;
        Ok(())
    }

    fn receive(&mut self, timeout: Duration) -> Result<ProtocolMessage, TransportError> {
        self.turn.begin_receive()?;
        let bytes = match self.rx.recv_timeout(timeout) {
            Ok(b) => b,
            Err(mpsc::RecvTimeoutError::Timeout) => return Err(TransportError::Timeout),
            Err(mpsc::RecvTimeoutError::Disconnected) => return Err(TransportError::Closed),
        };
        self.turn.may_send = true;
        deserialize(&bytes)
    }
}

/// TCP channel endpoint. One stream carries one session.
pub struct TcpChannel {
    stream: TcpStream,
    turn: TurnGuard,
}

impl TcpChannel {
    /// Connects a client end, resolving `addr` (host:port).
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, TransportError> {
        let addrs: Vec<_> = addr
            .to_socket_addrs()
            .map_err(|e| TransportError::Io(format!("resolving {addr}: {e}")))?
            .collect();
        let mut last_err = TransportError::Io(format!("{addr} resolved to no addresses"));
        for a in addrs {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(stream) => {
                    let _ = stream.set_nodelay(true);
                    return Ok(TcpChannel { stream, turn: TurnGuard::client_end() });
                }
                Err(e) => last_err = TransportError::Io(format!("connecting {a}: {e}")),
            }
        }
        Err(last_err)
    }

    /// Wraps an accepted connection as the worker end.
    pub fn from_stream(stream: TcpStream) -> Self {
        let _ = stream.set_nodelay(true);
        TcpChannel { stream, turn: TurnGuard::worker_end() }
    }

    fn io_error(e: std::io::Error) -> TransportError {
        use std::io::ErrorKind::*;
        match e.kind() {
            WouldBlock | TimedOut => TransportError::Timeout,
            UnexpectedEof | ConnectionReset | ConnectionAborted | BrokenPipe => {
                TransportError::Closed
            }
            _ => TransportError::Io(e.to_string()),
        }
    }
}

impl Channel for TcpChannel {
    fn send(&mut self, msg: &ProtocolMessage) -> Result<(), TransportError> {
        self.turn.begin_send()?;
        self.stream
            .write_all(&serialize(msg))
            .map_err(Self::io_error)?;
        self.turn.may_send = false;
        Ok(())
    }

    fn receive(&mut self, timeout: Duration) -> Result<ProtocolMessage, TransportError> {
        self.turn.begin_receive()?;
        self.stream
            .set_read_timeout(Some(timeout))
            .map_err(Self::io_error)?;
        let mut prefix = [0u8; 4];
        self.stream.read_exact(&mut prefix).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                TransportError::Closed
            } else {
                Self::io_error(e)
            }
        })?;
        let len = u32::from_be_bytes(prefix) as u64;
        if len > MAX_FRAME_BYTES {
            return Err(TransportError::FrameTooLarge(len));
        }
        let mut body = vec![0u8; len as usize];
        self.stream.read_exact(&mut body).map_err(Self::io_error)?;
        self.turn.may_send = true;
        parse_body(&body)
    }
}

/// Wraps a channel and keeps plaintext copies of everything that crosses it.
/// Test instrumentation: lets assertions inspect what a network observer
/// (or the worker) would see.
pub struct RecordingChannel<C: Channel> {
    pub inner: C,
    pub sent: Vec<ProtocolMessage>,
    pub received: Vec<ProtocolMessage>,
}

impl<C: Channel> RecordingChannel<C> {
    pub fn new(inner: C) -> Self {
        RecordingChannel { inner, sent: Vec::new(), received: Vec::new() }
    }
}

impl<C: Channel> Channel for RecordingChannel<C> {
    fn send(&mut self, msg: &ProtocolMessage) -> Result<(), TransportError> {
        self.inner.send(msg)?;
        self.sent.push(msg.clone());
        Ok(())
    }

    fn receive(&mut self, timeout: Duration) -> Result<ProtocolMessage, TransportError> {
        let msg = self.inner.receive(timeout)?;
        self.received.push(msg.clone());
        Ok(msg)
    }
}

/// Running SHA-256 over the canonical bytes of a message sequence, in order.
/// Client and worker ends of the same honest session produce the same
/// digest regardless of transport.
#[derive(Clone)]
pub struct TranscriptDigest {
    hasher: Sha256,
    messages: u64,
}

impl Default for TranscriptDigest {
    fn default() -> Self {
        Self::new()
    }
}

impl TranscriptDigest {
    pub fn new() -> Self {
        TranscriptDigest { hasher: Sha256::new(), messages: 0 }
    }

    pub fn absorb(&mut self, msg: &ProtocolMessage) {
        self.hasher.update(serialize(msg));
        self.messages += 1;
    }

    pub fn message_count(&self) -> u64 {
        self.messages
    }

    /// Final digest as 64 hex characters.
    pub fn finish(self) -> String {
        self.hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
