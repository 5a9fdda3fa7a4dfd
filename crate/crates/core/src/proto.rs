//! Wire schemas and framing for the P2M and M2M protocols.
//!
//! Transport is request/response over TCP: each message is a 4-byte
//! big-endian length prefix followed by a JSON body. Resource and grant ids
//! travel as canonical strings; the services parse them and answer protocol
//! errors for malformed input, so a bad id never kills a connection.
//!
//! One error code space covers both protocols. `INTERNAL` doubles as the
//! reply code for frames that do not decode at all.

use std::io::{self, Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use crate::flags::ComplianceFlags;
use crate::flow::FlowOutcome;

/// Upper bound on one frame body; larger prefixes are treated as garbage
/// and the connection is dropped.
pub const MAX_FRAME_LEN: u32 = 8 * 1024 * 1024;

/// Default P2M listen port.
pub const DEFAULT_P2M_PORT: u16 = 50051;
/// Default M2M listen port.
pub const DEFAULT_M2M_PORT: u16 = 50052;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    MalformedId,
    BadFlow,
    UnknownResource,
    StaleGrant,
    PeerUnreachable,
    Internal,
}

impl std::fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ErrorCode::MalformedId => "MALFORMED_ID",
            ErrorCode::BadFlow => "BAD_FLOW",
            ErrorCode::UnknownResource => "UNKNOWN_RESOURCE",
            ErrorCode::StaleGrant => "STALE_GRANT",
            ErrorCode::PeerUnreachable => "PEER_UNREACHABLE",
            ErrorCode::Internal => "INTERNAL",
        };
        f.write_str(s)
    }
}

/// Protocol error reply shared by P2M and M2M.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolError {
    pub code: ErrorCode,
    pub message: String,
}

/// One provenance entry on the wire: canonical id string plus flags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub id: String,
    pub flags: ComplianceFlags,
}

// ---------------------------------------------------------------------------
// P2M: process to middleware
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum P2mRequest {
    /// Registers a resource (idempotent; flags merge by OR).
    Enroll { id: String, flags: ComplianceFlags },
    /// Authorization phase of one I/O operation.
    IoRequest { source: String, destination: String },
    /// Reporting phase; acked only after the provenance update settled.
    IoReport {
        grant_id: String,
        outcome: FlowOutcome,
    },
    /// Arms policy flags on an enrolled resource.
    SetPolicy { id: String, flags: ComplianceFlags },
    /// Snapshot of a resource's provenance, sorted by global id order.
    ProvenanceQuery { id: String },
    /// Identity handshake: which middleware instance is this?
    NodeInfo,
    /// Diagnostic dump of the full id-to-label map, one line per label.
    DumpMap,
    /// Diagnostic dump of the recorded protocol events.
    WireLog,
}

/// Authorization reply. Field presence follows the status: `grant_id` is
/// present iff granted, `policy` iff denied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GrantMsg {
    Granted { grant_id: String },
    Denied { policy: String },
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum P2mResponse {
    Ack,
    Grant(GrantMsg),
    Provenance { entries: Vec<ProvenanceEntry> },
    NodeInfo { node: String },
    MapDump { lines: Vec<String> },
    WireLog { events: Vec<WireEvent> },
    Error(ProtocolError),
}

// ---------------------------------------------------------------------------
// M2M: middleware to middleware
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum M2mRequest {
    /// Reserve the receiving node's side of a stream. The stream id carries
    /// the receiver's view (mirrored sockets); the sender identifies itself
    /// so the receiver can route later cross-node flows back.
    Reserve {
        stream: String,
        from_node: String,
        from_endpoint: String,
    },
    /// Propagate a provenance update onto the reserved stream and release
    /// the reservation.
    SyncProvenance {
        stream: String,
        provenance: Vec<ProvenanceEntry>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum M2mResponse {
    Ack,
    Error(ProtocolError),
}

// ---------------------------------------------------------------------------
// Wire log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    P2m,
    M2m,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    In,
    Out,
}

/// One observed protocol message, as recorded by a middleware instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireEvent {
    pub seq: u64,
    pub channel: Channel,
    pub direction: Direction,
    pub label: String,
    pub detail: String,
}

// ---------------------------------------------------------------------------
// Framing
// ---------------------------------------------------------------------------

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN} byte limit")]
    TooLarge(u32),
    #[error("frame does not decode: {0}")]
    Decode(#[from] serde_json::Error),
}

impl FrameError {
    /// True when the peer closed the connection cleanly between frames.
    pub fn is_clean_eof(&self) -> bool {
        matches!(self, FrameError::Io(e) if e.kind() == io::ErrorKind::UnexpectedEof)
    }
}

pub fn encode<T: Serialize>(msg: &T) -> Vec<u8> {
    serde_json::to_vec(msg).expect("wire messages always serialize")
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, FrameError> {
    Ok(serde_json::from_slice(bytes)?)
}

// Length and body go out as one write: a split write leaves the body
// behind Nagle's algorithm waiting on the ACK for the length bytes, which
// turns every frame into a 40ms round trip.
fn frame_bytes<T: Serialize>(msg: &T) -> Vec<u8> {
    let body = encode(msg);
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    frame
}

pub fn write_frame<T: Serialize>(writer: &mut impl Write, msg: &T) -> io::Result<()> {
    writer.write_all(&frame_bytes(msg))?;
    writer.flush()
}

pub fn read_frame_bytes(reader: &mut impl Read) -> Result<Vec<u8>, FrameError> {
    let mut len = [0u8; 4];
    reader.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME_LEN {
        return Err(FrameError::TooLarge(len));
    }
    let mut body = vec![0u8; len as usize];
    reader.read_exact(&mut body)?;
    Ok(body)
}

pub fn read_frame<T: DeserializeOwned>(reader: &mut impl Read) -> Result<T, FrameError> {
    decode(&read_frame_bytes(reader)?)
}

pub async fn write_frame_async<T: Serialize>(
    writer: &mut (impl AsyncWrite + Unpin),
    msg: &T,
) -> io::Result<()> {
    writer.write_all(&frame_bytes(msg)).await?;
    writer.flush().await
}

pub async fn read_frame_bytes_async(
    reader: &mut (impl AsyncRead + Unpin),
) -> Result<Vec<u8>, FrameError> {
    let mut len = [0u8; 4];
    reader.read_exact(&mut len).await?;
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME_LEN {
        return Err(FrameError::TooLarge(len));
    }
    let mut body = vec![0u8; len as usize];
    reader.read_exact(&mut body).await?;
    Ok(body)
}

pub async fn read_frame_async<T: DeserializeOwned>(
    reader: &mut (impl AsyncRead + Unpin),
) -> Result<T, FrameError> {
    decode(&read_frame_bytes_async(reader).await?)
}
