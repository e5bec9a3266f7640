//! Coordinator ⇄ node wire protocol.
//!
//! Every message travels as `[len: u32 big-endian][body: UTF-8 JSON]`. Bodies
//! are canonical JSON (object keys sorted, no insignificant whitespace) of the
//! form `{"kind": ..., "payload": {...}, "version": 1}`. Binary chunk data is
//! base64 inside the JSON string.

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lighting::{LightLevel, PatternSpec};
use crate::time::Timestamp;

pub const PROTOCOL_VERSION: u32 = 1;
/// Upper bound on a serialized body.
pub const MAX_BODY_LEN: usize = 1 << 24;
/// Upper bound on the raw payload of one `FrameChunk`.
pub const MAX_CHUNK_LEN: usize = 64 * 1024;
const PREFIX_LEN: usize = 4;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.pad(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
    };
}

string_id!(NodeId);
string_id!(SessionId);

/// The two exposures of a capture: plain light, then projected dots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Texture,
    Pattern,
}

impl Phase {
    pub const BOTH: [Phase; 2] = [Phase::Texture, Phase::Pattern];

    /// Directory name inside a capture set.
    pub fn dir_name(self) -> &'static str {
        match self {
            Phase::Texture => "texture",
            Phase::Pattern => "pattern",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.dir_name())
    }
}

/// Identifies one frame of one session.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameKey {
    pub session_id: SessionId,
    pub node_id: NodeId,
    pub phase: Phase,
}

/// Provenance of one captured image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameMetadata {
    pub node_id: NodeId,
    pub session_id: SessionId,
    pub phase: Phase,
    pub width: u32,
    pub height: u32,
    pub byte_size: u64,
    /// Lower-case hex SHA-256 of the image bytes.
    pub checksum: String,
    pub captured_at: Timestamp,
}

impl FrameMetadata {
    pub fn key(&self) -> FrameKey {
        FrameKey { session_id: self.session_id.clone(), node_id: self.node_id.clone(), phase: self.phase }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub node_id: NodeId,
    pub beam: u32,
    pub slot: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HelloAck {
    pub node_id: NodeId,
    pub heartbeat_period_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Heartbeat {
    pub node_id: NodeId,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureCommand {
    pub session_id: SessionId,
    pub phase: Phase,
    /// Projected pattern; present exactly for the `Pattern` phase.
    pub pattern_ref: Option<PatternSpec>,
    /// Milliseconds after receipt by which the exposure must complete.
    pub exposure_deadline: u64,
}

impl CaptureCommand {
    pub fn deadline(&self) -> Duration {
        Duration::from_millis(self.exposure_deadline)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LightCommand {
    pub session_id: Option<SessionId>,
    pub level: LightLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternCommand {
    pub session_id: Option<SessionId>,
    pub pattern: PatternSpec,
}

/// Which command a `CaptureAck` answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AckStep {
    Lights,
    Projection,
    Capture(Phase),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "error", content = "detail")]
pub enum AckFailure {
    BackendFailure(String),
    DeadlineExceeded(String),
    ControllerUnreachable(u32),
    ProjectorFailure(String),
}

impl fmt::Display for AckFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AckFailure::BackendFailure(d) => write!(f, "backend failure: {d}"),
            AckFailure::DeadlineExceeded(d) => write!(f, "deadline exceeded: {d}"),
            AckFailure::ControllerUnreachable(c) => write!(f, "light controller {c} unreachable"),
            AckFailure::ProjectorFailure(d) => write!(f, "projector failure: {d}"),
        }
    }
}

/// Acknowledges a session step (lights, projection or an exposure).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureAck {
    pub session_id: Option<SessionId>,
    pub node_id: NodeId,
    pub step: AckStep,
    pub failure: Option<AckFailure>,
}

impl CaptureAck {
    pub fn is_ok(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameHeader {
    pub frame: FrameMetadata,
    pub chunk_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameChunk {
    pub key: FrameKey,
    pub index: u32,
    #[serde(with = "b64")]
    pub data: Vec<u8>,
}

/// Sent by the agent after the last chunk; echoed back by the coordinator as
/// the receipt once the frame is verified and stored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameComplete {
    pub key: FrameKey,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetCommand {
    pub job_id: u64,
    pub command: String,
    pub timeout_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status")]
pub enum FleetOutcome {
    Exited { code: i32, output: String },
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetResult {
    pub job_id: u64,
    pub node_id: NodeId,
    pub outcome: FleetOutcome,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorCode {
    NotRegistered,
    SlotConflict,
    OutOfRig,
    UnknownNode,
    UnknownSession,
    SessionClosed,
    PhaseMismatch,
    ChecksumMismatch,
    ChunkOutOfOrder,
    TransferFailed,
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorMessage {
    pub code: ErrorCode,
    pub message: String,
    pub frame: Option<FrameKey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum Body {
    Hello(Hello),
    HelloAck(HelloAck),
    Heartbeat(Heartbeat),
    CaptureCommand(CaptureCommand),
    LightCommand(LightCommand),
    PatternCommand(PatternCommand),
    CaptureAck(CaptureAck),
    FrameHeader(FrameHeader),
    FrameChunk(FrameChunk),
    FrameComplete(FrameComplete),
    FleetCommand(FleetCommand),
    FleetResult(FleetResult),
    Error(ErrorMessage),
}

impl Body {
    pub fn kind(&self) -> &'static str {
        match self {
            Body::Hello(_) => "Hello",
            Body::HelloAck(_) => "HelloAck",
            Body::Heartbeat(_) => "Heartbeat",
            Body::CaptureCommand(_) => "CaptureCommand",
            Body::LightCommand(_) => "LightCommand",
            Body::PatternCommand(_) => "PatternCommand",
            Body::CaptureAck(_) => "CaptureAck",
            Body::FrameHeader(_) => "FrameHeader",
            Body::FrameChunk(_) => "FrameChunk",
            Body::FrameComplete(_) => "FrameComplete",
            Body::FleetCommand(_) => "FleetCommand",
            Body::FleetResult(_) => "FleetResult",
            Body::Error(_) => "Error",
        }
    }

    /// Checks the per-type invariants that JSON typing alone cannot express.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            Body::CaptureCommand(c) => match (c.phase, &c.pattern_ref) {
                (Phase::Texture, Some(_)) => Err("texture capture must not carry a pattern".into()),
                (Phase::Pattern, None) => Err("pattern capture requires a pattern".into()),
                (_, Some(p)) => p.validate().map_err(|e| e.to_string()),
                (Phase::Texture, None) => Ok(()),
            },
            Body::PatternCommand(p) => p.pattern.validate().map_err(|e| e.to_string()),
            Body::FrameChunk(c) if c.data.len() > MAX_CHUNK_LEN => {
                Err(format!("chunk of {} bytes exceeds {MAX_CHUNK_LEN}", c.data.len()))
            }
            Body::FrameHeader(h) if h.frame.width as u64 * h.frame.height as u64 == 0 => {
                Err("frame has no pixels".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub version: u32,
    #[serde(flatten)]
    pub body: Body,
}

impl Message {
    pub fn new(body: Body) -> Self {
        Self { version: PROTOCOL_VERSION, body }
    }
}

impl From<Body> for Message {
    fn from(body: Body) -> Self {
        Message::new(body)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("serialized body is {0} bytes, above the {MAX_BODY_LEN}-byte limit")]
    BodyTooLarge(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("frame truncated: need {needed} bytes, have {available}")]
    TruncatedFrame { needed: usize, available: usize },
    #[error("length prefix {0} exceeds the {MAX_BODY_LEN}-byte limit")]
    BodyTooLarge(usize),
    #[error("malformed body: {0}")]
    MalformedBody(String),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u64),
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
}

/// Canonical JSON for a message body: sorted keys, compact.
pub fn canonical_json(m: &Message) -> Vec<u8> {
    // serde_json's Value map is ordered, so going through Value sorts keys.
    let value = serde_json::to_value(m).expect("messages always serialize");
    serde_json::to_vec(&value).expect("values always serialize")
}

pub fn encode_message(m: &Message) -> Result<Vec<u8>, EncodeError> {
    let body = canonical_json(m);
    if body.len() > MAX_BODY_LEN {
        return Err(EncodeError::BodyTooLarge(body.len()));
    }
    let mut out = Vec::with_capacity(PREFIX_LEN + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

fn decode_body(body: &[u8]) -> Result<Message, DecodeError> {
    let value: serde_json::Value =
        serde_json::from_slice(body).map_err(|e| DecodeError::MalformedBody(e.to_string()))?;
    let version = value.get("version").ok_or_else(|| DecodeError::MalformedBody("missing version".into()))?;
    let version =
        version.as_u64().ok_or_else(|| DecodeError::MalformedBody("version is not an unsigned integer".into()))?;
    if version != PROTOCOL_VERSION as u64 {
        return Err(DecodeError::UnsupportedVersion(version));
    }
    let m: Message = serde_json::from_value(value).map_err(|e| DecodeError::MalformedBody(e.to_string()))?;
    m.body.validate().map_err(DecodeError::MalformedBody)?;
    Ok(m)
}

/// Splits one frame off the front of `buf`. `Ok(None)` means more bytes are
/// needed; otherwise returns the message and the number of bytes consumed.
pub fn try_decode_frame(buf: &[u8]) -> Result<Option<(Message, usize)>, DecodeError> {
    if buf.len() < PREFIX_LEN {
        return Ok(None);
    }
    let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if len > MAX_BODY_LEN {
        return Err(DecodeError::BodyTooLarge(len));
    }
    let end = PREFIX_LEN + len;
    if buf.len() < end {
        return Ok(None);
    }
    let m = decode_body(&buf[PREFIX_LEN..end])?;
    Ok(Some((m, end)))
}

/// Decodes exactly one frame occupying all of `b`.
pub fn decode_message(b: &[u8]) -> Result<Message, DecodeError> {
    match try_decode_frame(b)? {
        Some((m, used)) if used == b.len() => Ok(m),
        Some((_, used)) => Err(DecodeError::TrailingBytes(b.len() - used)),
        None => {
            let needed = if b.len() < PREFIX_LEN {
                PREFIX_LEN
            } else {
                PREFIX_LEN + u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize
            };
            Err(DecodeError::TruncatedFrame { needed, available: b.len() })
        }
    }
}

/// Decodes a concatenation of frames.
pub fn decode_all(mut b: &[u8]) -> Result<Vec<Message>, DecodeError> {
    let mut out = Vec::new();
    while !b.is_empty() {
        match try_decode_frame(b)? {
            Some((m, used)) => {
                out.push(m);
                b = &b[used..];
            }
            None => return Err(decode_message(b).unwrap_err()),
        }
    }
    Ok(out)
}

/// Incremental decoder for a byte stream.
#[derive(Debug, Default)]
pub struct FrameReader {
    buf: Vec<u8>,
}

impl FrameReader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message, if one is buffered.
    pub fn next_message(&mut self) -> Result<Option<Message>, DecodeError> {
        match try_decode_frame(&self.buf)? {
            Some((m, used)) => {
                self.buf.drain(..used);
                Ok(Some(m))
            }
            None => Ok(None),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

/// Splits a frame into its `FrameHeader`, `FrameChunk`s and `FrameComplete`.
pub fn frame_messages(meta: &FrameMetadata, bytes: &[u8]) -> Vec<Message> {
    let key = meta.key();
    let chunks: Vec<&[u8]> = bytes.chunks(MAX_CHUNK_LEN).collect();
    let mut out = Vec::with_capacity(chunks.len() + 2);
    out.push(Message::new(Body::FrameHeader(FrameHeader { frame: meta.clone(), chunk_count: chunks.len() as u32 })));
    for (i, data) in chunks.into_iter().enumerate() {
        out.push(Message::new(Body::FrameChunk(FrameChunk { key: key.clone(), index: i as u32, data: data.to_vec() })));
    }
    out.push(Message::new(Body::FrameComplete(FrameComplete { key, checksum: meta.checksum.clone() })));
    out
}

/// Lower-case hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

/// Length of the base64 text for `n` raw bytes.
pub fn base64_len(n: usize) -> usize {
    n.div_ceil(3) * 4
}

mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(data: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(data))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text.as_bytes()).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use base64::Engine as _;

    fn hello() -> Message {
        Message::new(Body::Hello(Hello { node_id: "n01".into(), beam: 0, slot: 0 }))
    }

    #[test]
    fn heartbeat_prefix_is_body_length() {
        let m = Message::new(Body::Heartbeat(Heartbeat { node_id: "n01".into(), seq: 0 }));
        let bytes = encode_message(&m).unwrap();
        let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        assert_eq!(len, bytes.len() - 4);
        assert!(serde_json::from_slice::<serde_json::Value>(&bytes[4..]).is_ok());
    }

    #[test]
    fn hello_matches_hand_built_frame() {
        let body = br#"{"kind":"Hello","payload":{"beam":0,"node_id":"n01","slot":0},"version":1}"#;
        let mut expected = (body.len() as u32).to_be_bytes().to_vec();
        expected.extend_from_slice(body);
        assert_eq!(expected[..4], [0, 0, 0, 74]);
        assert_eq!(encode_message(&hello()).unwrap(), expected);
    }

    #[test]
    fn truncated_frame() {
        let mut b = 100u32.to_be_bytes().to_vec();
        b.extend_from_slice(&[b'{'; 10]);
        assert_eq!(decode_message(&b), Err(DecodeError::TruncatedFrame { needed: 104, available: 14 }));
        assert!(matches!(decode_message(&[0, 0]), Err(DecodeError::TruncatedFrame { .. })));
    }

    #[test]
    fn version_two_rejected() {
        let body = br#"{"kind":"Hello","payload":{"beam":0,"node_id":"n01","slot":0},"version":2}"#;
        let mut b = (body.len() as u32).to_be_bytes().to_vec();
        b.extend_from_slice(body);
        assert_eq!(decode_message(&b), Err(DecodeError::UnsupportedVersion(2)));
    }

    #[test]
    fn oversized_prefix_rejected_without_allocation() {
        let b = u32::MAX.to_be_bytes();
        assert!(matches!(decode_message(&b), Err(DecodeError::BodyTooLarge(_))));
    }

    #[test]
    fn capture_command_pattern_rule() {
        let bad = Message::new(Body::CaptureCommand(CaptureCommand {
            session_id: "s".into(),
            phase: Phase::Pattern,
            pattern_ref: None,
            exposure_deadline: 10,
        }));
        let bytes = encode_message(&bad).unwrap();
        assert!(matches!(decode_message(&bytes), Err(DecodeError::MalformedBody(_))));

        let also_bad = Message::new(Body::CaptureCommand(CaptureCommand {
            session_id: "s".into(),
            phase: Phase::Texture,
            pattern_ref: Some(PatternSpec::random_dot(1, 0.5, 4, 4)),
            exposure_deadline: 10,
        }));
        let bytes = encode_message(&also_bad).unwrap();
        assert!(matches!(decode_message(&bytes), Err(DecodeError::MalformedBody(_))));
    }

    #[test]
    fn oversized_chunk_rejected() {
        let m = Message::new(Body::FrameChunk(FrameChunk {
            key: FrameKey { session_id: "s".into(), node_id: "n".into(), phase: Phase::Texture },
            index: 0,
            data: vec![0; MAX_CHUNK_LEN + 1],
        }));
        let bytes = encode_message(&m).unwrap();
        assert!(matches!(decode_message(&bytes), Err(DecodeError::MalformedBody(_))));
    }

    #[test]
    fn trailing_bytes_rejected_but_stream_decodes() {
        let mut b = encode_message(&hello()).unwrap();
        b.extend(encode_message(&hello()).unwrap());
        assert!(matches!(decode_message(&b), Err(DecodeError::TrailingBytes(_))));
        assert_eq!(decode_all(&b).unwrap(), vec![hello(), hello()]);
    }

    #[test]
    fn frame_reader_handles_split_input() {
        let b = encode_message(&hello()).unwrap();
        let mut r = FrameReader::new();
        r.push(&b[..10]);
        assert_eq!(r.next_message().unwrap(), None);
        r.push(&b[10..]);
        assert_eq!(r.next_message().unwrap(), Some(hello()));
        assert_eq!(r.buffered(), 0);
    }

    #[test]
    fn frame_messages_chunking() {
        let bytes = vec![7u8; 2 * MAX_CHUNK_LEN + 5];
        let meta = FrameMetadata {
            node_id: "n01".into(),
            session_id: "s1".into(),
            phase: Phase::Texture,
            width: 1,
            height: 1,
            byte_size: bytes.len() as u64,
            checksum: sha256_hex(&bytes),
            captured_at: Timestamp::ZERO,
        };
        let msgs = frame_messages(&meta, &bytes);
        assert_eq!(msgs.len(), 5);
        match &msgs[0].body {
            Body::FrameHeader(h) => assert_eq!(h.chunk_count, 3),
            other => panic!("{other:?}"),
        }
        let data: Vec<u8> = msgs
            .iter()
            .filter_map(|m| match &m.body {
                Body::FrameChunk(c) => Some(c.data.clone()),
                _ => None,
            })
            .flatten()
            .collect();
        assert_eq!(data, bytes);
        assert!(matches!(msgs[4].body, Body::FrameComplete(_)));
    }

    #[test]
    fn base64_len_matches_engine() {
        for n in [0, 1, 2, 3, 4, 65536] {
            let enc = base64::engine::general_purpose::STANDARD.encode(vec![0u8; n]);
            assert_eq!(base64_len(n), enc.len());
        }
    }
}
