//! Capture-set directory, manifest and chunk reassembly.
//!
//! Layout under the store root:
//!
//! ```text
//! sessions/<session_id>/texture/<node_id>.ppm
//! sessions/<session_id>/pattern/<node_id>.ppm
//! sessions/<session_id>/manifest.json
//! ```
//!
//! Every file is written to a temporary sibling and renamed into place, so a
//! crash never leaves a half-written frame or manifest behind.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lighting::{LightLevel, PatternSpec};
use crate::protocol::{sha256_hex, FrameChunk, FrameHeader, FrameKey, FrameMetadata, NodeId, Phase, SessionId};
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifestPattern {
    pub seed: u64,
    pub density: f64,
    pub width: u32,
    pub height: u32,
    /// Beam `b` projected `seed + b` instead of `seed`.
    #[serde(default)]
    pub per_projector_seeds: bool,
}

impl From<&PatternSpec> for ManifestPattern {
    fn from(p: &PatternSpec) -> Self {
        Self { seed: p.seed, density: p.density, width: p.width, height: p.height, per_projector_seeds: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub node_id: NodeId,
    pub phase: Phase,
    /// Relative to the session directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
    pub captured_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub session_id: SessionId,
    pub started_at: Timestamp,
    pub light_level: LightLevel,
    pub pattern: ManifestPattern,
    pub frames: Vec<ManifestFrame>,
}

impl Manifest {
    pub fn new(session_id: SessionId, started_at: Timestamp, light_level: LightLevel, pattern: &PatternSpec) -> Self {
        Self { session_id, started_at, light_level, pattern: pattern.into(), frames: Vec::new() }
    }

    pub fn contains(&self, node: &NodeId, phase: Phase) -> bool {
        self.frames.iter().any(|f| &f.node_id == node && f.phase == phase)
    }

    pub fn total_bytes(&self) -> u64 {
        self.frames.iter().map(|f| f.bytes).sum()
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("manifest at {path} is malformed: {reason}")]
    BadManifest { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone)]
pub struct CaptureStore {
    root: PathBuf,
}

impl CaptureStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let sessions = root.join("sessions");
        fs::create_dir_all(&sessions).map_err(io_err(&sessions))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn session_dir(&self, id: &SessionId) -> PathBuf {
        self.root.join("sessions").join(id.as_str())
    }

    pub fn frame_relpath(node: &NodeId, phase: Phase) -> String {
        format!("{}/{}.ppm", phase.dir_name(), node)
    }

    /// Next free id of the form `sNNNN`.
    pub fn next_session_id(&self) -> SessionId {
        let highest = fs::read_dir(self.root.join("sessions"))
            .into_iter()
            .flatten()
            .flatten()
            .filter_map(|e| e.file_name().to_str().and_then(parse_session_number))
            .max()
            .unwrap_or(0);
        format_session_id(highest + 1)
    }

    pub fn has_frame(&self, key: &FrameKey) -> bool {
        self.session_dir(&key.session_id).join(Self::frame_relpath(&key.node_id, key.phase)).is_file()
    }

    /// Writes the frame file atomically and returns its manifest row.
    pub fn write_frame(&self, meta: &FrameMetadata, bytes: &[u8]) -> Result<ManifestFrame, StoreError> {
        let rel = Self::frame_relpath(&meta.node_id, meta.phase);
        let path = self.session_dir(&meta.session_id).join(&rel);
        write_atomic(&path, bytes)?;
        Ok(ManifestFrame {
            node_id: meta.node_id.clone(),
            phase: meta.phase,
            path: rel,
            bytes: bytes.len() as u64,
            sha256: meta.checksum.clone(),
            captured_at: meta.captured_at,
        })
    }

    pub fn write_manifest(&self, manifest: &Manifest) -> Result<(), StoreError> {
        let path = self.session_dir(&manifest.session_id).join("manifest.json");
        let mut body = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
        body.push(b'\n');
        write_atomic(&path, &body)
    }

    pub fn read_manifest(&self, id: &SessionId) -> Result<Manifest, StoreError> {
        read_manifest(&self.session_dir(id))
    }
}

fn parse_session_number(name: &str) -> Option<u64> {
    let digits = name.strip_prefix('s')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

pub fn format_session_id(n: u64) -> SessionId {
    SessionId::new(format!("s{n:04}"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().expect("store paths have a parent");
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp_name = path.file_name().expect("file name").to_os_string();
    tmp_name.push(".tmp");
    let tmp = dir.join(tmp_name);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_manifest(session_dir: &Path) -> Result<Manifest, StoreError> {
    let path = session_dir.join("manifest.json");
    let raw = fs::read(&path).map_err(io_err(&path))?;
    serde_json::from_slice(&raw).map_err(|e| StoreError::BadManifest { path, reason: e.to_string() })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checked: usize,
    pub ok: usize,
    pub failures: Vec<String>,
}

impl VerifyReport {
    pub fn is_sound(&self) -> bool {
        self.failures.is_empty() && self.ok == self.checked
    }
}

/// Re-hashes every file listed in the manifest.
pub fn verify_manifest(session_dir: &Path) -> Result<VerifyReport, StoreError> {
    let manifest = read_manifest(session_dir)?;
    let mut report = VerifyReport::default();
    let mut seen = std::collections::BTreeSet::new();
    for row in &manifest.frames {
        report.checked += 1;
        if !seen.insert((row.node_id.clone(), row.phase)) {
            report.failures.push(format!("{}: duplicate row", row.path));
            continue;
        }
        match fs::read(session_dir.join(&row.path)) {
            Err(e) => report.failures.push(format!("{}: {e}", row.path)),
            Ok(bytes) if bytes.len() as u64 != row.bytes => {
                report.failures.push(format!("{}: {} bytes, manifest says {}", row.path, bytes.len(), row.bytes))
            }
            Ok(bytes) if sha256_hex(&bytes) != row.sha256 => {
                report.failures.push(format!("{}: checksum mismatch", row.path))
            }
            Ok(_) => report.ok += 1,
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AssemblyError {
    #[error("no header seen for this frame")]
    UnknownFrame,
    #[error("expected chunk {expected}, got {got}")]
    ChunkOutOfOrder { expected: u32, got: u32 },
    #[error("received {got} of {expected} chunks")]
    Incomplete { expected: u32, got: u32 },
    #[error("frame bytes do not match the announced checksum")]
    ChecksumMismatch,
}

#[derive(Debug)]
struct Assembly {
    meta: FrameMetadata,
    chunk_count: u32,
    next: u32,
    buf: Vec<u8>,
}

/// Reassembles chunked frames. A new header for a key discards any partial
/// copy, which is what a re-send after reconnect needs.
#[derive(Debug, Default)]
pub struct FrameAssembler {
    inflight: BTreeMap<FrameKey, Assembly>,
}

impl FrameAssembler {
    pub fn begin(&mut self, header: &FrameHeader) {
        let cap = usize::try_from(header.frame.byte_size).unwrap_or(0).min(crate::protocol::MAX_BODY_LEN * 4);
        self.inflight.insert(
            header.frame.key(),
            Assembly {
                meta: header.frame.clone(),
                chunk_count: header.chunk_count,
                next: 0,
                buf: Vec::with_capacity(cap),
            },
        );
    }

    pub fn push(&mut self, chunk: &FrameChunk) -> Result<(), AssemblyError> {
        let a = self.inflight.get_mut(&chunk.key).ok_or(AssemblyError::UnknownFrame)?;
        if chunk.index != a.next {
            let expected = a.next;
            self.inflight.remove(&chunk.key);
            return Err(AssemblyError::ChunkOutOfOrder { expected, got: chunk.index });
        }
        a.next += 1;
        a.buf.extend_from_slice(&chunk.data);
        Ok(())
    }

    /// Completes a frame: every chunk must be present and the bytes must hash
    /// to both the header checksum and the one in the completion message.
    pub fn finish(&mut self, key: &FrameKey, checksum: &str) -> Result<(FrameMetadata, Vec<u8>), AssemblyError> {
        let a = self.inflight.remove(key).ok_or(AssemblyError::UnknownFrame)?;
        if a.next != a.chunk_count {
            return Err(AssemblyError::Incomplete { expected: a.chunk_count, got: a.next });
        }
        let actual = sha256_hex(&a.buf);
        if actual != a.meta.checksum || actual != checksum || a.buf.len() as u64 != a.meta.byte_size {
            return Err(AssemblyError::ChecksumMismatch);
        }
        Ok((a.meta, a.buf))
    }

    pub fn abandon_node(&mut self, node: &NodeId) {
        self.inflight.retain(|k, _| &k.node_id != node);
    }

    pub fn in_progress(&self) -> usize {
        self.inflight.len()
    }
}
