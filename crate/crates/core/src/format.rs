//! Binary interchange format for attention traces.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"XATR" | version: u32 | manifest_len: u32 | manifest (UTF-8 JSON) | blob
//! ```
//!
//! The blob is a sequence of row-major little-endian `f32` values. Each layer
//! in the manifest names the absolute byte offsets of its attention and
//! gradient tensors from the start of the blob.

use std::fs;
use std::io;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{AttentionTrace, LayerKind, LayerRecord, StreamId, TokenMeta, Violation};

pub const MAGIC: [u8; 4] = *b"XATR";
pub const FORMAT_VERSION: u32 = 1;

const HEADER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes {0:?}, expected \"XATR\"")]
    BadMagic([u8; 4]),
    #[error("file shorter than the {HEADER_LEN}-byte header")]
    TruncatedHeader,
    #[error("unknown format version {0} (supported: {FORMAT_VERSION})")]
    UnknownVersion(u32),
    #[error("manifest declares {declared} bytes but only {available} follow the header")]
    ManifestLength { declared: usize, available: usize },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("manifest version {manifest} disagrees with header version {header}")]
    VersionMismatch { header: u32, manifest: u32 },
    #[error("layer {layer} {tensor}: {detail}")]
    Tensor {
        layer: usize,
        tensor: &'static str,
        detail: String,
    },
    #[error("blob is {actual} bytes, manifest declares {declared}")]
    BlobLength { declared: u64, actual: u64 },
    #[error("refusing to write an invalid trace: {}", first_violation(.0))]
    Invalid(Vec<Violation>),
}

fn first_violation(v: &[Violation]) -> String {
    match v.first() {
        Some(first) if v.len() > 1 => format!("{first} (+{} more)", v.len() - 1),
        Some(first) => first.to_string(),
        None => String::new(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    loss_descriptor: String,
    streams: Vec<TokenMeta>,
    layers: Vec<LayerEntry>,
    blob_bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    index: usize,
    kind: LayerKind,
    query_stream: StreamId,
    kv_stream: StreamId,
    /// `[heads, n_query, n_key]`
    shape: [usize; 3],
    attention_offset: u64,
    gradient_offset: u64,
}

/// Serializes a trace. The trace must validate.
pub fn encode(trace: &AttentionTrace) -> Result<Vec<u8>, FormatError> {
    let violations = trace.validate();
    if !violations.is_empty() {
        return Err(FormatError::Invalid(violations));
    }

    let mut blob: Vec<u8> = Vec::new();
    let mut layers = Vec::with_capacity(trace.layers.len());
    for layer in &trace.layers {
        let (h, nq, nk) = layer.attention.dim();
        let attention_offset = blob.len() as u64;
        push_tensor(&mut blob, &layer.attention);
        let gradient_offset = blob.len() as u64;
        push_tensor(&mut blob, &layer.gradient);
        layers.push(LayerEntry {
            index: layer.index,
            kind: layer.kind,
            query_stream: layer.query_stream,
            kv_stream: layer.kv_stream,
            shape: [h, nq, nk],
            attention_offset,
            gradient_offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        loss_descriptor: trace.loss_descriptor.clone(),
        streams: trace.tokens.clone(),
        layers,
        blob_bytes: blob.len() as u64,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| FormatError::Manifest(e.to_string()))?;

    let mut out = Vec::with_capacity(HEADER_LEN + text.len() + blob.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&blob);
    Ok(out)
}

fn push_tensor(blob: &mut Vec<u8>, t: &Array3<f32>) {
    // `iter` walks logical row-major order regardless of memory layout.
    for v in t.iter() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

/// Parses a trace. Structural validity of the decoded trace is not checked
/// here; call [`AttentionTrace::validate`].
pub fn decode(bytes: &[u8]) -> Result<AttentionTrace, FormatError> {
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::TruncatedHeader);
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(FormatError::UnknownVersion(version));
    }
    let declared = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let rest = &bytes[HEADER_LEN..];
    if declared > rest.len() {
        return Err(FormatError::ManifestLength {
            declared,
            available: rest.len(),
        });
    }
    let (text, blob) = rest.split_at(declared);
    let text =
        std::str::from_utf8(text).map_err(|e| FormatError::Manifest(format!("not UTF-8: {e}")))?;
    let manifest: Manifest = serde_json::from_str(text).map_err(|e| {
        FormatError::Manifest(format!("line {} column {}: {e}", e.line(), e.column()))
    })?;
    if manifest.format_version != version {
        return Err(FormatError::VersionMismatch {
            header: version,
            manifest: manifest.format_version,
        });
    }

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (pos, entry) in manifest.layers.iter().enumerate() {
        let attention =
            read_tensor(blob, entry.shape, entry.attention_offset).map_err(|detail| {
                FormatError::Tensor {
                    layer: pos,
                    tensor: "attention",
                    detail,
                }
            })?;
        let gradient = read_tensor(blob, entry.shape, entry.gradient_offset).map_err(|detail| {
            FormatError::Tensor {
                layer: pos,
                tensor: "gradient",
                detail,
            }
        })?;
        layers.push(LayerRecord {
            index: entry.index,
            kind: entry.kind,
            query_stream: entry.query_stream,
            kv_stream: entry.kv_stream,
            attention,
            gradient,
        });
    }
    if manifest.blob_bytes != blob.len() as u64 {
        return Err(FormatError::BlobLength {
            declared: manifest.blob_bytes,
            actual: blob.len() as u64,
        });
    }

    Ok(AttentionTrace {
        tokens: manifest.streams,
        layers,
        loss_descriptor: manifest.loss_descriptor,
    })
}

fn read_tensor(blob: &[u8], shape: [usize; 3], offset: u64) -> Result<Array3<f32>, String> {
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format!("shape {shape:?} overflows"))?;
    let bytes = n
        .checked_mul(4)
        .ok_or_else(|| format!("shape {shape:?} overflows"))?;
    if !offset.is_multiple_of(4) {
        return Err(format!("offset {offset} is not 4-byte aligned"));
    }
    let start = usize::try_from(offset).map_err(|_| format!("offset {offset} out of range"))?;
    let end = start
        .checked_add(bytes)
        .filter(|&e| e <= blob.len())
        .ok_or_else(|| {
            format!(
                "shape {shape:?} at offset {offset} needs {bytes} bytes, blob has {}",
                blob.len()
            )
        })?;
    let data: Vec<f32> = blob[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array3::from_shape_vec((shape[0], shape[1], shape[2]), data).map_err(|e| e.to_string())
}

pub fn write_trace(trace: &AttentionTrace, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let bytes = encode(trace)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<AttentionTrace, FormatError> {
    decode(&fs::read(path)?)
}
