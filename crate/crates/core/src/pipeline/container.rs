//! Binary container for fitted pipelines.
//!
//! Layout: `"TTPL"`, u16 LE version, u32 LE header length, canonical JSON
//! header (sorted keys), little-endian f64 tensor blobs, then a CRC32C of
//! every preceding byte.

use serde::{Deserialize, Serialize};

use super::PipelineError;

pub const MAGIC: &[u8; 4] = b"TTPL";
pub const VERSION: u16 = 1;
const PREFIX_LEN: usize = 10;
const CRC_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the blob section.
    pub offset: usize,
    pub trainable: bool,
}

impl TensorEntry {
    pub fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * 8
    }
}

/// Serializes `header` canonically and appends the blobs and checksum.
pub fn encode(header: &serde_json::Value, blobs: &[u8]) -> Result<Vec<u8>, PipelineError> {
    // serde_json::Value maps are BTreeMaps, so keys come out sorted
    let header_bytes = serde_json::to_vec(header).map_err(|e| PipelineError::Header(e.to_string()))?;
    let header_len = u32::try_from(header_bytes.len()).map_err(|_| PipelineError::Header("header too large".into()))?;
    let mut out = Vec::with_capacity(PREFIX_LEN + header_bytes.len() + blobs.len() + CRC_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(blobs);
    let crc = crc32c::crc32c(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Verifies framing and checksum, returning the header and the blob bytes.
pub fn decode(bytes: &[u8]) -> Result<(serde_json::Value, &[u8]), PipelineError> {
    if bytes.len() < MAGIC.len() {
        return Err(PipelineError::TruncatedFile);
    }
    if &bytes[..4] != MAGIC {
        return Err(PipelineError::BadMagic);
    }
    if bytes.len() < PREFIX_LEN {
        return Err(PipelineError::TruncatedFile);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(PipelineError::VersionUnsupported(version));
    }
    let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    if PREFIX_LEN + header_len + CRC_LEN > bytes.len() {
        return Err(PipelineError::TruncatedFile);
    }
    let body_end = bytes.len() - CRC_LEN;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("four bytes"));
    let header_bytes = &bytes[PREFIX_LEN..PREFIX_LEN + header_len];
    let blobs = &bytes[PREFIX_LEN + header_len..body_end];
    if crc32c::crc32c(&bytes[..body_end]) != stored {
        // a readable header that promises more blob bytes means truncation
        let declared = serde_json::from_slice::<serde_json::Value>(header_bytes)
            .ok()
            .and_then(|h| h.get("blob_bytes").and_then(serde_json::Value::as_u64));
        return Err(match declared {
            Some(n) if n as usize > blobs.len() => PipelineError::TruncatedFile,
            _ => PipelineError::ChecksumMismatch,
        });
    }
    let header: serde_json::Value =
        serde_json::from_slice(header_bytes).map_err(|e| PipelineError::Header(e.to_string()))?;
    Ok((header, blobs))
}

pub fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn read_f64s(blobs: &[u8], entry: &TensorEntry) -> Result<Vec<f64>, PipelineError> {
    let end = entry.offset.checked_add(entry.byte_len()).ok_or(PipelineError::TruncatedFile)?;
    let slice = blobs.get(entry.offset..end).ok_or(PipelineError::TruncatedFile)?;
    Ok(slice.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect())
}
