//! Binary containers shared by checkpoints, embedding records and datasets.
//!
//! Layout: 4 magic bytes, `u32` version, `u64` header length, UTF-8 JSON
//! header, then little-endian `f32` payloads. JSON objects serialize with
//! sorted keys, so rewriting an unmodified container is byte-identical.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DLCK";
pub const EMBEDDING_MAGIC: [u8; 4] = *b"DLEM";
pub const CONTAINER_VERSION: u32 = 1;

/// Hex SHA-256 of a value's JSON serialization.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

pub(crate) fn push_f32s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub(crate) fn read_f32s(bytes: &[u8], offset: u64, count: usize) -> Result<Vec<f64>> {
    let need = count * 4;
    if bytes.len() < need {
        return Err(Error::format(
            offset + bytes.len() as u64,
            format!("payload truncated: need {need} bytes, have {}", bytes.len()),
        ));
    }
    Ok(bytes[..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Writes magic, version, and the length-prefixed JSON header.
pub(crate) fn frame_header(magic: [u8; 4], header: &serde_json::Value) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out
}

/// Parses the framing; returns the header and the byte offset of the payload.
pub(crate) fn parse_header(bytes: &[u8], magic: [u8; 4]) -> Result<(serde_json::Value, usize)> {
    if bytes.len() < 16 {
        return Err(Error::format(bytes.len() as u64, "file shorter than the fixed header"));
    }
    if bytes[..4] != magic {
        return Err(Error::format(
            0,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(&magic)
            ),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported version {version}, expected {CONTAINER_VERSION}"),
        ));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(16, format!("header length {len} exceeds file size")))?;
    let header: serde_json::Value = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| Error::format(16, format!("header is not valid JSON: {e}")))?;
    Ok((header, end))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

/// Named tensors plus a JSON metadata block (config, shapes, statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Mat)>,
}

impl TensorFile {
    pub fn tensor(&self, name: &str) -> Result<&Mat> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::format(0, format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let index: Vec<TensorEntry> = self
            .tensors
            .iter()
            .map(|(name, m)| TensorEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect();
        let header = serde_json::json!({
            "version": CONTAINER_VERSION,
            "kind": self.kind,
            "meta": self.meta,
            "tensors": index,
        });
        let mut out = frame_header(CHECKPOINT_MAGIC, &header);
        for (_, m) in &self.tensors {
            push_f32s(&mut out, m.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, mut pos) = parse_header(bytes, CHECKPOINT_MAGIC)?;
        let kind = header["kind"]
            .as_str()
            .ok_or_else(|| Error::format(16, "header lacks `kind`"))?
            .to_string();
        let index: Vec<TensorEntry> = serde_json::from_value(header["tensors"].clone())
            .map_err(|e| Error::format(16, format!("bad tensor index: {e}")))?;
        let mut tensors = Vec::with_capacity(index.len());
        for entry in index {
            let n = entry.rows * entry.cols;
            let data = read_f32s(&bytes[pos..], pos as u64, n)?;
            pos += n * 4;
            tensors.push((entry.name, Mat::from_vec(entry.rows, entry.cols, data)));
        }
        if pos != bytes.len() {
            return Err(Error::format(
                pos as u64,
                format!("{} trailing bytes after payload", bytes.len() - pos),
            ));
        }
        Ok(TensorFile {
            kind,
            meta: header["meta"].clone(),
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        TensorFile::from_bytes(&read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorFile {
        TensorFile {
            kind: "test".into(),
            meta: serde_json::json!({"b": 0.1, "a": [1, 2, 3]}),
            tensors: vec![
                ("w".into(), Mat::from_vec(2, 2, vec![1.0, -0.5, 0.25, 3.0])),
                ("b".into(), Mat::from_vec(1, 3, vec![0.1f32 as f64, 0.0, 7.0])),
            ],
        }
    }

    #[test]
    fn tensor_file_round_trips_byte_identically() {
        let f = sample();
        let bytes = f.to_bytes();
        let back = TensorFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_and_bad_magic_are_format_errors() {
        let bytes = sample().to_bytes();
        let err = TensorFile::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            TensorFile::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut wrong_version = bytes;
        wrong_version[4] = 9;
        assert!(matches!(
            TensorFile::from_bytes(&wrong_version),
            Err(Error::Format { offset: 4, .. })
        ));
    }
}
