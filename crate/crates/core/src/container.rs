//! Binary container shared by scene files and checkpoints: a little-endian
//! `u32` manifest length, a JSON manifest, then raw little-endian tensors.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) fn write<M: Serialize>(path: &Path, manifest: &M, payload: &[u8]) -> Result<()> {
    let json = serde_json::to_vec(manifest).map_err(|e| Error::MalformedManifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut bytes = Vec::with_capacity(4 + json.len() + payload.len());
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(payload);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Returns the parsed manifest and the payload bytes that follow it.
pub(crate) fn read<M: DeserializeOwned>(path: &Path) -> Result<(M, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: String| Error::MalformedManifest {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 4 {
        return Err(malformed("file shorter than the manifest length prefix".into()));
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    if bytes.len() - 4 < len {
        return Err(malformed(format!(
            "manifest length {len} exceeds file size {}",
            bytes.len()
        )));
    }
    let manifest = serde_json::from_slice(&bytes[4..4 + len]).map_err(|e| malformed(e.to_string()))?;
    Ok((manifest, bytes[4 + len..].to_vec()))
}

pub(crate) fn push_f32(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Splits consecutive fields off a payload, reporting truncation against the
/// total size the manifest implies.
pub(crate) struct PayloadReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
    expected: usize,
}

impl<'a> PayloadReader<'a> {
    pub(crate) fn new(path: &'a Path, bytes: &'a [u8], expected: usize) -> Result<Self> {
        if bytes.len() < expected {
            return Err(Error::TruncatedPayload {
                path: path.to_path_buf(),
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::CorruptPayload {
                path: path.to_path_buf(),
                reason: format!("{} trailing bytes after {expected}", bytes.len() - expected),
            });
        }
        Ok(PayloadReader {
            path,
            bytes,
            pos: 0,
            expected,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::TruncatedPayload {
                path: self.path.to_path_buf(),
                expected: self.expected,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn u8s(&mut self, n: usize) -> Result<Vec<u8>> {
        Ok(self.take(n)?.to_vec())
    }
}
