//! Binary tensor checkpoints.
//!
//! Layout: magic `GEHW\x01`, little-endian `u32` header length, JSON header
//! (`[{name, rows, cols}]`), then every tensor's `f32` values little-endian in
//! header order.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"GEHW\x01";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    rows: usize,
    cols: usize,
}

pub fn write_tensors<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<String> {
    let tensors: Vec<(&str, &Tensor)> = tensors.into_iter().collect();
    let header: Vec<HeaderEntry> = tensors
        .iter()
        .map(|(n, t)| HeaderEntry {
            name: n.to_string(),
            rows: t.rows,
            cols: t.cols,
        })
        .collect();
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(
        MAGIC.len() + 4 + header.len() + 4 * tensors.iter().map(|(_, t)| t.len()).sum::<usize>(),
    );
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in &tensors {
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    file.sync_all().map_err(|e| Error::io(path, e))?;
    Ok(crate::digest_hex(&buf))
}

fn parse(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let corrupt = |msg: &str| Error::config(format!("corrupt checkpoint: {msg}"));
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut pos = MAGIC.len();
    let header_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
    pos += 4;
    let header_bytes = bytes.get(pos..pos + header_len).ok_or_else(|| corrupt("truncated header"))?;
    let header: Vec<HeaderEntry> =
        serde_json::from_slice(header_bytes).map_err(|e| corrupt(&e.to_string()))?;
    pos += header_len;
    let mut out = Vec::with_capacity(header.len());
    for entry in header {
        let n = entry.rows * entry.cols;
        let raw = bytes
            .get(pos..pos + 4 * n)
            .ok_or_else(|| corrupt("truncated tensor data"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += 4 * n;
        out.push(NamedTensor {
            name: entry.name,
            tensor: Tensor::from_vec(entry.rows, entry.cols, data),
        });
    }
    if pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(out)
}

pub fn read_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    read_verified(path, None)
}

/// Read a checkpoint, rejecting it before parsing if `checksum` does not match.
pub(crate) fn read_verified(path: &Path, checksum: Option<&str>) -> Result<Vec<NamedTensor>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if let Some(expected) = checksum {
        let actual = crate::digest_hex(&bytes);
        if !actual.eq_ignore_ascii_case(expected) {
            return Err(Error::config(format!(
                "weight checksum mismatch for {}: expected {expected}, found {actual}",
                path.display()
            )));
        }
    }
    parse(&bytes)
}
