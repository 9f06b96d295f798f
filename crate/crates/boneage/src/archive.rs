//! Tensor archive: one file holding named `f64` tensors.
//!
//! Layout: an 8-byte little-endian header length `L`, `L` bytes of JSON
//! header, then the tensor payloads as raw little-endian `f64`. Offsets in the
//! header count bytes from the start of the payload section.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use boneage_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub format_version: u32,
    /// What the archive holds, e.g. `checkpoint` or `features`.
    pub kind: String,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_hash: Option<String>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

/// Serializes header and tensors into one byte buffer.
pub fn encode(
    kind: &str,
    config: serde_json::Value,
    schema_hash: Option<String>,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<Vec<u8>> {
    let mut directory = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in tensors {
        directory.insert(
            name.clone(),
            TensorEntry {
                shape: t.shape().to_vec(),
                offset,
            },
        );
        offset += 8 * t.len() as u64;
    }
    let header = ArchiveHeader {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        config,
        schema_hash,
        tensors: directory,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(ArchiveHeader, BTreeMap<String, Tensor>)> {
    let bad = |reason: String| Error::format(path, reason);
    if bytes.len() < 8 {
        return Err(bad("truncated archive header".into()));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(8..8usize.saturating_add(len))
        .ok_or_else(|| bad(format!("header length {} exceeds file size", len)))?;
    let header: ArchiveHeader = serde_json::from_slice(body).map_err(|e| bad(format!("archive header: {}", e)))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format version {} (expected {})",
            header.format_version, FORMAT_VERSION
        )));
    }
    let payload = &bytes[8 + len..];
    let mut tensors = BTreeMap::new();
    let mut covered = 0u64;
    for (name, entry) in &header.tensors {
        let count: usize = entry.shape.iter().product();
        let start = usize::try_from(entry.offset).map_err(|_| bad(format!("offset of `{}` too large", name)))?;
        let end = start
            .checked_add(8 * count)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| bad(format!("tensor `{}` runs past the end of the file", name)))?;
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.insert(name.clone(), Tensor::new(entry.shape.clone(), data)?);
        covered += 8 * count as u64;
    }
    if covered != payload.len() as u64 {
        return Err(bad(format!(
            "payload has {} bytes, directory describes {}",
            payload.len(),
            covered
        )));
    }
    Ok((header, tensors))
}

/// Writes next to `path` first and renames into place, so a crash never
/// leaves a partial file under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::format(path, "not a file path"))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{}.partial", name));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_archive(
    path: &Path,
    kind: &str,
    config: serde_json::Value,
    schema_hash: Option<String>,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    write_atomic(path, &encode(kind, config, schema_hash, tensors)?)
}

pub fn read_archive(path: &Path) -> Result<(ArchiveHeader, BTreeMap<String, Tensor>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_keeps_bits() {
        let mut t = BTreeMap::new();
        t.insert("a".to_string(), Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        t.insert("b".to_string(), Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        let bytes = encode("test", serde_json::json!({"k": 1}), Some("h".into()), &t).unwrap();
        let (header, back) = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(header.tensors["b"].offset, 32);
        for (k, v) in &t {
            let bits: Vec<u64> = v.data().iter().map(|x| x.to_bits()).collect();
            let got: Vec<u64> = back[k].data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits, got);
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut t = BTreeMap::new();
        t.insert("a".to_string(), Tensor::zeros(&[4]));
        let bytes = encode("test", serde_json::Value::Null, None, &t).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }
}
