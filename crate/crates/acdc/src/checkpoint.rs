//! Flat checkpoint container for trained models.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! bytes 0..8    magic "ACDCCKPT"
//! bytes 8..12   u32 format version (currently 1)
//! bytes 12..20  u64 header length in bytes
//! ...           JSON header
//! ...           payload: for each header entry, in order, its values as
//!               little-endian f64
//! ```
//!
//! The header records the model configuration, sharing scheme, training
//! precision, drop rate, and one entry per tensor: parameter path, kind
//! (`param` or `buffer`), and shape. Values are always stored as f64, so a
//! save/load/save cycle is byte-identical in either precision.

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::scalar::{Precision, Scalar};
use crate::sharing::SharingScheme;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"ACDCCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum EntryKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    path: String,
    kind: EntryKind,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    library: String,
    model: ModelConfig,
    scheme: SharingScheme,
    precision: Precision,
    drop_rate: f64,
    entries: Vec<Entry>,
}

/// Serializes parameters (in registration order) followed by running-stat
/// buffers.
pub fn save_model<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for id in model.store.ids() {
        let t = model.store.get(id);
        entries.push(Entry {
            path: model.store.name(id).to_string(),
            kind: EntryKind::Param,
            shape: t.shape().to_vec(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_f64().to_le_bytes());
        }
    }
    for (name, data) in model.buffers() {
        entries.push(Entry {
            path: name,
            kind: EntryKind::Buffer,
            shape: vec![data.len()],
        });
        for v in data {
            payload.extend_from_slice(&v.to_f64().to_le_bytes());
        }
    }
    let header = Header {
        library: crate::VERSION.to_string(),
        model: model.config.clone(),
        scheme: model.scheme.clone(),
        precision: T::PRECISION,
        drop_rate: model.drop_rate,
        entries,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::io(format!("checkpoint header encode: {e}")))?;

    let mut bytes = Vec::with_capacity(20 + header_json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Precision the checkpoint was trained in, without loading the tensors.
pub fn stored_precision(path: &Path) -> Result<Precision> {
    let (header, _) = read_header(path)?;
    Ok(header.precision)
}

fn read_header(path: &Path) -> Result<(Header, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let fail = |msg: String| Error::io(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 {
        return Err(fail("file too short for checkpoint header".into()));
    }
    if &bytes[0..8] != MAGIC {
        return Err(fail(format!(
            "bad magic {:?} (expected {:?})",
            &bytes[0..8],
            MAGIC
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(fail(format!(
            "unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let payload_start = 20 + header_len;
    if bytes.len() < payload_start {
        return Err(fail(format!(
            "header claims {header_len} bytes but file ends at {}",
            bytes.len()
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[20..payload_start])
        .map_err(|e| fail(format!("header decode: {e}")))?;
    Ok((header, bytes[payload_start..].to_vec()))
}

/// Rebuilds the model from the stored configuration and restores every
/// tensor. Values are cast to `T`; the stored precision is metadata only.
pub fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let (header, payload) = read_header(path)?;
    let mut model = build_model::<T>(&header.model, header.scheme, 0)?;
    model.drop_rate = header.drop_rate;

    let mut offset = 0usize;
    for entry in &header.entries {
        let numel: usize = entry.shape.iter().product();
        let end = offset + numel * 8;
        if end > payload.len() {
            return Err(Error::io(format!(
                "{}: payload truncated at tensor `{}`",
                path.display(),
                entry.path
            )));
        }
        let values: Vec<T> = payload[offset..end]
            .chunks_exact(8)
            .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        offset = end;
        match entry.kind {
            EntryKind::Param => {
                let id = model.store.find(&entry.path).ok_or_else(|| {
                    Error::config(format!(
                        "checkpoint parameter `{}` does not exist in the rebuilt model",
                        entry.path
                    ))
                })?;
                let t = model.store.get_mut(id);
                if t.shape() != entry.shape.as_slice() {
                    return Err(Error::config(format!(
                        "checkpoint parameter `{}` has shape {:?}, model expects {:?}",
                        entry.path,
                        entry.shape,
                        t.shape()
                    )));
                }
                t.data_mut().copy_from_slice(&values);
            }
            EntryKind::Buffer => model.set_buffer(&entry.path, values)?,
        }
    }
    if offset != payload.len() {
        return Err(Error::io(format!(
            "{}: {} trailing payload bytes",
            path.display(),
            payload.len() - offset
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::preset;
    use crate::sharing::{SchemeKind, SharingScheme};

    fn toy_scheme() -> SharingScheme {
        SharingScheme {
            kind: SchemeKind::Net,
            m: 4,
            s: None,
        }
    }

    #[test]
    fn round_trip_restores_every_value() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let config = preset("toy-4layer").unwrap();
        let mut model = build_model::<f64>(&config, toy_scheme(), 7).unwrap();
        model.drop_rate = 0.25;
        save_model(&model, &path).unwrap();

        let loaded = load_model::<f64>(&path).unwrap();
        assert_eq!(loaded.drop_rate, 0.25);
        for id in model.store.ids() {
            let a = model.store.get(id);
            let b = loaded.store.get(id);
            assert_eq!(model.store.name(id), loaded.store.name(id));
            assert_eq!(a.shape(), b.shape());
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(model.buffers(), loaded.buffers());
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let config = preset("toy-4layer").unwrap();
        let model = build_model::<f64>(&config, toy_scheme(), 3).unwrap();
        save_model(&model, &p1).unwrap();
        let loaded = load_model::<f64>(&p1).unwrap();
        save_model(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn f32_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let config = preset("toy-4layer").unwrap();
        let model = build_model::<f32>(&config, toy_scheme(), 3).unwrap();
        save_model(&model, &p1).unwrap();
        assert_eq!(stored_precision(&p1).unwrap(), Precision::F32);
        let loaded = load_model::<f32>(&p1).unwrap();
        save_model(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxxxxxx").unwrap();
        let err = load_model::<f64>(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let config = preset("toy-4layer").unwrap();
        let model = build_model::<f64>(&config, toy_scheme(), 3).unwrap();
        save_model(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = load_model::<f64>(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn future_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let config = preset("toy-4layer").unwrap();
        let model = build_model::<f64>(&config, toy_scheme(), 3).unwrap();
        save_model(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let err = load_model::<f64>(&path).unwrap_err();
        assert!(err.to_string().contains("version 99"), "{err}");
    }
}
