//! Checkpoint container: `WDCK`, a format version, a JSON metadata block and
//! named tensor blobs.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor_io::TensorBlob;

pub const MAGIC: &[u8; 4] = b"WDCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMeta {
    pub t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `"codec"` or `"diffusion"`.
    pub kind: String,
    pub config_hash: String,
    pub epoch: usize,
    pub step: usize,
    pub latent_scale: f64,
    pub schedule: Option<ScheduleMeta>,
}

/// Writes every parameter whose name starts with one of `prefixes`.
pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, store: &ParamStore, prefixes: &[&str]) -> Result<()> {
    let mut blobs = BTreeMap::new();
    for p in prefixes {
        blobs.extend(store.to_blobs(&format!("{p}."))?);
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(meta).map_err(|e| Error::Format(e.to_string()))?;
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for (name, blob) in &blobs {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        blob.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn truncated(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, std::io::Error::new(std::io::ErrorKind::UnexpectedEof, format!("truncated checkpoint: {e}")))
}

/// Reads a checkpoint without touching any store. A short file is an I/O error.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, BTreeMap<String, TensorBlob>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Cursor::new(bytes);
    let eof = truncated(path);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(&eof)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(&eof)?;
    let version = u32::from_le_bytes(u32b);
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: format!("format {FORMAT_VERSION}"),
            found: format!("format {version}"),
        });
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b).map_err(&eof)?;
    let mut json = vec![0u8; u64::from_le_bytes(u64b) as usize];
    r.read_exact(&mut json).map_err(&eof)?;
    let meta: CheckpointMeta = serde_json::from_slice(&json).map_err(|e| Error::Format(e.to_string()))?;
    r.read_exact(&mut u32b).map_err(&eof)?;
    let n = u32::from_le_bytes(u32b) as usize;
    let mut blobs = BTreeMap::new();
    for _ in 0..n {
        r.read_exact(&mut u32b).map_err(&eof)?;
        let mut name = vec![0u8; u32::from_le_bytes(u32b) as usize];
        r.read_exact(&mut name).map_err(&eof)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let blob = TensorBlob::read_from(&mut r).map_err(|e| match e {
            Error::Format(msg) if msg.starts_with("truncated") => eof(std::io::Error::other(msg)),
            other => other,
        })?;
        blobs.insert(name, blob);
    }
    Ok((meta, blobs))
}

/// Loads parameters into `store`, verifying the config hash when one is expected.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>, store: &ParamStore) -> Result<CheckpointMeta> {
    let (meta, blobs) = read_checkpoint(path)?;
    if let Some(h) = expected_hash {
        if meta.config_hash != h {
            return Err(Error::Version {
                expected: h.to_string(),
                found: meta.config_hash.clone(),
            });
        }
    }
    store.load_blobs(&blobs)?;
    Ok(meta)
}
