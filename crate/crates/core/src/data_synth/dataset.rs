//! On-disk dataset: `manifest.json` plus `samples/<id>_<field>.bin` blobs.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_synth::{DataConfig, TryOnSample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor_io::TensorBlob;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub seed: u64,
    /// Field name → file name relative to `samples/`.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub root_path: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_config: Option<DataConfig>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "manifest schema {} is not supported (expected {SCHEMA_VERSION})",
                manifest.schema_version
            )));
        }
        let mut seen = HashSet::new();
        for e in &manifest.entries {
            if !seen.insert(e.sample_id.as_str()) {
                return Err(Error::Dataset {
                    sample_id: e.sample_id.clone(),
                    reason: "duplicate sample id".into(),
                });
            }
        }
        Ok(manifest)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

fn is_binary(img: &Image) -> bool {
    img.data.iter().all(|&v| v == 0.0 || v == 1.0)
}

/// Writes `samples` under `root` and returns the manifest that was saved.
pub fn write_dataset(
    samples: &[TryOnSample],
    root: &Path,
    split: Split,
    data_config: Option<&DataConfig>,
) -> Result<DatasetManifest> {
    let dir = root.join("samples");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let id = sample_id(i);
        let mut files = BTreeMap::new();
        for field in TryOnSample::FIELDS {
            let img = s.field(field).expect("known field");
            let name = format!("{id}_{field}.bin");
            let blob = if field.ends_with("mask") && is_binary(img) {
                img.to_mask_blob()
            } else {
                img.to_blob()
            };
            blob.save(&dir.join(&name))?;
            files.insert(field.to_string(), name);
        }
        entries.push(ManifestEntry {
            sample_id: id,
            seed: s.seed,
            files,
        });
    }
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        root_path: root.display().to_string(),
        split,
        data_config: data_config.cloned(),
        entries,
    };
    let path = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads one manifest entry; every failure names the sample.
pub fn read_entry(root: &Path, entry: &ManifestEntry) -> Result<TryOnSample> {
    let fail = |reason: String| Error::Dataset {
        sample_id: entry.sample_id.clone(),
        reason,
    };
    let mut fields: BTreeMap<&str, Image> = BTreeMap::new();
    for field in TryOnSample::FIELDS {
        let name = entry
            .files
            .get(field)
            .ok_or_else(|| fail(format!("missing field {field}")))?;
        let path: PathBuf = root.join("samples").join(name);
        let blob = TensorBlob::load(&path).map_err(|e| fail(e.to_string()))?;
        let img = Image::from_blob(blob).map_err(|e| fail(format!("{field}: {e}")))?;
        fields.insert(field, img);
    }
    let mut take = |k: &str| fields.remove(k).expect("all fields loaded");
    let sample = TryOnSample {
        person: take("person"),
        garment: take("garment"),
        agnostic_image: take("agnostic_image"),
        agnostic_mask: take("agnostic_mask"),
        skin_mask: take("skin_mask"),
        foreground_mask: take("foreground_mask"),
        warped_garment: take("warped_garment"),
        warped_mask: take("warped_mask"),
        seed: entry.seed,
    };
    let (h, w) = (sample.person.height, sample.person.width);
    for field in TryOnSample::FIELDS {
        let img = sample.field(field).expect("known field");
        let want_c = if field.ends_with("mask") { 1 } else { 3 };
        if img.dims() != (h, w, want_c) {
            return Err(fail(format!(
                "{field} has shape {:?}, expected ({h}, {w}, {want_c})",
                img.dims()
            )));
        }
    }
    Ok(sample)
}

/// Lazily reads every sample listed in `root/manifest.json`.
pub fn read_dataset(root: &Path) -> Result<DatasetReader> {
    let manifest = DatasetManifest::load(root)?;
    Ok(DatasetReader {
        root: root.to_path_buf(),
        manifest,
        next: 0,
    })
}

pub struct DatasetReader {
    root: PathBuf,
    pub manifest: DatasetManifest,
    next: usize,
}

impl Iterator for DatasetReader {
    type Item = Result<TryOnSample>;

    fn next(&mut self) -> Option<Self::Item> {
        let entry = self.manifest.entries.get(self.next)?;
        self.next += 1;
        Some(read_entry(&self.root, entry))
    }
}

/// Reads a whole dataset into memory.
pub fn load_all(root: &Path) -> Result<(DatasetManifest, Vec<TryOnSample>)> {
    let reader = read_dataset(root)?;
    let manifest = reader.manifest.clone();
    let samples = reader.collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
