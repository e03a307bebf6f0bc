//! The run configuration: one TOML file with a section per stage.
//!
//! Every key has a default, so an empty file is a valid config. Overrides
//! use dotted paths (`diffusion.window=4`) and are parsed as TOML values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::codec::CodecConfig;
use crate::data_synth::DataConfig;
use crate::diffusion::{DiffusionConfig, SampleConfig};
use crate::error::{Error, Result};
use crate::evaluation::BenchCase;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// Training samples.
    pub count: usize,
    pub test_count: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub synth: DataConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            count: 2000,
            test_count: 100,
            seed: 0,
            synth: DataConfig::default(),
        }
    }
}

impl DataSection {
    /// Generator seed of sample `index` in the given split.
    pub fn sample_seed(&self, test: bool, index: usize) -> u64 {
        rng::derive_seed(self.seed, &[test as u64, index as u64])
    }
}

pub const METRICS: [&str; 4] = ["ssim", "toy_fid", "masked_l1", "mask_iou"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub metrics: Vec<String>,
    /// Held-out samples used by `sample`, `eval` and `viz-mask`.
    pub n_samples: usize,
    pub mask_threshold: f32,
    pub bench_grid: Vec<BenchCase>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            metrics: METRICS.iter().map(|s| s.to_string()).collect(),
            n_samples: 100,
            mask_threshold: 0.5,
            bench_grid: crate::evaluation::default_bench_grid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsSection {
    pub run_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataSection,
    pub codec: CodecConfig,
    pub diffusion: DiffusionConfig,
    pub sample: SampleConfig,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

fn cfg_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses a single override value; bare words fall back to strings.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(root: &mut Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override {spec:?} has an empty key")));
    }
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        let entry = table.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{path}: {k} is not a section")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Keys in `given` that the resolved config does not know about.
fn unknown_keys(given: &Table, resolved: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let name = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, resolved.get(k)) {
            (_, None) => out.push(name),
            (Value::Table(g), Some(Value::Table(r))) => unknown_keys(g, r, &name, out),
            _ => {}
        }
    }
}

fn digest(v: &impl Serialize) -> Result<String> {
    let text = toml::to_string(v).map_err(cfg_err)?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

impl RunConfig {
    pub fn from_table(table: Table) -> Result<Self> {
        let cfg: RunConfig = Value::Table(table.clone()).try_into().map_err(cfg_err)?;
        let resolved = cfg.to_table()?;
        let mut unknown = Vec::new();
        unknown_keys(&table, &resolved, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (when given), applies overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<Table>().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn to_table(&self) -> Result<Table> {
        match Value::try_from(self).map_err(cfg_err)? {
            Value::Table(t) => Ok(t),
            _ => unreachable!("config serializes to a table"),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(cfg_err)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.synth.validate()?;
        if self.data.count == 0 || self.data.test_count == 0 {
            return Err(Error::Config("data.count and data.test_count must be positive".into()));
        }
        if self.codec.steps == 0 || self.codec.batch == 0 || !(self.codec.lr > 0.0) {
            return Err(Error::Config("codec.steps, codec.batch and codec.lr must be positive".into()));
        }
        if self.codec.widths.contains(&0) {
            return Err(Error::Config("codec.widths must be positive".into()));
        }
        self.diffusion.validate()?;
        self.sample.validate(self.diffusion.t_steps)?;
        if self.eval.n_samples == 0 || self.eval.n_samples > self.data.test_count {
            return Err(Error::Config(format!(
                "eval.n_samples must lie in [1, data.test_count = {}]",
                self.data.test_count
            )));
        }
        if let Some(m) = self.eval.metrics.iter().find(|m| !METRICS.contains(&m.as_str())) {
            return Err(Error::Config(format!("unknown metric {m:?}; known: {}", METRICS.join(", "))));
        }
        if !(0.0..=1.0).contains(&self.eval.mask_threshold) {
            return Err(Error::Config("eval.mask_threshold must lie in [0, 1]".into()));
        }
        if self.eval.bench_grid.iter().any(|c| c.hl == 0 || c.wl == 0 || c.c == 0 || c.w == Some(0)) {
            return Err(Error::Config("bench grid entries must be positive".into()));
        }
        Ok(())
    }

    fn section_hash(&self, sections: &[&str]) -> Result<String> {
        let mut t = self.to_table()?;
        t.retain(|k, _| sections.contains(&k));
        digest(&t)
    }

    /// Hash of everything except `paths`.
    pub fn hash(&self) -> Result<String> {
        self.section_hash(&["data", "codec", "diffusion", "sample", "eval"])
    }

    /// Hash of the settings a codec checkpoint depends on.
    pub fn codec_hash(&self) -> Result<String> {
        self.section_hash(&["data", "codec"])
    }

    /// Hash of the settings a diffusion checkpoint depends on.
    pub fn model_hash(&self) -> Result<String> {
        self.section_hash(&["data", "codec", "diffusion"])
    }
}
