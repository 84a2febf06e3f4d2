//! Run configuration: one TOML file with `[model]`, `[train]`, `[data]`,
//! `[profile]` and `[spectrum]` tables, plus dotted command-line overrides.

use std::path::{Path, PathBuf};

use fadpnet_core::net::ModelConfig;
use fadpnet_core::optim::Schedule;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::spectrum::BandSpec;

/// Environment variable that overrides `data.root`.
pub const DATA_ROOT_ENV: &str = "FADPNET_DATA_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub batch: usize,
    pub epochs: usize,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<u64>,
    pub schedule: Schedule,
    pub seed: u64,
    /// Informational; every kernel runs on the CPU.
    pub device: String,
    /// Steps between checkpoints (0 disables periodic checkpoints).
    pub checkpoint_every: u64,
    /// Steps between validation passes (0 disables them).
    pub eval_every: u64,
    pub augment: bool,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            betas: [0.9, 0.99],
            batch: 16,
            epochs: 150,
            max_steps: None,
            schedule: Schedule::Constant,
            seed: 0,
            device: "cpu".into(),
            checkpoint_every: 1000,
            eval_every: 1000,
            augment: true,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(HarnessError::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(HarnessError::Config("train.batch must be at least 1".into()));
        }
        for b in self.betas {
            if !(0.0..1.0).contains(&b) {
                return Err(HarnessError::Config(format!("train.betas entries must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory that relative manifest paths and image paths resolve against.
    pub root: PathBuf,
    pub manifest: PathBuf,
    /// High-resolution side length.
    pub size: usize,
    /// Degradation factor.
    pub scale: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { root: PathBuf::from("."), manifest: PathBuf::from("manifest.csv"), size: 128, scale: 8 }
    }
}

impl DataConfig {
    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(&self.manifest)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub runs: usize,
    pub size: usize,
    pub batch: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self { runs: 10, size: 128, batch: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumConfig {
    pub bands: BandSpec,
    /// U-shape level (1 = full resolution) whose branch outputs are analyzed.
    pub level: usize,
    pub split: String,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self { bands: BandSpec::default(), level: 1, split: "test".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub profile: ProfileConfig,
    pub spectrum: SpectrumConfig,
}

impl Config {
    /// Reads `path`, applies `key.path=value` overrides, then the data-root
    /// environment variable, and validates the result.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, overrides)?;
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV) {
            cfg.data.root = PathBuf::from(root);
        }
        Ok(cfg)
    }

    /// Parses TOML text and applies overrides; no environment lookup.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| HarnessError::Config(format!("malformed config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e| HarnessError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.train.validate()?;
        self.spectrum.bands.validate()?;
        let (size, scale) = (self.data.size, self.data.scale);
        if scale == 0 || size % scale != 0 {
            return Err(HarnessError::Config(format!("data.size {size} must be a multiple of data.scale {scale}")));
        }
        if size % self.model.size_multiple() != 0 {
            return Err(HarnessError::Config(format!(
                "data.size {size} must be a multiple of {}",
                self.model.size_multiple()
            )));
        }
        if self.profile.runs == 0 {
            return Err(HarnessError::Config("profile.runs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML literal
/// when it parses as one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override `{spec}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::Config(format!("override key `{key}` has an empty segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, path) = parts.split_last().expect("non-empty key");
    let mut cur = table;
    for p in path {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
