//! Run configuration: one TOML file with a section per module, dotted-path
//! command-line overrides, and a resolved echo written into every run
//! directory so any run can be reproduced from its artifacts alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use flowe_core::augment::AugmentConfig;
use flowe_core::readout::ReadoutConfig;
use flowe_core::synthvid::SceneSpec;
use flowe_core::trainer::TrainConfig;

use crate::CliError;

/// Numeric precision of all tensors in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum Precision {
    F32,
    F64,
}

impl TryFrom<i64> for Precision {
    type Error = String;
    fn try_from(v: i64) -> Result<Self, String> {
        match v {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(format!("precision must be 32 or 64, got {other}")),
        }
    }
}

impl From<Precision> for i64 {
    fn from(p: Precision) -> i64 {
        match p {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

/// Synthetic dataset extent; the scene content itself lives in `[synthvid]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub episodes: usize,
    pub frames_per_episode: usize,
    pub frame_gap: u64,
    /// Dataset directory; defaults to `<out_dir>/dataset` when omitted.
    pub dir: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { episodes: 8, frames_per_episode: 8, frame_gap: 1, dir: None }
    }
}

/// The complete run configuration. The global `seed` drives training,
/// dataset generation, and readout; `trainer.seed`, `readout.seed`, and
/// `trainer.augment` are filled from the top level and may appear in a
/// file only with matching values (the resolved echo round-trips).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub precision: Precision,
    pub dataset: DatasetConfig,
    pub augment: AugmentConfig,
    pub trainer: TrainConfig,
    pub synthvid: SceneSpec,
    pub readout: ReadoutConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/flowe"),
            precision: Precision::F64,
            dataset: DatasetConfig::default(),
            augment: AugmentConfig::default(),
            trainer: TrainConfig::default(),
            synthvid: SceneSpec::default(),
            readout: ReadoutConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Parse an override value as TOML (so numbers, booleans, and arrays work),
/// falling back to a plain string.
fn parse_override_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v exists"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Set `dotted.path = value` inside the table, creating intermediate
/// tables. Overriding through a non-table is a config error.
fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override key '{key}'")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                config_err(format!("override '{key}' descends into non-table '{part}'"))
            })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_override_value(raw));
    Ok(())
}

fn has_key(table: &toml::Table, section: &str, key: &str) -> bool {
    table
        .get(section)
        .and_then(|v| v.as_table())
        .map(|t| t.contains_key(key))
        .unwrap_or(false)
}

/// Load the configuration: file (optional) -> dotted overrides -> `--set`
/// overrides -> `--out-dir`. Derived fields are injected afterwards and
/// validated for consistency when given explicitly.
pub fn load_config(
    file: Option<&Path>,
    overrides: &[(String, String)],
    out_dir_flag: Option<&Path>,
) -> Result<RunConfig, CliError> {
    let mut table: toml::Table = match file {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
            text.parse()
                .map_err(|e| config_err(format!("config {}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for (key, value) in overrides {
        apply_override(&mut table, key, value)?;
    }

    let explicit_trainer_seed = has_key(&table, "trainer", "seed");
    let explicit_trainer_augment = has_key(&table, "trainer", "augment");
    let explicit_readout_seed = has_key(&table, "readout", "seed");

    let mut cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| config_err(format!("config: {e}")))?;

    if let Some(dir) = out_dir_flag {
        cfg.out_dir = dir.to_path_buf();
    }

    // The global seed and the [augment] section are authoritative; nested
    // copies may only restate them (as the resolved echo does).
    if explicit_trainer_seed && cfg.trainer.seed != cfg.seed {
        return Err(config_err(format!(
            "trainer.seed ({}) is derived from the global seed ({}); remove it or make them equal",
            cfg.trainer.seed, cfg.seed
        )));
    }
    if explicit_readout_seed && cfg.readout.seed != cfg.seed {
        return Err(config_err(format!(
            "readout.seed ({}) is derived from the global seed ({}); remove it or make them equal",
            cfg.readout.seed, cfg.seed
        )));
    }
    if explicit_trainer_augment && cfg.trainer.augment != cfg.augment {
        return Err(config_err(
            "trainer.augment is derived from the [augment] section; remove it or make them equal",
        ));
    }
    cfg.trainer.seed = cfg.seed;
    cfg.readout.seed = cfg.seed;
    cfg.trainer.augment = cfg.augment.clone();
    if cfg.dataset.dir.is_none() {
        cfg.dataset.dir = Some(cfg.out_dir.join("dataset"));
    }

    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.trainer.validate().map_err(CliError::from)?;
    cfg.synthvid.validate().map_err(CliError::from)?;
    cfg.readout.validate().map_err(CliError::from)?;
    if cfg.dataset.episodes == 0 {
        return Err(config_err("dataset.episodes must be at least 1"));
    }
    if cfg.dataset.frame_gap == 0 {
        return Err(config_err("dataset.frame_gap must be at least 1"));
    }
    if cfg.dataset.frames_per_episode as u64 <= cfg.dataset.frame_gap {
        return Err(config_err(format!(
            "dataset.frames_per_episode ({}) must exceed dataset.frame_gap ({})",
            cfg.dataset.frames_per_episode, cfg.dataset.frame_gap
        )));
    }
    Ok(())
}

/// The dataset directory (always set after [`load_config`]).
pub fn dataset_dir(cfg: &RunConfig) -> &Path {
    cfg.dataset.dir.as_deref().expect("resolved by load_config")
}

/// Write the fully resolved configuration into a run directory. The file
/// loads back into the identical configuration.
pub fn echo_config(cfg: &RunConfig, run_dir: &Path) -> Result<PathBuf, CliError> {
    fs::create_dir_all(run_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", run_dir.display())))?;
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| CliError::Runtime(format!("serialize config: {e}")))?;
    let path = run_dir.join("config-resolved.toml");
    fs::write(&path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}
