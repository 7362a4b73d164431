//! Layered configuration: built-in defaults, then a TOML file, then
//! `key=value` overrides with dotted keys.

use std::path::{Path, PathBuf};

use posedet::annotation::{IngestConfig, STANDARD_SIZE};
use posedet::postprocess::PostprocessConfig;
use posedet::synth::SceneSpec;
use posedet::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;
pub const CONFIG_DIR_ENV: &str = "POSEDET_CONFIG_DIR";
pub const DEFAULT_CONFIG_NAME: &str = "posedet.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareConfig {
    /// Target `(width, height)` of standardized samples.
    pub size: (u32, u32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub version: u32,
    pub ingest: IngestConfig,
    pub prepare: PrepareConfig,
    pub synth: SceneSpec,
    pub train: TrainConfig,
    pub postprocess: PostprocessConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            version: CONFIG_VERSION,
            ingest: IngestConfig::default(),
            prepare: PrepareConfig { size: STANDARD_SIZE },
            synth: SceneSpec::default(),
            train: TrainConfig::default(),
            postprocess: PostprocessConfig::default(),
        }
    }
}

/// Overlay `src` onto `dst`. Every key in `src` must already exist in `dst`.
fn merge(dst: &mut Table, src: &Table, prefix: &str) -> Result<(), CliError> {
    for (k, v) in src {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (dst.get_mut(k), v) {
            (None, _) => return Err(CliError::Config(format!("unknown key `{path}`"))),
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s, &path)?,
            (Some(slot), _) => *slot = v.clone(),
        }
    }
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Apply one `a.b.c=value` override.
fn apply_override(root: &mut Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let slot = table.get_mut(*part).ok_or_else(|| CliError::Config(format!("unknown key `{key}`")))?;
        if last {
            let v = parse_value(raw.trim());
            // an integer written where a float is expected is still a float
            *slot = match (&*slot, v) {
                (Value::Float(_), Value::Integer(n)) => Value::Float(n as f64),
                (_, v) => v,
            };
            return Ok(());
        }
        table = match slot {
            Value::Table(t) => t,
            _ => return Err(CliError::Config(format!("`{key}`: `{part}` is not a table"))),
        };
    }
    Ok(())
}

/// Config file path: explicit flag, else `$POSEDET_CONFIG_DIR/posedet.toml` if present.
pub fn resolve_path(explicit: Option<&Path>) -> Option<PathBuf> {
    if let Some(p) = explicit {
        return Some(p.to_path_buf());
    }
    let dir = std::env::var_os(CONFIG_DIR_ENV)?;
    let p = Path::new(&dir).join(DEFAULT_CONFIG_NAME);
    p.exists().then_some(p)
}

pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Config, CliError> {
    let defaults = toml::to_string(&Config::default()).map_err(|e| CliError::Config(e.to_string()))?;
    let mut root: Table = defaults.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let table: Table =
            text.parse().map_err(|e: toml::de::Error| CliError::Config(format!("{}: {e}", path.display())))?;
        merge(&mut root, &table, "")?;
    }
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let cfg: Config = Value::Table(root).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    if cfg.version != CONFIG_VERSION {
        return Err(CliError::Config(format!("unsupported config version {}", cfg.version)));
    }
    Ok(cfg)
}

/// The fully resolved configuration as TOML.
pub fn to_toml(cfg: &Config) -> String {
    toml::to_string(cfg).expect("config serializes")
}
