//! `--config` files. Values in the file win over flags; `[pipeline]`,
//! `[synth]` and `[service]` tables are merged key by key over the structs
//! built from flags.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub margin: Option<f64>,
    pub threshold: Option<f64>,
    pub n: Option<usize>,
    pub per_class: Option<usize>,
    /// Percent of sessions (by id hash) used for training.
    pub train_percent: Option<u8>,
    pub data_dir: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub bind: Option<SocketAddr>,
    pub pipeline: Option<toml::Table>,
    pub synth: Option<toml::Table>,
    pub service: Option<toml::Table>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
        let config: Self = toml::from_str(&text).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
        if config.train_percent.is_some_and(|p| !(1..100).contains(&p)) {
            return Err(CliError::user("train_percent must be in 1..=99"));
        }
        Ok(config)
    }

    pub fn train_percent(&self) -> u8 {
        self.train_percent.unwrap_or(80)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// First key of `over` that does not survive in `kept`, i.e. one the target
/// type silently ignored.
fn dropped_key(over: &Value, kept: &Value, path: &str) -> Option<String> {
    let (Value::Object(o), Value::Object(k)) = (over, kept) else {
        return None;
    };
    o.iter().find_map(|(key, v)| match k.get(key) {
        None => Some(format!("{path}{key}")),
        Some(kv) => dropped_key(v, kv, &format!("{path}{key}.")),
    })
}

/// `base` with every key of `table` replaced.
pub fn overlay<T: Serialize + DeserializeOwned>(
    base: &T,
    table: Option<&toml::Table>,
    what: &str,
) -> Result<T, CliError> {
    let Some(table) = table else {
        return serde_json::from_value(serde_json::to_value(base).map_err(CliError::internal)?)
            .map_err(CliError::internal);
    };
    let mut value = serde_json::to_value(base).map_err(CliError::internal)?;
    let over = serde_json::to_value(table).map_err(CliError::internal)?;
    merge(&mut value, over.clone());
    let merged: T = serde_json::from_value(value).map_err(|e| CliError::user(format!("[{what}]: {e}")))?;
    let kept = serde_json::to_value(&merged).map_err(CliError::internal)?;
    if let Some(key) = dropped_key(&over, &kept, "") {
        return Err(CliError::user(format!("[{what}]: unknown key `{key}`")));
    }
    Ok(merged)
}

/// File value if present, else the flag value, else an error naming the
/// flag.
pub fn pick<T>(file: Option<T>, flag: Option<T>, name: &str) -> Result<T, CliError> {
    file.or(flag)
        .ok_or_else(|| CliError::user(format!("--{name} is required")))
}
