use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::CliError;

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    config: &'a C,
    outputs: &'a [String],
}

/// Reads a command config from JSON. A manifest written by an earlier run is
/// accepted too; its `config` block is used.
pub fn load_config<C: DeserializeOwned>(path: &Path) -> Result<C, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if value.get("command").is_some() {
        if let Some(inner) = value.get_mut("config").map(Value::take) {
            value = inner;
        }
    }
    serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn write_manifest<C: Serialize>(path: &Path, command: &str, config: &C, outputs: &[String]) -> Result<(), CliError> {
    let m = Manifest { command, version: env!("CARGO_PKG_VERSION"), config, outputs };
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n";
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// `.pgrid` files under `path` in name order, or `path` itself if it is a file.
pub fn list_grids(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = fs::read_dir(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| CliError::io(path, e))?.path();
        if p.extension().is_some_and(|x| x == "pgrid") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// File name up to the first dot: `ev0003.down.pgrid` → `ev0003`.
pub fn event_key(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.split('.').next().unwrap_or_default().to_string()
}
