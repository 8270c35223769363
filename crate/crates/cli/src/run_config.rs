//! Resolved run settings: defaults, then a config file, then flags.
//!
//! Every command writes the settings it actually ran with next to its
//! outputs. Passing that snapshot back through `--config` repeats the run.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Relative output paths are placed under this directory when it is set.
pub const OUT_DIR_ENV: &str = "QPART_OUT_DIR";

/// A problem with the invocation rather than with the run itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Serialize, Deserialize)]
struct Snapshot<T> {
    command: String,
    config: T,
}

/// Loads the `config` section of a snapshot written by `command`.
pub fn load<T: DeserializeOwned>(path: &Path, command: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    let snap: Snapshot<T> = serde_json::from_str(&text)
        .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    if snap.command != command {
        bail!(usage(format!(
            "config {} was written by `{}`, not `{command}`",
            path.display(),
            snap.command
        )));
    }
    Ok(snap.config)
}

/// Writes the resolved settings to `path`.
pub fn save<T: Serialize>(path: &Path, command: &str, config: &T) -> Result<()> {
    let snap = Snapshot {
        command: command.to_string(),
        config,
    };
    let text = serde_json::to_string_pretty(&snap)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Snapshot location for a file output: `preds.csv` → `preds.config.json`.
pub fn snapshot_for_file(out: &Path) -> PathBuf {
    out.with_extension("config.json")
}

/// Snapshot location for a directory output.
pub fn snapshot_for_dir(out: &Path) -> PathBuf {
    out.join("run_config.json")
}

/// Applies the output-directory override to a relative path.
pub fn output_path(path: PathBuf) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if path.is_relative() => PathBuf::from(dir).join(path),
        _ => path,
    }
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

pub fn existing(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

pub fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| usage(format!("{flag} is required")))
}
