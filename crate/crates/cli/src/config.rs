//! Config loading, flag overrides, output files and the exit-code contract.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Bad flags, bad config or missing inputs; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Turns a core error raised while validating a config into a usage error.
pub fn invalid(err: villani_core::Error) -> anyhow::Error {
    usage(err.to_string())
}

/// Reads a JSON config, or returns the defaults when no file is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

/// Applies a flag value over a config value.
pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

pub fn require_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(usage(format!("{name} must be positive, got {v}")))
    }
}

pub fn require_nonnegative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(usage(format!("{name} must be nonnegative, got {v}")))
    }
}

/// Prints the resolved config as the first line of a command's report.
pub fn echo<T: Serialize>(cfg: &T) -> Result<()> {
    println!("config {}", serde_json::to_string(cfg)?);
    Ok(())
}

/// Directory receiving a command's artifacts; `None` writes nothing.
pub struct OutDir(Option<PathBuf>);

impl OutDir {
    pub fn create(path: Option<&Path>) -> Result<Self> {
        if let Some(p) = path {
            fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
        }
        Ok(Self(path.map(Path::to_path_buf)))
    }

    pub fn path(&self, name: &str) -> Option<PathBuf> {
        self.0.as_ref().map(|d| d.join(name))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        if let Some(p) = self.path(name) {
            write_json(&p, value)?;
        }
        Ok(())
    }

    pub fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        if let Some(p) = self.path(name) {
            write_csv(&p, rows)?;
        }
        Ok(())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
