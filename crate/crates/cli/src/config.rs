//! Run configuration: defaults, overlaid by an optional JSON file, overlaid by
//! command-line flags. The effective configuration is echoed next to the
//! outputs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

pub const RESOLVED_FILE: &str = "config.resolved.json";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration files or values (exit code 2).
    Usage(String),
    /// A verification did not pass (exit code 1).
    Failed(String),
    /// The run stopped for another reason (exit code 1).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) | CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Failed(m) => write!(f, "verification failed: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<ap3d::Error> for CliError {
    fn from(e: ap3d::Error) -> CliError {
        match e {
            ap3d::Error::Config(_) | ap3d::Error::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parsed `--config` file, or an empty object.
pub fn read_file(path: Option<&Path>) -> CliResult<Value> {
    let Some(path) = path else {
        return Ok(Value::Object(Default::default()));
    };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if !value.is_object() {
        return Err(usage(format!("{}: top level must be a JSON object", path.display())));
    }
    Ok(value)
}

/// Recursively overlays `top` on `base`; objects merge key by key, anything
/// else replaces.
fn merge(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, t) => *b = t.clone(),
    }
}

/// `defaults` overlaid with `file`. Unknown keys are rejected by the target
/// type.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, file: &Value) -> CliResult<T> {
    let mut v = serde_json::to_value(defaults).map_err(|e| CliError::Runtime(e.to_string()))?;
    merge(&mut v, file);
    serde_json::from_value(v).map_err(|e| usage(format!("config: {e}")))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes `<out>/config.resolved.json`.
pub fn write_resolved<T: Serialize>(out: &Path, cfg: &T) -> CliResult<PathBuf> {
    let path = out.join(RESOLVED_FILE);
    write_json(&path, cfg)?;
    Ok(path)
}

/// `4x3x256x128` → `[4, 3, 256, 128]`.
pub fn parse_dims(s: &str) -> CliResult<Vec<usize>> {
    s.split(['x', 'X', ','])
        .map(|d| d.trim().parse::<usize>().map_err(|_| usage(format!("bad dimension '{d}' in '{s}'"))))
        .collect()
}

/// `1,2.5,4` → `[1.0, 2.5, 4.0]`.
pub fn parse_floats(s: &str) -> CliResult<Vec<f64>> {
    s.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| usage(format!("bad number '{v}' in '{s}'")))).collect()
}
