//! Layered configuration: built-in defaults, then a JSON file, then
//! `--set key=value` overrides. Unknown keys are rejected with their path.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// A configuration problem the user has to fix; reported as a usage error.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Overlays `top` onto `base`. Objects merge key by key, except that an
/// object whose `kind` tag differs from the base's replaces it wholesale.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            let retagged = matches!((b.get("kind"), t.get("kind")), (Some(x), Some(y)) if x != y);
            if retagged {
                *b = t;
                return;
            }
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, t) => *slot = t,
    }
}

/// Parses the right-hand side of `--set`: JSON when it parses, else a string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies one `dotted.key=value` override.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError(format!("override key `{key}` is malformed")));
    }
    let mut nested = parse_value(raw.trim());
    for p in parts.iter().rev() {
        let mut m = Map::new();
        m.insert((*p).to_string(), nested);
        nested = Value::Object(m);
    }
    merge(root, nested);
    Ok(())
}

/// Resolves a config of type `T` from its layers.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<&Path>,
    overrides: &[String],
) -> Result<T, ConfigError> {
    let mut value = serde_json::to_value(defaults).map_err(|e| ConfigError(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let layer: Value = serde_json::from_str(&text)
            .map_err(|e| ConfigError(format!("config {} is not valid JSON: {e}", path.display())))?;
        if !layer.is_object() {
            return Err(ConfigError(format!("config {} must be a JSON object", path.display())));
        }
        merge(&mut value, layer);
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        ConfigError(format!("invalid config at `{path}`: {}", e.inner()))
    })
}
