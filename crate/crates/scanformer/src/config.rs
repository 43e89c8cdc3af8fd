//! Training configuration from a JSON file with an override object taken
//! from the `RNG_CONFIG` environment variable.

use std::path::Path;

use serde_json::Value;

use scanformer_core::train::TrainConfig;

use crate::error::{IoError, Result};

pub const ENV_OVERRIDE: &str = "RNG_CONFIG";

/// Recursively merges `over` into `base`; objects merge key by key, anything
/// else replaces.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

/// Defaults, then the file (if any), then the override (if any).
pub fn resolve(file: Option<&Path>, env_override: Option<&str>) -> Result<TrainConfig> {
    let mut v = serde_json::to_value(TrainConfig::default())?;
    if let Some(p) = file {
        let text = std::fs::read_to_string(p)?;
        merge(&mut v, serde_json::from_str(&text)?);
    }
    if let Some(text) = env_override.filter(|t| !t.trim().is_empty()) {
        let over: Value = serde_json::from_str(text)?;
        if !over.is_object() {
            return Err(IoError::Usage(format!("{ENV_OVERRIDE} must hold a JSON object")));
        }
        merge(&mut v, over);
    }
    let cfg: TrainConfig = serde_json::from_value(v)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn from_env(file: Option<&Path>) -> Result<TrainConfig> {
    resolve(file, std::env::var(ENV_OVERRIDE).ok().as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn nested_merge() {
        let mut a = json!({"a": 1, "m": {"x": 1, "y": 2}});
        merge(&mut a, json!({"m": {"y": 3, "z": 4}, "b": [1]}));
        assert_eq!(a, json!({"a": 1, "m": {"x": 1, "y": 3, "z": 4}, "b": [1]}));
    }

    #[test]
    fn override_wins_over_defaults() {
        let cfg = resolve(None, Some(r#"{"steps": 40, "warmup": 4, "model": {"layers": 2}}"#)).unwrap();
        assert_eq!((cfg.steps, cfg.warmup, cfg.model.layers), (40, 4, 2));
        assert_eq!(cfg.model.dim, TrainConfig::default().model.dim);
    }

    #[test]
    fn rejects_non_object_and_bad_values() {
        assert!(matches!(resolve(None, Some("[1]")), Err(IoError::Usage(_))));
        assert!(resolve(None, Some(r#"{"warmup": 999999}"#)).is_err());
    }
}
