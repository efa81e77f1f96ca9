//! Config files (TOML or JSON) with dotted `key=value` overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde_json::Value;

/// Reads a TOML or JSON document (chosen by extension, TOML otherwise).
pub fn read_document(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        let t: toml::Value = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(serde_json::to_value(t)?)
    }
}

/// Parses an override value: JSON literals (numbers, booleans, arrays,
/// null) are taken as such, anything else as a string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `a.b.c=value`, creating intermediate tables as needed.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| anyhow!("override {spec:?} is not of the form key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("override {spec:?} has an empty key");
    }
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            bail!("override {key:?}: {part:?} is not a table");
        }
        node = node
            .as_object_mut()
            .expect("checked above")
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node.as_object_mut().ok_or_else(|| anyhow!("override {key:?} does not address a table field"))?;
    obj.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Loads `path` (or an empty document), applies overrides and deserialises.
pub fn load<T: DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut doc = match path {
        Some(p) => read_document(p)?,
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    serde_json::from_value(doc).map_err(|e| anyhow!("invalid configuration: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use s4m::model::Ablation;
    use s4m::trainer::TrainConfig;

    #[test]
    fn dotted_overrides_reach_nested_fields() {
        let mut doc = serde_json::json!({"batch_size": 4});
        apply_override(&mut doc, "model.d=32").unwrap();
        apply_override(&mut doc, "ablation=radka_star").unwrap();
        apply_override(&mut doc, "lambda=0.5").unwrap();
        let cfg: TrainConfig = serde_json::from_value(doc).unwrap();
        assert_eq!(cfg.model.d, 32);
        assert_eq!(cfg.ablation, Ablation::RadkaStar);
        assert_eq!(cfg.lambda, 0.5);
        assert_eq!(cfg.batch_size, 4);
    }

    #[test]
    fn malformed_overrides_are_rejected() {
        let mut doc = serde_json::json!({});
        assert!(apply_override(&mut doc, "novalue").is_err());
        assert!(apply_override(&mut doc, "a..b=1").is_err());
        let err = load::<TrainConfig>(None, &["ablation=bogus".to_string()]).unwrap_err();
        assert!(err.to_string().contains("radka_star"), "{err}");
    }

    #[test]
    fn toml_and_json_files_agree() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "batch_size = 8\nseed = 3\n[model]\nd = 16\n").unwrap();
        let j = dir.path().join("c.json");
        std::fs::write(&j, r#"{"batch_size": 8, "seed": 3, "model": {"d": 16}}"#).unwrap();
        let a: TrainConfig = load(Some(&t), &[]).unwrap();
        let b: TrainConfig = load(Some(&j), &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.model.d, 16);
    }
}
