//! Flat JSON training configuration with `flags > file > defaults`
//! precedence.
//!
//! A config file is one JSON object whose keys are the fields of
//! `TrainConfig`, with the nested preference (`beta_dpo`, `omega`) and total
//! loss (`lambda_energy`) fields lifted to the top level.

use std::path::Path;

use bridgefold::trainer::TrainConfig;
use bridgefold::{Error, Result};
use serde_json::{Map, Value};

const NESTED: [&str; 2] = ["dpo", "total"];

fn flatten(cfg: &TrainConfig) -> Result<Map<String, Value>> {
    let Value::Object(mut top) = serde_json::to_value(cfg)? else {
        unreachable!("TrainConfig serializes to an object");
    };
    for group in NESTED {
        if let Some(Value::Object(inner)) = top.remove(group) {
            top.extend(inner);
        }
    }
    Ok(top)
}

fn unflatten(flat: Map<String, Value>, template: &TrainConfig) -> Result<TrainConfig> {
    let Value::Object(shape) = serde_json::to_value(template)? else {
        unreachable!("TrainConfig serializes to an object");
    };
    let mut out = Map::new();
    for group in NESTED {
        let Some(Value::Object(keys)) = shape.get(group) else {
            continue;
        };
        let inner: Map<String, Value> = keys
            .keys()
            .filter_map(|k| flat.get(k).map(|v| (k.clone(), v.clone())))
            .collect();
        out.insert(group.to_string(), Value::Object(inner));
    }
    for (k, v) in flat {
        if shape.contains_key(&k) {
            out.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(out)).map_err(|e| Error::Config(format!("invalid config value: {e}")))
}

fn merge(flat: &mut Map<String, Value>, source: &str, updates: Map<String, Value>) -> Result<()> {
    for (k, v) in updates {
        if !flat.contains_key(&k) {
            return Err(Error::Config(format!("unknown config key '{k}' in {source}")));
        }
        flat.insert(k, v);
    }
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path)?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Error::Config(format!("{} is not a JSON object", path.display()))),
        Err(e) => Err(Error::Config(format!("{}: {e}", path.display()))),
    }
}

/// Applies the config file, then the command-line overrides, to `defaults`.
pub fn resolve(defaults: TrainConfig, file: Option<&Path>, flags: Map<String, Value>) -> Result<TrainConfig> {
    let mut flat = flatten(&defaults)?;
    if let Some(path) = file {
        merge(&mut flat, &path.display().to_string(), read_file(path)?)?;
    }
    merge(&mut flat, "command-line flags", flags)?;
    let cfg = unflatten(flat, &defaults)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Collects the flags that were actually given.
#[derive(Default)]
pub struct Flags(Map<String, Value>);

impl Flags {
    pub fn set<T: Into<Value>>(mut self, key: &str, value: Option<T>) -> Self {
        if let Some(v) = value {
            self.0.insert(key.to_string(), v.into());
        }
        self
    }

    pub fn into_map(self) -> Map<String, Value> {
        self.0
    }
}
