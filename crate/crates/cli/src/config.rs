//! Layered configuration: defaults, then a JSON file, then `--key value` flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Flag overrides collected from the command line, keyed like the config.
#[derive(Default)]
pub struct Overrides(Vec<(&'static str, Value)>);

impl Overrides {
    pub fn set<T: Serialize>(&mut self, key: &'static str, v: Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((key, serde_json::to_value(v).expect("flag value serializes")));
        }
        self
    }
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| editctrl::Error::Config(format!("{}: {e}", path.display())).into())
}

/// Resolves a strict config. Unknown keys in the file survive the merge and are
/// rejected by the final deserialization, before any compute starts.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<&Path>, flags: &Overrides) -> Result<T> {
    let mut obj = match serde_json::to_value(defaults).expect("defaults serialize") {
        Value::Object(m) => m,
        _ => unreachable!("configs are structs"),
    };
    if let Some(path) = file {
        match read_json(path)? {
            Value::Object(m) => merge(&mut obj, m),
            _ => bail!(editctrl::Error::Config(format!("{}: config must be a JSON object", path.display()))),
        }
    }
    for (k, v) in &flags.0 {
        obj.insert((*k).to_string(), v.clone());
    }
    serde_json::from_value(Value::Object(obj)).map_err(|e| editctrl::Error::Config(e.to_string()).into())
}

fn merge(dst: &mut Map<String, Value>, src: Map<String, Value>) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(Value::Object(d)), Value::Object(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}
