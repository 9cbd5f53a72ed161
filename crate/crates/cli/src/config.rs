use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Optional experiment file; each section partially overrides the defaults
/// of one stage.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<Value>,
    pub train: Option<Value>,
    pub head: Option<Value>,
    pub lda: Option<Value>,
    pub steering: Option<Value>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Overlay the keys of `over` on `base`. Unknown keys are an error so
/// typos in experiment files do not pass silently.
pub fn merge<T: Serialize + DeserializeOwned>(base: T, over: Option<&Value>, section: &str) -> Result<T> {
    let Some(over) = over else { return Ok(base) };
    let Value::Object(over) = over else { bail!("config section {section:?} must be an object") };
    let mut merged = serde_json::to_value(base)?;
    for (k, v) in over {
        if merged.get(k).is_none() {
            bail!("unknown key {k:?} in config section {section:?}");
        }
        merged[k] = v.clone();
    }
    serde_json::from_value(merged).with_context(|| format!("config section {section:?}"))
}

/// Set `target` when the flag was given.
pub fn set<T>(target: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *target = v;
    }
}
