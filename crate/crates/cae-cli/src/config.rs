//! Flat `key = value` config files. Flags beat config values, config values
//! beat defaults, and unknown keys are refused rather than silently ignored.

use std::collections::HashMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use cae_core::{CaeError, Result};

const KNOWN_KEYS: &[&str] = &[
    "data",
    "labels-col",
    "idx-images",
    "idx-labels",
    "normalize",
    "split-train",
    "split-val",
    "split-test",
    "split-seed",
    "k",
    "seed",
    "out",
    "model",
    "decoder",
    "mode",
    "methods",
    "top",
    "epochs",
    "max-epochs",
    "t0",
    "tb",
    "stop-threshold",
    "lr",
    "batch-size",
];

/// Parsed config file contents; empty when no file was given.
pub struct Config {
    values: HashMap<String, String>,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config> {
        let mut values = HashMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| CaeError::io(path, e))?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    CaeError::Parse(format!(
                        "{}: line {}: expected key = value",
                        path.display(),
                        i + 1
                    ))
                })?;
                let key = key.trim();
                if !KNOWN_KEYS.contains(&key) {
                    return Err(CaeError::Parse(format!(
                        "{}: line {}: unknown key '{}'",
                        path.display(),
                        i + 1,
                        key
                    )));
                }
                values.insert(key.to_string(), value.trim().to_string());
            }
        }
        Ok(Config { values })
    }

    /// The flag value if given, else the parsed config value, else None.
    pub fn resolve<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            Some(s) => s.parse().map(Some).map_err(|e| {
                CaeError::Parse(format!(
                    "config key '{}': invalid value '{}': {}",
                    key, s, e
                ))
            }),
            None => Ok(None),
        }
    }
}
