//! Flat key=value config files. Keys mirror the long flag names with
//! underscores; explicit flags override file values; unknown keys are
//! validation errors so typos do not silently fall back to defaults.

use std::collections::{HashMap, HashSet};

use epban_core::error::Error as CoreError;

use crate::Common;

pub struct Effective {
    values: HashMap<String, String>,
    used: HashSet<String>,
    path: String,
}

impl Effective {
    pub fn load(common: &Common) -> Result<Self, CoreError> {
        let mut values = HashMap::new();
        let mut path = String::new();
        if let Some(p) = &common.config {
            path = p.display().to_string();
            let text = std::fs::read_to_string(p).map_err(|e| CoreError::io(&path, e))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| CoreError::Format {
                    path: path.clone(),
                    offset: lineno + 1,
                    msg: format!("expected key=value, found \"{}\"", line),
                })?;
                values.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(Effective { values, used: HashSet::new(), path })
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.used.insert(key.to_string());
        self.values.get(key).cloned()
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, CoreError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                CoreError::InvalidArgument(format!(
                    "{}: config key {} has unparseable value \"{}\"",
                    self.path, key, v
                ))
            }),
        }
    }

    /// Effective seed: flag beats file beats the default of 7.
    pub fn seed(&mut self, flag: Option<u64>) -> Result<u64, CoreError> {
        if let Some(s) = flag {
            self.used.insert("seed".into());
            return Ok(s);
        }
        Ok(self.parse::<u64>("seed")?.unwrap_or(7))
    }

    pub fn f64(&mut self, key: &str, flag: Option<f64>, default: f64) -> Result<f64, CoreError> {
        if let Some(v) = flag {
            self.used.insert(key.to_string());
            return Ok(v);
        }
        Ok(self.parse::<f64>(key)?.unwrap_or(default))
    }

    pub fn usize(&mut self, key: &str, flag: Option<usize>, default: usize) -> Result<usize, CoreError> {
        if let Some(v) = flag {
            self.used.insert(key.to_string());
            return Ok(v);
        }
        Ok(self.parse::<usize>(key)?.unwrap_or(default))
    }

    /// Reject config keys nothing consumed.
    pub fn finish(self) -> Result<(), CoreError> {
        let mut unknown: Vec<&String> =
            self.values.keys().filter(|k| !self.used.contains(*k)).collect();
        unknown.sort();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CoreError::InvalidArgument(format!(
                "{}: unknown config keys: {}",
                self.path,
                unknown.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            )))
        }
    }
}
