//! Flat key = value configuration files, overridden by command-line flags.
//! Every effective value (defaults included) is echoed into run reports.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
    /// Keys actually consumed, with their effective values (provenance).
    echo: std::cell::RefCell<BTreeMap<String, String>>,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config> {
        let mut values = BTreeMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((k, v)) = line.split_once('=') else {
                    bail!("config {} line {}: expected `key = value`", path.display(), i + 1);
                };
                values.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Config {
            values,
            echo: Default::default(),
        })
    }

    pub fn set_override(&mut self, key: &str, value: Option<impl Display>) {
        if let Some(v) = value {
            self.values.insert(key.to_string(), v.to_string());
        }
    }

    /// Typed lookup with a default; records the effective value.
    pub fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T: Display,
        T::Err: Display,
    {
        let out = match self.values.get(key) {
            None => default,
            Some(raw) => raw
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("config key `{key}` = `{raw}`: {e}"))?,
        };
        self.echo.borrow_mut().insert(key.to_string(), out.to_string());
        Ok(out)
    }

    pub fn get_opt_string(&self, key: &str) -> Option<String> {
        let v = self.values.get(key).cloned();
        if let Some(v) = &v {
            self.echo.borrow_mut().insert(key.to_string(), v.clone());
        }
        v
    }

    pub fn get_string(&self, key: &str, default: &str) -> String {
        let out = self
            .values
            .get(key)
            .cloned()
            .unwrap_or_else(|| default.to_string());
        self.echo.borrow_mut().insert(key.to_string(), out.clone());
        out
    }

    /// Comma-separated f64 list.
    pub fn get_f64_list(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        let out = match self.values.get(key) {
            None => default.to_vec(),
            Some(raw) => parse_f64_list(raw).with_context(|| format!("config key `{key}`"))?,
        };
        self.echo.borrow_mut().insert(
            key.to_string(),
            out.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        );
        Ok(out)
    }

    /// Everything consumed so far plus unconsumed raw keys.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut out = self.echo.borrow().clone();
        for (k, v) in &self.values {
            out.entry(k.clone()).or_insert_with(|| v.clone());
        }
        out
    }
}

pub fn parse_f64_list(raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| anyhow::anyhow!("`{s}` is not a number: {e}"))
        })
        .collect()
}

pub fn parse_name_list(raw: &str) -> Vec<String> {
    raw.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}
