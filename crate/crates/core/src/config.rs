//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Values are parsed on demand;
//! every value read (including defaults) is recorded so the resolved
//! configuration can be echoed into the run manifest.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

/// Every key any command understands.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "threads",
    // simulation
    "households",
    "obs_per_household",
    "layout",
    "population",
    "lateral_sd",
    "replication",
    // model
    "data",
    "cells",
    "kernel",
    "lambda_scale",
    "gamma_scale",
    "rho_scale",
    "beta_local_scale",
    "omega",
    "omega_shape",
    "omega_rate",
    "alpha",
    "cell_nugget",
    "group_baselines",
    // sampler
    "chains",
    "warmup",
    "samples",
    "target_accept",
    "max_tree_depth",
    "divergence_threshold",
    // diagnose / functional
    "draws",
    "ray_origin",
    "ray_direction",
    "distance_min",
    "distance_max",
    "distance_points",
    // validate
    "m_ladder",
    "validate_configs",
    // study
    "replications",
    "keep_draws",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { key: String, line: usize },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: cannot parse `{value}` as {expected}")]
    Invalid {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("key `{0}` is required")]
    Missing(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Duplicate { key, line: i + 1 });
            }
        }
        let cfg = Self {
            entries,
            resolved: BTreeMap::new(),
        };
        cfg.check_known()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    fn check_known(&self) -> Result<(), ConfigError> {
        match self.entries.keys().find(|k| !KNOWN_KEYS.contains(&k.as_str())) {
            Some(k) => Err(ConfigError::UnknownKey(k.clone())),
            None => Ok(()),
        }
    }

    /// Overrides (or adds) a key; used for command-line flags.
    pub fn set(&mut self, key: &str, value: impl Display) -> Result<(), ConfigError> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parsed value of `key`, if present.
    pub fn get<T: FromStr>(&mut self, key: &str, expected: &'static str) -> Result<Option<T>, ConfigError> {
        let Some(v) = self.entries.get(key) else {
            return Ok(None);
        };
        let parsed = v.parse().map_err(|_| ConfigError::Invalid {
            key: key.to_string(),
            value: v.clone(),
            expected,
        })?;
        self.resolved.insert(key.to_string(), v.clone());
        Ok(Some(parsed))
    }

    /// Parsed value of `key`, or `default` when absent.
    pub fn get_or<T: FromStr + Display>(
        &mut self,
        key: &str,
        default: T,
        expected: &'static str,
    ) -> Result<T, ConfigError> {
        match self.get(key, expected)? {
            Some(v) => Ok(v),
            None => {
                self.resolved.insert(key.to_string(), default.to_string());
                Ok(default)
            }
        }
    }

    pub fn require<T: FromStr>(&mut self, key: &str, expected: &'static str) -> Result<T, ConfigError> {
        self.get(key, expected)?
            .ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    /// Comma-separated list, or `default` when absent.
    pub fn list_or<T: FromStr + Display + Clone>(
        &mut self,
        key: &str,
        default: &[T],
        expected: &'static str,
    ) -> Result<Vec<T>, ConfigError> {
        let Some(v) = self.entries.get(key).cloned() else {
            let joined: Vec<String> = default.iter().map(T::to_string).collect();
            self.resolved.insert(key.to_string(), joined.join(","));
            return Ok(default.to_vec());
        };
        let out = v
            .split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|_| ConfigError::Invalid {
                    key: key.to_string(),
                    value: v.clone(),
                    expected,
                })
            })
            .collect::<Result<Vec<T>, _>>()?;
        self.resolved.insert(key.to_string(), v);
        Ok(out)
    }

    /// Two comma-separated numbers.
    pub fn pair_or(&mut self, key: &str, default: (f64, f64)) -> Result<(f64, f64), ConfigError> {
        let v = self.list_or(key, &[default.0, default.1], "two comma-separated numbers")?;
        match v.as_slice() {
            [a, b] => Ok((*a, *b)),
            _ => Err(ConfigError::Invalid {
                key: key.to_string(),
                value: self.raw(key).unwrap_or("").to_string(),
                expected: "two comma-separated numbers",
            }),
        }
    }

    /// Every key read so far with the value actually used.
    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }
}
