//! `key = value` configuration files.
//!
//! UTF-8 lines, `#` comments, flat namespace with dotted keys
//! (`flow.n_iters = 20`). Every command validates its file against the set
//! of keys it understands — unknown keys are errors, so misspellings are
//! caught instead of silently ignored. The environment variable
//! `REPFLOW_SEED` overrides the `seed` key.

use std::collections::BTreeMap;
use std::path::Path;

use crate::{CliError, Result};

#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "config line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(CliError::Usage(format!(
                    "config line {}: empty key",
                    lineno + 1
                )));
            }
            if values.insert(key.clone(), value).is_some() {
                return Err(CliError::Usage(format!(
                    "config line {}: duplicate key {key}",
                    lineno + 1
                )));
            }
        }
        Ok(Config { values })
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Config::parse(&text)
    }

    /// Fails on any key outside the allowed set, naming the offender.
    pub fn restrict(&self, allowed: &[&str]) -> Result<()> {
        for key in self.values.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(CliError::Usage(format!("unknown config key `{key}`")));
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| CliError::Usage(format!("missing required config key `{key}`")))
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, raw: &str) -> Result<T> {
        raw.parse::<T>().map_err(|_| {
            CliError::Usage(format!(
                "config key `{key}`: cannot parse {raw:?} as {}",
                std::any::type_name::<T>()
            ))
        })
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            Some(raw) => self.parse_as(key, raw),
            None => Ok(default),
        }
    }

    pub fn require_usize(&self, key: &str) -> Result<usize> {
        let raw = self.require(key)?;
        self.parse_as(key, raw)
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            Some(raw) => self.parse_as(key, raw),
            None => Ok(default),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            Some(raw) => self.parse_as(key, raw),
            None => Ok(default),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(other) => Err(CliError::Usage(format!(
                "config key `{key}`: expected true/false, got {other:?}"
            ))),
            None => Ok(default),
        }
    }

    /// Comma-separated list of unsigned integers.
    pub fn get_usize_list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.get(key) {
            Some(raw) => raw
                .split(',')
                .map(|item| self.parse_as(key, item.trim()))
                .collect(),
            None => Ok(default.to_vec()),
        }
    }

    /// The run seed: `REPFLOW_SEED` in the environment beats the `seed` key.
    pub fn seed(&self) -> Result<u64> {
        if let Ok(raw) = std::env::var("REPFLOW_SEED") {
            return raw.parse::<u64>().map_err(|_| {
                CliError::Usage(format!("REPFLOW_SEED: cannot parse {raw:?} as u64"))
            });
        }
        self.get_u64("seed", 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_blanks() {
        let cfg = Config::parse(
            "# header comment\nseed = 7\nflow.n_iters = 20  # trailing\n\n  data.speed =1.5\n",
        )
        .unwrap();
        assert_eq!(cfg.get("seed"), Some("7"));
        assert_eq!(cfg.require_usize("flow.n_iters").unwrap(), 20);
        assert_eq!(cfg.get_f64("data.speed", 0.0).unwrap(), 1.5);
    }

    #[test]
    fn unknown_keys_are_named() {
        let cfg = Config::parse("flow.n_itres = 20\n").unwrap();
        let err = cfg.restrict(&["flow.n_iters"]).unwrap_err();
        assert!(err.to_string().contains("flow.n_itres"), "{err}");
    }

    #[test]
    fn missing_required_keys_are_named() {
        let cfg = Config::parse("").unwrap();
        let err = cfg.require_usize("train.epochs").unwrap_err();
        assert!(err.to_string().contains("train.epochs"), "{err}");
    }

    #[test]
    fn duplicate_and_malformed_lines_fail() {
        assert!(Config::parse("a = 1\na = 2\n").is_err());
        assert!(Config::parse("just words\n").is_err());
        assert!(Config::parse("= 3\n").is_err());
    }

    #[test]
    fn lists_parse() {
        let cfg = Config::parse("bench.iters = 10, 20,30 ,50\n").unwrap();
        assert_eq!(
            cfg.get_usize_list("bench.iters", &[]).unwrap(),
            vec![10, 20, 30, 50]
        );
        assert_eq!(
            cfg.get_usize_list("bench.resolutions", &[28, 56]).unwrap(),
            vec![28, 56]
        );
    }
}
