//! Flat `key = value` run configuration. Blank lines and lines starting
//! with `#` are ignored; unknown and repeated keys are errors.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, EstimatorMode, DEFAULT_DELTA_PX, DEFAULT_PAIR_CAP};
use crate::matching::DEFAULT_SIMILARITY_THRESHOLD;

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub subdivisions: u32,
    pub similarity_threshold: f64,
    pub ransac_delta_px: f64,
    pub top_k: usize,
    pub pad_ratio: f64,
    pub estimator_mode: EstimatorMode,
    pub kabsch_pair_cap: usize,
    pub kabsch_seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            subdivisions: 2,
            similarity_threshold: DEFAULT_SIMILARITY_THRESHOLD,
            ransac_delta_px: DEFAULT_DELTA_PX,
            top_k: 5,
            pad_ratio: 0.0,
            estimator_mode: EstimatorMode::Single,
            kabsch_pair_cap: DEFAULT_PAIR_CAP,
            kabsch_seed: 0,
        }
    }
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        line,
        message: format!("invalid value {value:?} for {key}"),
    })
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| Error::Config {
                line,
                message: format!("expected `key = value`, got {trimmed:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config {
                    line,
                    message: format!("duplicate key {key}"),
                });
            }
            match key {
                "subdivisions" => cfg.subdivisions = parse_value(line, key, value)?,
                "similarity_threshold" => cfg.similarity_threshold = parse_value(line, key, value)?,
                "ransac_delta_px" => cfg.ransac_delta_px = parse_value(line, key, value)?,
                "top_k" => cfg.top_k = parse_value(line, key, value)?,
                "pad_ratio" => cfg.pad_ratio = parse_value(line, key, value)?,
                "estimator_mode" => cfg.estimator_mode = parse_value(line, key, value)?,
                "kabsch_pair_cap" => cfg.kabsch_pair_cap = parse_value(line, key, value)?,
                "kabsch_seed" => cfg.kabsch_seed = parse_value(line, key, value)?,
                _ => {
                    return Err(Error::Config {
                        line,
                        message: format!("unknown key {key}"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Err(Error::Config { line: 0, message });
        if self.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        if !(self.ransac_delta_px > 0.0) {
            return bad(format!("ransac_delta_px {} must be positive", self.ransac_delta_px));
        }
        if !(self.pad_ratio >= 0.0) {
            return bad(format!("pad_ratio {} must be non-negative", self.pad_ratio));
        }
        if !self.similarity_threshold.is_finite() {
            return bad("similarity_threshold must be finite".into());
        }
        if self.subdivisions > crate::geometry::MAX_SUBDIVISIONS {
            return bad(format!("subdivisions {} is too large", self.subdivisions));
        }
        Ok(())
    }

    pub fn estimator(&self) -> EstimatorConfig {
        EstimatorConfig {
            mode: self.estimator_mode,
            delta_px: self.ransac_delta_px,
            pair_cap: self.kabsch_pair_cap,
            pair_seed: self.kabsch_seed,
        }
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "subdivisions = {}", self.subdivisions)?;
        writeln!(f, "similarity_threshold = {}", self.similarity_threshold)?;
        writeln!(f, "ransac_delta_px = {}", self.ransac_delta_px)?;
        writeln!(f, "top_k = {}", self.top_k)?;
        writeln!(f, "pad_ratio = {}", self.pad_ratio)?;
        writeln!(f, "estimator_mode = {}", self.estimator_mode)?;
        writeln!(f, "kabsch_pair_cap = {}", self.kabsch_pair_cap)?;
        writeln!(f, "kabsch_seed = {}", self.kabsch_seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = Config::parse("# run\n\ntop_k = 3\nestimator_mode = kabsch2\npad_ratio=0.25\n").unwrap();
        assert_eq!(cfg.top_k, 3);
        assert_eq!(cfg.estimator_mode, EstimatorMode::Kabsch2);
        assert_eq!(cfg.pad_ratio, 0.25);
        assert_eq!(cfg.ransac_delta_px, 14.0);
        assert_eq!(Config::parse(&cfg.to_string()).unwrap(), cfg);
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert!(matches!(Config::parse("top_k = 2\nbogus = 1"), Err(Error::Config { line: 2, .. })));
        assert!(matches!(Config::parse("top_k = x"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(Config::parse("top_k = 1\ntop_k = 2"), Err(Error::Config { line: 2, .. })));
        assert!(matches!(Config::parse("no equals"), Err(Error::Config { line: 1, .. })));
        assert!(Config::parse("top_k = 0").is_err());
    }
}
