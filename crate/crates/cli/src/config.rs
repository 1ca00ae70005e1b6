//! TOML run configuration. Command-line flags override file values.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use lamoco_core::decompose::{FitSettings, LossWeights};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub weights: LossWeights,
    pub fit: FitSettings,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Parses `RxC` grid sizes such as `4x4`.
pub fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected ROWSxCOLS, got '{s}'"))?;
    let r: usize = r.trim().parse().map_err(|e| format!("bad rows in '{s}': {e}"))?;
    let c: usize = c.trim().parse().map_err(|e| format!("bad cols in '{s}': {e}"))?;
    if r < 2 || c < 2 {
        return Err(format!("grid '{s}' needs at least 2x2 points"));
    }
    Ok((r, c))
}
