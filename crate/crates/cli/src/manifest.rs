//! Versioned JSON manifest holding a serialized decomposition.
//!
//! Control points are stored in normalized coordinates as 64-bit floats,
//! so a manifest is independent of the resolution it was fitted at.
//! Intrinsic masks live next to the manifest as 16-bit grayscale PNGs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use lamoco_core::decompose::{FitSettings, LossWeights, SceneDecomposition};
use lamoco_core::forecast::Model;
use lamoco_core::layers::{ClassInfo, ClassTable, LayerStack};
use lamoco_core::{ControlGrid, ControlState, Point2H};
use serde::{Deserialize, Serialize};

use crate::raster_io::{read_mask16, write_mask16};

pub const VERSION: &str = "lamoco-manifest/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub clip: Clip,
    pub classes: Vec<ClassInfo>,
    pub layers: Vec<LayerEntry>,
    pub history: Vec<f64>,
    pub hyperparameters: Hyperparameters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub height: usize,
    pub width: usize,
    /// Observed steps `T`.
    pub observed: usize,
    /// Predicted steps `K`.
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    /// Control grid as `[rows, cols]`.
    pub grid: [usize; 2],
    /// Intrinsic mask file, relative to the manifest.
    pub mask: String,
    pub class_scores: Vec<f64>,
    pub states: Vec<StateEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateEntry {
    pub t: usize,
    pub depth: f64,
    pub points: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub seed: u64,
    pub weights: LossWeights,
    pub fit: Option<FitSettings>,
    pub forecast: Option<ForecastInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastInfo {
    pub model: Model,
    pub steps: usize,
    pub sigma: f64,
    pub sample: usize,
}

/// File name of layer `i`'s mask for a manifest at `path`.
fn mask_file(path: &Path, layer: usize) -> String {
    let stem = path.file_stem().map_or("manifest".into(), |s| s.to_string_lossy().into_owned());
    format!("{stem}.layer{layer:02}.png")
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

impl Manifest {
    /// Describes `d`; mask file names refer to a manifest stored at `path`.
    pub fn describe(d: &SceneDecomposition, path: &Path, hyperparameters: Hyperparameters) -> Self {
        let layers = (0..d.layer_count())
            .map(|i| LayerEntry {
                grid: [d.grids[i].rows, d.grids[i].cols],
                mask: mask_file(path, i),
                class_scores: d.stack.classes[i].clone(),
                states: d.trajectories[i]
                    .iter()
                    .map(|s| StateEntry { t: s.time, depth: s.depth, points: s.points.iter().map(Point2H::xy).collect() })
                    .collect(),
            })
            .collect();
        Self {
            version: VERSION.into(),
            clip: Clip { height: d.height, width: d.width, observed: d.observed, predicted: d.frames() - d.observed },
            classes: d.class_table.classes.clone(),
            layers,
            history: d.history.clone(),
            hyperparameters,
        }
    }

    pub fn to_text(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let probe: serde_json::Value = serde_json::from_str(text).context("manifest is not valid JSON")?;
        match probe.get("version").and_then(|v| v.as_str()) {
            Some(VERSION) => {}
            Some(v) => bail!("unsupported manifest version '{v}' (expected '{VERSION}')"),
            None => bail!("manifest has no version tag"),
        }
        Ok(serde_json::from_value(probe)?)
    }
}

/// Writes the manifest and its mask files.
pub fn save(path: &Path, d: &SceneDecomposition, hyperparameters: Hyperparameters) -> Result<Manifest> {
    d.validate()?;
    let m = Manifest::describe(d, path, hyperparameters);
    for (entry, mask) in m.layers.iter().zip(&d.stack.intrinsic) {
        write_mask16(&sibling(path, &entry.mask), mask)?;
    }
    fs::write(path, m.to_text()?).with_context(|| format!("writing manifest {}", path.display()))?;
    Ok(m)
}

/// Reads a manifest and rebuilds its decomposition.
pub fn load(path: &Path) -> Result<(Manifest, SceneDecomposition)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    let m = Manifest::from_text(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
    let frames = m.clip.observed + m.clip.predicted;
    let mut grids = Vec::new();
    let mut trajectories = Vec::new();
    let mut intrinsic = Vec::new();
    let mut classes = Vec::new();
    for (i, l) in m.layers.iter().enumerate() {
        let grid = ControlGrid::regular(l.grid[0], l.grid[1]);
        ensure!(l.states.len() == frames, "layer {i} has {} states, expected {frames}", l.states.len());
        ensure!(l.class_scores.len() == m.classes.len(), "layer {i} has {} class scores", l.class_scores.len());
        let states = l
            .states
            .iter()
            .map(|s| {
                ensure!(s.points.len() == grid.len(), "layer {i} step {}: {} points for a {}-point grid", s.t, s.points.len(), grid.len());
                Ok(ControlState::new(i, s.t, s.points.iter().map(|&p| Point2H::from(p)).collect(), s.depth))
            })
            .collect::<Result<Vec<_>>>()?;
        grids.push(grid);
        trajectories.push(states);
        intrinsic.push(read_mask16(&sibling(path, &l.mask))?);
        classes.push(l.class_scores.clone());
    }
    let d = SceneDecomposition {
        height: m.clip.height,
        width: m.clip.width,
        observed: m.clip.observed,
        grids,
        trajectories,
        stack: LayerStack { intrinsic, warped: Vec::new(), classes },
        class_table: ClassTable::new(m.classes.clone()),
        weights: m.hyperparameters.weights,
        history: m.history.clone(),
    };
    d.validate().with_context(|| format!("inconsistent manifest {}", path.display()))?;
    Ok((m, d))
}
