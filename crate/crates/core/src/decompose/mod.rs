//! Layered decomposition of a clip from precomputed flow and segmentation.
//!
//! The decomposition is found by direct optimization of
//! `lambda_o L_o + lambda_f L_f + lambda_r L_r` over control points, depth
//! scores, intrinsic mask logits and class logits of every layer, starting
//! from pseudo labels: stuff regions, a smooth background flow fitted on
//! them, and the foreground pixels that move differently from it.

mod fit;
mod init;
mod labels;
mod losses;
mod model;

pub use fit::{downsample_inputs, fit_decomposition, FitOutcome, FitSettings, FitStatus, Objective, OptimizerSettings};
pub use labels::{fit_background_motion, moving_foreground_mask, stuff_mask, PseudoLabels};
pub use losses::{loss_flow, loss_object, loss_reg, mask_entropy};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    background_mask, composite_flow, occlusion_filter, sample_mask, semantic_refine, ClassTable, LayerStack, SegMap,
    DEFAULT_K_C,
};
use crate::raster::{FlowField, Mask};
use crate::tps::{ControlGrid, ControlState, TpsSolver, TpsTransform};
use crate::warp::{chain_flow, invert_tps, InverseMap, DEFAULT_REACH};

/// Weights of the decomposition objective and the pseudo-label constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_o: f64,
    pub lambda_f: f64,
    pub lambda_r: f64,
    /// Weight of the pixel L1 term when scoring synthesized frames.
    pub lambda_p: f64,
    pub k_s: f64,
    pub k_m: f64,
    pub tau_m: f64,
    /// Fraction of iterations run with `lambda_f = 0`.
    pub warmup_frac: f64,
    /// Fraction of iterations over which `lambda_f` ramps up linearly.
    pub ramp_frac: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_o: 1.0,
            lambda_f: 100.0,
            lambda_r: 1.0,
            lambda_p: 1.0,
            k_s: 0.25,
            k_m: 1.0,
            tau_m: 0.005,
            warmup_frac: 0.2,
            ramp_frac: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_o,
            self.lambda_f,
            self.lambda_r,
            self.lambda_p,
            self.k_s,
            self.k_m,
            self.tau_m,
            self.warmup_frac,
            self.ramp_frac,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if self.warmup_frac + self.ramp_frac > 1.0 {
            return Err(Error::InvalidArgument("warmup_frac + ramp_frac must not exceed 1".into()));
        }
        Ok(())
    }

    /// `lambda_f` in effect at iteration `iter` of `total`.
    pub fn lambda_f_at(&self, iter: usize, total: usize) -> f64 {
        if total == 0 {
            return self.lambda_f;
        }
        let x = iter as f64 / total as f64;
        if x < self.warmup_frac {
            0.0
        } else if self.ramp_frac > 0.0 && x < self.warmup_frac + self.ramp_frac {
            self.lambda_f * (x - self.warmup_frac) / self.ramp_frac
        } else {
            self.lambda_f
        }
    }
}

/// A clip decomposed into a background layer (index 0) and object layers.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneDecomposition {
    /// Resolution of the frames the decomposition describes.
    pub height: usize,
    pub width: usize,
    /// Number of observed frames `T`; trajectories may extend further.
    pub observed: usize,
    pub grids: Vec<ControlGrid>,
    /// `trajectories[layer][t]`.
    pub trajectories: Vec<Vec<ControlState>>,
    pub stack: LayerStack,
    pub class_table: ClassTable,
    pub weights: LossWeights,
    pub history: Vec<f64>,
}

impl SceneDecomposition {
    /// Number of layers including the background.
    pub fn layer_count(&self) -> usize {
        self.grids.len()
    }

    /// Number of time steps covered by the trajectories.
    pub fn frames(&self) -> usize {
        self.trajectories.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.layer_count();
        let frames = self.frames();
        if n == 0 || self.trajectories.len() != n || self.stack.intrinsic.len() != n || self.stack.classes.len() != n {
            return Err(Error::InvalidArgument("layer counts disagree".into()));
        }
        if self.observed == 0 || self.observed > frames {
            return Err(Error::InvalidArgument(format!("{} observed of {frames} frames", self.observed)));
        }
        for (i, traj) in self.trajectories.iter().enumerate() {
            if traj.len() != frames {
                return Err(Error::InvalidArgument(format!("layer {i} has {} states, expected {frames}", traj.len())));
            }
            for (t, s) in traj.iter().enumerate() {
                if s.points.len() != self.grids[i].len() || s.layer != i || s.time != t {
                    return Err(Error::InvalidArgument(format!("state ({i}, {t}) does not match its grid")));
                }
                if !(s.depth >= 0.0) || (i == 0 && s.depth != 0.0) {
                    return Err(Error::InvalidArgument(format!("bad depth {} for layer {i} at {t}", s.depth)));
                }
            }
        }
        Ok(())
    }

    pub fn solvers(&self) -> Result<Vec<TpsSolver>> {
        self.grids.iter().map(|g| TpsSolver::new(g.clone(), 0.0)).collect()
    }

    pub fn transforms(&self, solvers: &[TpsSolver], t: usize) -> Result<Vec<TpsTransform>> {
        solvers.iter().zip(&self.trajectories).map(|(s, traj)| s.solve(&traj[t])).collect()
    }

    pub fn depths(&self, t: usize) -> Vec<f64> {
        self.trajectories.iter().map(|traj| traj[t].depth).collect()
    }

    /// Intrinsic masks warped to frame `t` (before refinement and occlusion)
    /// together with the preimages used.
    pub fn raw_masks(&self, solvers: &[TpsSolver], t: usize, height: usize, width: usize) -> Result<(Vec<Mask>, Vec<InverseMap>)> {
        let xfs = self.transforms(solvers, t)?;
        let inverses: Vec<InverseMap> = xfs.iter().map(|xf| invert_tps(xf, height, width, DEFAULT_REACH)).collect();
        let masks = inverses
            .iter()
            .enumerate()
            .map(|(i, inv)| if i == 0 { background_mask(inv) } else { sample_mask(&self.stack.intrinsic[i], inv) })
            .collect();
        Ok((masks, inverses))
    }

    /// Visible masks `[t][layer]` for the observed frames, refined against
    /// `segs` when given, then occlusion-filtered.
    pub fn observed_masks(&self, height: usize, width: usize, segs: Option<&[SegMap]>) -> Result<Vec<Vec<Mask>>> {
        let solvers = self.solvers()?;
        let mut raw: Vec<Vec<Mask>> = (0..self.observed)
            .map(|t| self.raw_masks(&solvers, t, height, width).map(|r| r.0))
            .collect::<Result<_>>()?;
        if let Some(segs) = segs {
            if segs.len() < self.observed {
                return Err(Error::SizeMismatch(format!("{} segmentation maps for {} frames", segs.len(), self.observed)));
            }
            for i in 1..self.layer_count() {
                let tube: Vec<Mask> = raw.iter().map(|m| m[i].clone()).collect();
                let r = semantic_refine(&tube, &self.stack.classes[i], &segs[..self.observed], DEFAULT_K_C)?;
                for (t, m) in r.masks.into_iter().enumerate() {
                    raw[t][i] = m;
                }
            }
        }
        raw.into_iter()
            .enumerate()
            .map(|(t, m)| occlusion_filter(&m, &self.depths(t)).map(|o| o.masks))
            .collect()
    }

    /// Visible masks at any covered time step, without semantic refinement.
    pub fn visible_masks(&self, t: usize, height: usize, width: usize) -> Result<Vec<Mask>> {
        let solvers = self.solvers()?;
        let (raw, _) = self.raw_masks(&solvers, t, height, width)?;
        Ok(occlusion_filter(&raw, &self.depths(t))?.masks)
    }

    /// Per-layer backward flows from frame `later` to frame `earlier`.
    pub fn layer_flows(&self, earlier: usize, later: usize, height: usize, width: usize) -> Result<Vec<FlowField>> {
        self.check_time(earlier)?;
        self.check_time(later)?;
        let solvers = self.solvers()?;
        let from = self.transforms(&solvers, earlier)?;
        let to = self.transforms(&solvers, later)?;
        Ok(from
            .iter()
            .zip(&to)
            .map(|(a, b)| chain_flow(a, &invert_tps(b, height, width, DEFAULT_REACH)))
            .collect())
    }

    /// Composited backward flow from frame `later` to frame `earlier`, with
    /// the visible masks of `later` as layer weights.
    pub fn flow(&self, earlier: usize, later: usize, height: usize, width: usize) -> Result<FlowField> {
        let flows = self.layer_flows(earlier, later, height, width)?;
        let masks = self.visible_masks(later, height, width)?;
        composite_flow(&flows, &masks)
    }

    fn check_time(&self, t: usize) -> Result<()> {
        if t >= self.frames() {
            return Err(Error::InvalidArgument(format!("time step {t} outside 0..{}", self.frames())));
        }
        Ok(())
    }
}
