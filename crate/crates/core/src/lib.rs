//! Layered motion coding with thin-plate splines.
//!
//! A video clip is described by `N + 1` layers (background plus `N` objects).
//! Each layer owns an intrinsic soft mask and a small regular grid of control
//! points; the positions of those points over time define one thin-plate
//! spline per layer and frame. From that compact code the crate recovers
//! dense scene flow at any resolution, fits the code to precomputed
//! flow/segmentation, extrapolates control points into the future and
//! synthesizes future frames by warping, fusing and filling past ones.
//!
//! Module map:
//!
//! - [`tps`]: kernel, parameter solve, point transform, dense sampling, gradients.
//! - [`warp`]: warp inversion, layer-warp composition, image resampling, flow colors.
//! - [`layers`]: mask warping, semantic refinement, occlusion, flow compositing.
//! - [`decompose`]: pseudo labels, the decomposition losses and the fit loop.
//! - [`forecast`]: closed-form control-point predictors and the point loss.
//! - [`synth`]: view rendering, fusion, hole filling and fill propagation.
//! - [`scene`] and [`metrics`]: synthetic scenes with exact ground truth and
//!   reconstruction metrics.

pub mod decompose;
pub mod error;
pub mod forecast;
pub mod layers;
pub mod metrics;
pub mod parallel;
pub mod raster;
pub mod scene;
pub mod synth;
pub mod tps;
pub mod warp;

pub use error::{Error, Result};
pub use raster::{FlowField, Image, Mask};
pub use tps::{ControlGrid, ControlState, Point2H, TpsSolver, TpsTransform};
