//! Direct per-clip optimization of the decomposition.
//!
//! The fit replaces amortized inference with first-order descent on the
//! decomposition objective: Adam-style momentum on each parameter group,
//! wrapped in a backtracking line search so that every accepted step lowers
//! the objective under the weights of that iteration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ClassTable, LayerStack, SegMap, CANVAS_PER_GRID, DEFAULT_CLASS_GROUPS, DEFAULT_K_C};
use crate::raster::{FlowField, Mask};
use crate::tps::{ControlGrid, ControlState, Point2H, TpsSolver};

use super::init::{initialize, InitInputs};
use super::labels::moving_foreground_mask;
use super::model::{sigmoid, softmax, Params, Problem};
use super::{LossWeights, PseudoLabels, SceneDecomposition};

/// Smallest depth score an object layer may take.
const MIN_OBJECT_DEPTH: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    pub iterations: usize,
    /// Step sizes per group; points are in normalized units.
    pub lr_points: f64,
    pub lr_depth: f64,
    pub lr_logits: f64,
    pub lr_classes: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Step halvings tried before an iteration is rejected.
    pub max_backtracks: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            iterations: 120,
            lr_points: 0.002,
            lr_depth: 0.05,
            lr_logits: 0.25,
            lr_classes: 0.2,
            beta1: 0.9,
            beta2: 0.999,
            max_backtracks: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSettings {
    /// Number of object layers `N`.
    pub layers: usize,
    pub grid_obj: (usize, usize),
    pub grid_bg: (usize, usize),
    pub empty_thresh: f64,
    pub k_c: f64,
    /// Apply semantic refinement to object masks.
    pub refine: bool,
    /// Merge classes that form one entity before fitting.
    pub merge_groups: bool,
    /// Inputs are block-averaged by the smallest integer factor bringing the
    /// pixel count under this bound.
    pub max_fit_pixels: usize,
    pub seed: u64,
    pub optimizer: OptimizerSettings,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            layers: 16,
            grid_obj: (4, 4),
            grid_bg: (8, 16),
            empty_thresh: 0.5,
            k_c: DEFAULT_K_C,
            refine: true,
            merge_groups: true,
            max_fit_pixels: 10_000,
            seed: 0,
            optimizer: OptimizerSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FitStatus {
    Completed,
    /// The objective became non-finite at this iteration; the result holds
    /// the last finite state.
    NonFinite(usize),
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub decomposition: SceneDecomposition,
    pub status: FitStatus,
    /// Unweighted `(L_o, L_f, L_r)` of the final state at fit resolution.
    pub final_parts: [f64; 3],
    /// Downsampling factor used for the fit.
    pub factor: usize,
}

/// Block-averages flows (displacements rescaled) and segmentations by
/// `factor`. A flow block is valid when all its pixels are.
pub fn downsample_inputs(flows: &[FlowField], segs: &[SegMap], factor: usize) -> (Vec<FlowField>, Vec<SegMap>) {
    if factor <= 1 {
        return (flows.to_vec(), segs.to_vec());
    }
    let f = factor;
    let flows = flows
        .iter()
        .map(|fl| {
            let (h, w) = (fl.height / f, fl.width / f);
            FlowField::from_fn(h, w, |i, j| {
                let mut acc = [0.0; 2];
                for a in 0..f {
                    for b in 0..f {
                        let k = (i * f + a) * fl.width + j * f + b;
                        if !fl.valid[k] {
                            return None;
                        }
                        acc[0] += fl.u[k];
                        acc[1] += fl.v[k];
                    }
                }
                let s = (f * f * f) as f64;
                Some([acc[0] / s, acc[1] / s])
            })
        })
        .collect();
    let segs = segs
        .iter()
        .map(|s| {
            let (h, w, c) = (s.height / f, s.width / f, s.classes);
            let mut probs = vec![0.0; h * w * c];
            for i in 0..h {
                for j in 0..w {
                    let out = &mut probs[(i * w + j) * c..(i * w + j + 1) * c];
                    for a in 0..f {
                        for b in 0..f {
                            for (o, p) in out.iter_mut().zip(s.pixel((i * f + a) * s.width + j * f + b)) {
                                *o += p / (f * f) as f64;
                            }
                        }
                    }
                }
            }
            SegMap::new(h, w, c, probs)
        })
        .collect();
    (flows, segs)
}

fn pick_factor(h: usize, w: usize, max_pixels: usize) -> usize {
    (1..=h.min(w))
        .find(|&f| h % f == 0 && w % f == 0 && (h / f) * (w / f) <= max_pixels)
        .unwrap_or(1)
}

struct Prepared {
    problem: Problem,
    params: Params,
    table: ClassTable,
    bg_grid: ControlGrid,
    obj_grid: ControlGrid,
    canvas: (usize, usize),
    factor: usize,
    frames: usize,
}

fn prepare(
    flows: &[FlowField],
    segs: &[SegMap],
    table: &ClassTable,
    weights: &LossWeights,
    settings: &FitSettings,
) -> Result<Prepared> {
    weights.validate()?;
    let nt = segs.len();
    if nt < 2 || flows.len() != nt {
        return Err(Error::InvalidArgument(format!("need >= 2 frames of flow and segmentation, got {} and {nt}", flows.len())));
    }
    let (height, width) = flows[0].dims();
    for (f, s) in flows.iter().zip(segs) {
        crate::error::check_size("flow", (height, width), f.dims())?;
        crate::error::check_size("segmentation", (height, width), s.dims())?;
        if s.classes != table.len() {
            return Err(Error::SizeMismatch(format!("{} seg classes vs {} table entries", s.classes, table.len())));
        }
    }
    if !(settings.k_c > 0.0) {
        return Err(Error::InvalidArgument("k_c must be positive".into()));
    }
    let (table, segs) = if settings.merge_groups {
        let (merged, remap) = table.merge_groups(DEFAULT_CLASS_GROUPS);
        let segs: Vec<SegMap> = segs.iter().map(|s| s.regroup(&remap, merged.len())).collect();
        (merged, segs)
    } else {
        (table.clone(), segs.to_vec())
    };

    let factor = pick_factor(height, width, settings.max_fit_pixels);
    let (fflows, fsegs) = downsample_inputs(flows, &segs, factor);
    let (h, w) = fflows[0].dims();

    let bg_grid = ControlGrid::regular(settings.grid_bg.0, settings.grid_bg.1);
    let obj_grid = ControlGrid::regular(settings.grid_obj.0, settings.grid_obj.1);
    let bg_solver = TpsSolver::new(bg_grid.clone(), 0.0)?;
    let obj_solver = TpsSolver::new(obj_grid.clone(), 0.0)?;
    let labels: Vec<PseudoLabels> = fflows
        .iter()
        .zip(&fsegs)
        .map(|(f, s)| moving_foreground_mask(s, &table, f, weights.tau_m, &bg_solver))
        .collect::<Result<_>>()?;
    let canvas = (settings.grid_obj.0 * CANVAS_PER_GRID, settings.grid_obj.1 * CANVAS_PER_GRID);
    let params = initialize(&InitInputs {
        height: h,
        width: w,
        flows: &fflows,
        segs: &fsegs,
        labels: &labels,
        bg_grid: &bg_grid,
        obj_grid: &obj_grid,
        canvas,
        objects: settings.layers,
        seed: settings.seed,
    });

    let mut solvers = vec![bg_solver];
    solvers.extend(std::iter::repeat_n(obj_solver, settings.layers));
    let mut canvases = vec![(0, 0)];
    canvases.extend(std::iter::repeat_n(canvas, settings.layers));
    let problem = Problem {
        height: h,
        width: w,
        flows: fflows,
        segs: fsegs,
        labels,
        solvers,
        canvas: canvases,
        weights: *weights,
        k_c: settings.k_c,
        empty_thresh: settings.empty_thresh,
        refine: settings.refine,
    };
    Ok(Prepared { problem, params, table, bg_grid, obj_grid, canvas, factor, frames: nt })
}

/// Fits a decomposition to `T` frames of backward flow (`flows[t]` maps
/// frame `t` to frame `t - 1`; `flows[0]` only feeds the pseudo labels) and
/// soft segmentation.
pub fn fit_decomposition(
    flows: &[FlowField],
    segs: &[SegMap],
    table: &ClassTable,
    weights: &LossWeights,
    settings: &FitSettings,
) -> Result<FitOutcome> {
    let Prepared { problem, params, table, bg_grid, obj_grid, canvas, factor, frames: nt } =
        prepare(flows, segs, table, weights, settings)?;
    let (height, width) = flows[0].dims();
    let (params, history, status, parts) = optimize(&problem, params, weights, &settings.optimizer)?;

    let mut grids = vec![bg_grid.clone()];
    grids.extend(std::iter::repeat_n(obj_grid, settings.layers));
    let trajectories = params
        .points
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            layer
                .iter()
                .enumerate()
                .map(|(t, pts)| {
                    ControlState::new(i, t, pts.iter().map(|p| Point2H::new(p[0], p[1])).collect(), params.depth[i][t])
                })
                .collect()
        })
        .collect();
    let mut intrinsic = vec![Mask::filled(bg_grid.rows, bg_grid.cols, 1.0)];
    intrinsic.extend(params.logits.iter().skip(1).map(|z| Mask::new(canvas.0, canvas.1, z.iter().map(|&v| sigmoid(v)).collect())));
    let decomposition = SceneDecomposition {
        height,
        width,
        observed: nt,
        grids,
        trajectories,
        stack: LayerStack {
            intrinsic,
            warped: Vec::new(),
            classes: params.class_logits.iter().map(|z| softmax(z)).collect(),
        },
        class_table: table,
        weights: *weights,
        history,
    };
    decomposition.validate()?;
    Ok(FitOutcome { decomposition, status, final_parts: parts, factor })
}

/// The fit objective at its initial state, with parameters flattened into
/// one vector: control points (layer, step, point, x/y), depth scores,
/// intrinsic mask logits, then class logits.
pub struct Objective {
    problem: Problem,
    shape: Params,
}

impl Objective {
    /// Builds the objective exactly as [`fit_decomposition`] would before
    /// its first iteration.
    pub fn new(
        flows: &[FlowField],
        segs: &[SegMap],
        table: &ClassTable,
        weights: &LossWeights,
        settings: &FitSettings,
    ) -> Result<Self> {
        let p = prepare(flows, segs, table, weights, settings)?;
        Ok(Self { problem: p.problem, shape: p.params })
    }

    pub fn initial(&self) -> Vec<f64> {
        flatten(&self.shape)
    }

    /// Lengths of the four parameter groups, in flattening order.
    pub fn group_sizes(&self) -> [usize; 4] {
        let p = &self.shape;
        [
            p.points.iter().flatten().map(|t| 2 * t.len()).sum(),
            p.depth.iter().map(Vec::len).sum(),
            p.logits.iter().map(Vec::len).sum(),
            p.class_logits.iter().map(Vec::len).sum(),
        ]
    }

    /// Objective value with `lambda_f` as the flow weight.
    pub fn value(&self, x: &[f64], lambda_f: f64) -> Result<f64> {
        self.check(x)?;
        Ok(self.problem.evaluate(&unflatten(&self.shape, x), lambda_f, false)?.total)
    }

    /// Objective value and gradient.
    pub fn gradient(&self, x: &[f64], lambda_f: f64) -> Result<(f64, Vec<f64>)> {
        self.check(x)?;
        let ev = self.problem.evaluate(&unflatten(&self.shape, x), lambda_f, true)?;
        Ok((ev.total, flatten(ev.grad.as_ref().expect("gradient requested"))))
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        let n: usize = self.group_sizes().iter().sum();
        if x.len() != n {
            return Err(Error::SizeMismatch(format!("expected {n} parameters, got {}", x.len())));
        }
        Ok(())
    }
}

/// Learning rate per flattened parameter (0 for frozen entries).
fn rates(p: &Params, o: &OptimizerSettings) -> Vec<f64> {
    let mut r = Vec::new();
    for layer in &p.points {
        for t in layer {
            r.extend(std::iter::repeat_n(o.lr_points, 2 * t.len()));
        }
    }
    for (i, d) in p.depth.iter().enumerate() {
        r.extend(std::iter::repeat_n(if i == 0 { 0.0 } else { o.lr_depth }, d.len()));
    }
    for z in &p.logits {
        r.extend(std::iter::repeat_n(o.lr_logits, z.len()));
    }
    for (i, z) in p.class_logits.iter().enumerate() {
        r.extend(std::iter::repeat_n(if i == 0 { 0.0 } else { o.lr_classes }, z.len()));
    }
    r
}

fn flatten(p: &Params) -> Vec<f64> {
    let mut v = Vec::new();
    for layer in &p.points {
        for t in layer {
            v.extend(t.iter().flat_map(|q| [q[0], q[1]]));
        }
    }
    v.extend(p.depth.iter().flatten());
    v.extend(p.logits.iter().flatten());
    v.extend(p.class_logits.iter().flatten());
    v
}

fn unflatten(shape: &Params, v: &[f64]) -> Params {
    let mut out = shape.clone();
    let mut k = 0;
    for layer in out.points.iter_mut() {
        for t in layer.iter_mut() {
            for q in t.iter_mut() {
                *q = [v[k], v[k + 1]];
                k += 2;
            }
        }
    }
    for x in out.depth.iter_mut().flatten().chain(out.logits.iter_mut().flatten()).chain(out.class_logits.iter_mut().flatten()) {
        *x = v[k];
        k += 1;
    }
    for (i, d) in out.depth.iter_mut().enumerate() {
        for x in d.iter_mut() {
            *x = if i == 0 { 0.0 } else { x.max(MIN_OBJECT_DEPTH) };
        }
    }
    out
}

type Optimized = (Params, Vec<f64>, FitStatus, [f64; 3]);

fn optimize(problem: &Problem, init: Params, weights: &LossWeights, o: &OptimizerSettings) -> Result<Optimized> {
    let total = o.iterations;
    let lr = rates(&init, o);
    let mut params = init;
    let mut x = flatten(&params);
    let mut m1 = vec![0.0; x.len()];
    let mut m2 = vec![0.0; x.len()];
    let mut steps = 0i32;
    let mut scale: f64 = 1.0;
    let mut lam = weights.lambda_f_at(0, total);
    let mut cur = problem.evaluate(&params, lam, true)?;
    if !cur.total.is_finite() {
        return Err(Error::NonFinite(0));
    }
    let mut history = Vec::with_capacity(total);
    let mut status = FitStatus::Completed;

    for it in 0..total {
        let l = weights.lambda_f_at(it, total);
        if l != lam {
            lam = l;
            cur = problem.evaluate(&params, lam, true)?;
        }
        let g = flatten(cur.grad.as_ref().expect("gradient requested"));
        steps += 1;
        let (b1, b2) = (o.beta1, o.beta2);
        let mut dir = vec![0.0; x.len()];
        for k in 0..x.len() {
            m1[k] = b1 * m1[k] + (1.0 - b1) * g[k];
            m2[k] = b2 * m2[k] + (1.0 - b2) * g[k] * g[k];
            let mh = m1[k] / (1.0 - b1.powi(steps));
            let vh = m2[k] / (1.0 - b2.powi(steps));
            dir[k] = lr[k] * mh / (vh.sqrt() + 1e-12);
        }
        let mut accepted = false;
        let mut nonfinite = false;
        for _ in 0..=o.max_backtracks {
            let cand_x: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a - scale * d).collect();
            let cand = unflatten(&params, &cand_x);
            let ev = match problem.evaluate(&cand, lam, true) {
                Ok(ev) => ev,
                Err(Error::DegenerateGrid(_)) => {
                    scale *= 0.5;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if !ev.total.is_finite() || !cand.is_finite() {
                nonfinite = true;
                scale *= 0.5;
                continue;
            }
            if ev.total <= cur.total {
                x = flatten(&cand);
                params = cand;
                cur = ev;
                accepted = true;
                scale = (scale * 1.25).min(1.0);
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            if nonfinite {
                status = FitStatus::NonFinite(it);
                history.push(cur.total);
                break;
            }
            m1.iter_mut().for_each(|v| *v = 0.0);
            m2.iter_mut().for_each(|v| *v = 0.0);
            steps = 0;
            scale = scale.max(1e-3);
        }
        history.push(cur.total);
    }
    Ok((params, history, status, cur.parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompose::loss_flow;
    use crate::layers::ClassInfo;

    fn table() -> ClassTable {
        ClassTable::new(vec![
            ClassInfo { name: "road".into(), stuff: true },
            ClassInfo { name: "car".into(), stuff: false },
        ])
    }

    #[test]
    fn static_scene_converges_with_empty_objects() {
        let (h, w) = (24, 40);
        let nt = 3;
        let labels: Vec<usize> = (0..h * w).map(|k| usize::from(k % w > 30)).collect();
        let seg = SegMap::from_labels(h, w, 2, &labels).unwrap();
        let flows = vec![FlowField::zeros(h, w); nt];
        let settings = FitSettings {
            layers: 2,
            grid_bg: (3, 4),
            optimizer: OptimizerSettings { iterations: 15, ..Default::default() },
            ..Default::default()
        };
        let out = fit_decomposition(&flows, &vec![seg.clone(); nt], &table(), &LossWeights::default(), &settings).unwrap();
        assert_eq!(out.status, FitStatus::Completed);
        let d = &out.decomposition;
        let lf = loss_flow(&flows, d, None).unwrap();
        assert!(lf < 0.05, "L_f = {lf}");
        let masks = d.observed_masks(h, w, None).unwrap();
        for frame in &masks {
            for m in &frame[1..] {
                assert!(m.data.iter().all(|&v| v < 0.05));
            }
        }
        // History is monotone once the flow weight is at full strength.
        let tail = &d.history[(0.5 * d.history.len() as f64).ceil() as usize..];
        assert!(tail.windows(2).all(|p| p[1] <= p[0]), "{:?}", d.history);
    }

    #[test]
    fn downsampling_rescales() {
        let f = FlowField::uniform(4, 6, 2.0, -4.0);
        let seg = SegMap::from_labels(4, 6, 2, &[0; 24]).unwrap();
        let (fl, sg) = downsample_inputs(&[f], &[seg], 2);
        assert_eq!(fl[0].dims(), (2, 3));
        assert!(fl[0].u.iter().all(|&u| u == 1.0) && fl[0].v.iter().all(|&v| v == -2.0));
        assert_eq!(sg[0].pixel(0), &[1.0, 0.0]);
        assert_eq!(pick_factor(128, 256, 10_000), 2);
        assert_eq!(pick_factor(24, 40, 10_000), 1);
    }

    #[test]
    fn rejects_short_input() {
        let seg = SegMap::from_labels(4, 4, 2, &[0; 16]).unwrap();
        let r = fit_decomposition(&[FlowField::zeros(4, 4)], &[seg], &table(), &LossWeights::default(), &FitSettings::default());
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }
}
