//! Pseudo labels derived from segmentation and flow.

use nalgebra::DMatrix;

use crate::error::{check_size, Error, Result};
use crate::layers::{ClassTable, SegMap};
use crate::raster::{norm_per_pixel, pixel_to_norm, FlowField, Mask};
use crate::tps::{Point2H, TpsSolver, TpsTransform};

/// Upper bound on the number of stuff pixels entering the background fit.
const MAX_FIT_SAMPLES: usize = 6000;
/// Weight of the grid-Laplacian smoothness penalty, relative to the mean
/// data weight per control point.
const SMOOTHNESS: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct PseudoLabels {
    /// Pixels whose most likely class is a stuff class.
    pub stuff: Mask,
    /// Foreground pixels moving differently from the background.
    pub moving_fg: Mask,
    /// Background flow extrapolated from the stuff pixels, in pixels.
    pub bg_fit: FlowField,
    /// The fitted background motion (frame to previous frame, normalized).
    pub bg_transform: TpsTransform,
    /// No stuff pixel was available; `bg_fit` is a global affine fit.
    pub fallback: bool,
}

pub fn stuff_mask(seg: &SegMap, table: &ClassTable) -> Result<Mask> {
    if seg.classes != table.len() {
        return Err(Error::SizeMismatch(format!("{} seg classes vs {} table entries", seg.classes, table.len())));
    }
    let data = (0..seg.height * seg.width).map(|k| if table.is_stuff(seg.argmax(k)) { 1.0 } else { 0.0 }).collect();
    Ok(Mask::new(seg.height, seg.width, data))
}

/// Least-squares TPS fit of `flow` restricted to `region`, with control
/// points on the solver's grid. Returns the transform mapping frame
/// positions to their matches (both normalized) and whether the region was
/// empty, in which case a global affine fit over all valid pixels is used.
pub fn fit_background_motion(flow: &FlowField, region: &Mask, solver: &TpsSolver) -> Result<(TpsTransform, bool)> {
    check_size("flow vs region", flow.dims(), region.dims())?;
    let (h, w) = flow.dims();
    let picked: Vec<usize> = (0..h * w).filter(|&k| flow.valid[k] && region.data[k] > 0.5).collect();
    if picked.is_empty() {
        return Ok((affine_fit(flow, solver), true));
    }
    let stride = picked.len().div_ceil(MAX_FIT_SAMPLES);
    let rows: Vec<usize> = picked.into_iter().step_by(stride).collect();
    let (nx, ny) = (norm_per_pixel(w), norm_per_pixel(h));
    let l = solver.len();

    let mut normal = DMatrix::<f64>::zeros(l, l);
    let mut rhs = DMatrix::<f64>::zeros(l, 2);
    for &k in &rows {
        let p = Point2H::new(pixel_to_norm((k % w) as f64, w), pixel_to_norm((k / w) as f64, h));
        let wts = solver.weights(p);
        let d = [flow.u[k] * nx, flow.v[k] * ny];
        for a in 0..l {
            if wts[a] == 0.0 {
                continue;
            }
            rhs[(a, 0)] += wts[a] * d[0];
            rhs[(a, 1)] += wts[a] * d[1];
            for b in 0..l {
                normal[(a, b)] += wts[a] * wts[b];
            }
        }
    }
    let mu = SMOOTHNESS * rows.len() as f64 / l as f64;
    let grid = solver.grid();
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let a = r * grid.cols + c;
            let mut nb = Vec::new();
            if c + 1 < grid.cols {
                nb.push(a + 1);
            }
            if r + 1 < grid.rows {
                nb.push(a + grid.cols);
            }
            for b in nb {
                normal[(a, a)] += mu;
                normal[(b, b)] += mu;
                normal[(a, b)] -= mu;
                normal[(b, a)] -= mu;
            }
        }
    }
    for a in 0..l {
        normal[(a, a)] += 1e-9 * mu.max(1.0);
    }
    let disp = match normal.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => normal
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::DegenerateGrid("background fit system is singular".into()))?,
    };
    let targets: Vec<[f64; 2]> =
        grid.points.iter().enumerate().map(|(j, p)| [p.x + disp[(j, 0)], p.y + disp[(j, 1)]]).collect();
    Ok((solver.solve_xy(&targets)?, false))
}

fn affine_fit(flow: &FlowField, solver: &TpsSolver) -> TpsTransform {
    let (h, w) = flow.dims();
    let (nx, ny) = (norm_per_pixel(w), norm_per_pixel(h));
    let mut ata = DMatrix::<f64>::zeros(3, 3);
    let mut atb = DMatrix::<f64>::zeros(3, 2);
    let mut count = 0;
    for k in (0..h * w).filter(|&k| flow.valid[k]) {
        let x = pixel_to_norm((k % w) as f64, w);
        let y = pixel_to_norm((k / w) as f64, h);
        let row = [x, y, 1.0];
        let target = [x + flow.u[k] * nx, y + flow.v[k] * ny];
        for a in 0..3 {
            for b in 0..3 {
                ata[(a, b)] += row[a] * row[b];
            }
            atb[(a, 0)] += row[a] * target[0];
            atb[(a, 1)] += row[a] * target[1];
        }
        count += 1;
    }
    let mut xf = TpsTransform::identity(solver.shared_grid());
    if count < 3 {
        return xf;
    }
    if let Some(sol) = ata.lu().solve(&atb) {
        let sol: DMatrix<f64> = sol;
        for r in 0..2 {
            for c in 0..3 {
                xf.affine[r][c] = sol[(c, r)];
            }
        }
    }
    xf
}

/// Pseudo labels for one frame: stuff pixels, the background flow fitted on
/// them, and the foreground pixels whose flow deviates from that fit by
/// more than `tau_m` (L1, normalized units).
pub fn moving_foreground_mask(
    seg: &SegMap,
    table: &ClassTable,
    flow: &FlowField,
    tau_m: f64,
    solver: &TpsSolver,
) -> Result<PseudoLabels> {
    check_size("segmentation vs flow", seg.dims(), flow.dims())?;
    let stuff = stuff_mask(seg, table)?;
    let (bg_transform, fallback) = fit_background_motion(flow, &stuff, solver)?;
    let (h, w) = flow.dims();
    let bg_fit = bg_transform.sample_dense(h, w);
    let (nx, ny) = (norm_per_pixel(w), norm_per_pixel(h));
    let data = (0..h * w)
        .map(|k| {
            if stuff.data[k] > 0.5 || !flow.valid[k] {
                return 0.0;
            }
            let dev = (flow.u[k] - bg_fit.u[k]).abs() * nx + (flow.v[k] - bg_fit.v[k]).abs() * ny;
            if dev > tau_m {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(PseudoLabels { stuff, moving_fg: Mask::new(h, w, data), bg_fit, bg_transform, fallback })
}
