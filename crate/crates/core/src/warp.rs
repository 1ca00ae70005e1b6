//! Dense warp-field algebra: inversion, layer-warp composition, image
//! resampling and flow visualization.

use crate::error::{check_size, Error, Result};
use crate::parallel;
use crate::raster::{bilinear_taps, norm_per_pixel, norm_to_pixel, pixel_to_norm, FlowField, Image};
use crate::tps::TpsTransform;

/// Default reach of the neighbor fill, in pixels.
pub const DEFAULT_REACH: usize = 4;

/// Newton iterations used to polish TPS preimages.
const NEWTON_STEPS: usize = 12;
/// Spacing in frame pixels of the forward samples seeding the inversion.
/// Cells between samples are reached by the fill and polished by Newton.
const SAMPLE_SPACING_PX: f64 = 1.5;
/// A polished preimage must land within this many pixels of its cell.
const NEWTON_TOL_PX: f64 = 1e-3;
/// Residual below which Newton stops early, in pixels.
const NEWTON_STOP_PX: f64 = 1e-10;

/// Scatter-invert a set of samples.
///
/// Every sample lands at continuous pixel coordinates `(x, y)` and carries a
/// payload; the nearest cell keeps the payload of the sample with the
/// smallest `key` (earliest sample on ties). Cells not hit are filled,
/// frontier by frontier, with the mean payload of their already-filled
/// cardinal neighbors, up to `reach` frontiers away from a hit cell.
struct Scatter {
    payload: Vec<[f64; 2]>,
    filled: Vec<bool>,
}

fn scatter_invert<I>(height: usize, width: usize, reach: usize, samples: I) -> Scatter
where
    I: IntoIterator<Item = ([f64; 2], [f64; 2], f64)>,
{
    let n = height * width;
    let mut payload = vec![[0.0; 2]; n];
    let mut best = vec![f64::INFINITY; n];
    for (pos, value, key) in samples {
        let cx = pos[0].round();
        let cy = pos[1].round();
        if !(cx >= 0.0 && cy >= 0.0 && cx < width as f64 && cy < height as f64) {
            continue;
        }
        let cell = cy as usize * width + cx as usize;
        if key < best[cell] {
            best[cell] = key;
            payload[cell] = value;
        }
    }
    let mut filled: Vec<bool> = best.iter().map(|b| b.is_finite()).collect();

    let neighbors = |c: usize| {
        let (i, j) = (c / width, c % width);
        let mut out = [usize::MAX; 4];
        if i > 0 {
            out[0] = c - width;
        }
        if i + 1 < height {
            out[1] = c + width;
        }
        if j > 0 {
            out[2] = c - 1;
        }
        if j + 1 < width {
            out[3] = c + 1;
        }
        out
    };
    let mut frontier: Vec<usize> = (0..n)
        .filter(|&c| !filled[c] && neighbors(c).iter().any(|&k| k != usize::MAX && filled[k]))
        .collect();
    // Each pass fills one frontier, so the loop is bounded by reach and by
    // the raster diameter.
    for _ in 0..reach.min(height + width) {
        if frontier.is_empty() {
            break;
        }
        let updates: Vec<(usize, [f64; 2])> = frontier
            .iter()
            .map(|&c| {
                let mut acc = [0.0; 2];
                let mut count = 0.0;
                for k in neighbors(c) {
                    if k != usize::MAX && filled[k] {
                        acc[0] += payload[k][0];
                        acc[1] += payload[k][1];
                        count += 1.0;
                    }
                }
                (c, [acc[0] / count, acc[1] / count])
            })
            .collect();
        for &(c, v) in &updates {
            payload[c] = v;
            filled[c] = true;
        }
        let mut next: Vec<usize> = updates
            .iter()
            .flat_map(|&(c, _)| neighbors(c))
            .filter(|&k| k != usize::MAX && !filled[k])
            .collect();
        next.sort_unstable();
        next.dedup();
        frontier = next;
    }
    Scatter { payload, filled }
}

/// Inverts a dense displacement field.
///
/// Cells reached by some source pixel take the negated displacement of the
/// source pixel with the smallest displacement magnitude (raster order
/// breaks ties); cells within `reach` cardinal steps of a reached cell are
/// filled by iterative neighbor averaging; all other cells are invalid and
/// point outside the raster with the displacement `(2 W, 2 H)`.
pub fn invert_warp(w: &FlowField, reach: usize) -> FlowField {
    let (h, wd) = w.dims();
    let samples = (0..h * wd).filter(|&k| w.valid[k]).map(|k| {
        let (i, j) = ((k / wd) as f64, (k % wd) as f64);
        let (du, dv) = (w.u[k], w.v[k]);
        ([j + du, i + dv], [-du, -dv], du * du + dv * dv)
    });
    let s = scatter_invert(h, wd, reach, samples);
    let sentinel = [2.0 * wd as f64, 2.0 * h as f64];
    FlowField {
        height: h,
        width: wd,
        u: s.payload.iter().zip(&s.filled).map(|(p, &f)| if f { p[0] } else { sentinel[0] }).collect(),
        v: s.payload.iter().zip(&s.filled).map(|(p, &f)| if f { p[1] } else { sentinel[1] }).collect(),
        valid: s.filled,
    }
}

/// Per-pixel preimages of a TPS transform on a frame raster.
#[derive(Clone, Debug)]
pub struct InverseMap {
    pub height: usize,
    pub width: usize,
    /// Normalized intrinsic coordinates `u` with `xf(u)` at the pixel center.
    pub points: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl InverseMap {
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Inverts a TPS transform on an `height x width` frame raster.
///
/// The transform is sampled densely over its intrinsic square (extended by
/// a margin so that preimages slightly outside it are found), scattered
/// into frame cells as in [`invert_warp`], then every reached or filled
/// cell is polished with Newton's method so the preimage is exact. Cells
/// where Newton does not converge are invalid.
pub fn invert_tps(xf: &TpsTransform, height: usize, width: usize, reach: usize) -> InverseMap {
    let (sx, sy) = (1.0 / norm_per_pixel(width), 1.0 / norm_per_pixel(height));
    // Stretch of the map in frame pixels per intrinsic unit, probed at the
    // control points.
    let mut stretch = [0.0f64; 2];
    for c in xf.source.points.iter() {
        let (_, j) = xf.apply_with_jacobian(c.x, c.y);
        stretch[0] = stretch[0].max((j[0][0] * sx).hypot(j[1][0] * sy));
        stretch[1] = stretch[1].max((j[0][1] * sx).hypot(j[1][1] * sy));
    }
    let margin_px = reach as f64 + 2.0;
    let extent = |s: f64| (1.0 + (margin_px / s.max(1e-6)).min(0.5)).max(1.0);
    let (ex, ey) = (extent(stretch[0]), extent(stretch[1]));
    let count = |s: f64, e: f64, cap: usize| ((2.0 * e * s / SAMPLE_SPACING_PX).ceil() as usize).clamp(2, cap);
    let nx = count(stretch[0], ex, 4 * width.max(16));
    let ny = count(stretch[1], ey, 4 * height.max(16));

    let landed = parallel::map_rows(ny, |r| {
        let b = -ey + 2.0 * ey * (r as f64 + 0.5) / ny as f64;
        (0..nx)
            .map(|c| {
                let a = -ex + 2.0 * ex * (c as f64 + 0.5) / nx as f64;
                let o = xf.apply_xy(a, b);
                ([a, b], [norm_to_pixel(o[0], width), norm_to_pixel(o[1], height)])
            })
            .collect()
    });
    let samples = landed.iter().map(|&(src, pos)| {
        let (cx, cy) = (pos[0].round(), pos[1].round());
        let key = (pos[0] - cx).powi(2) + (pos[1] - cy).powi(2);
        let center = [pixel_to_norm(cx, width), pixel_to_norm(cy, height)];
        (pos, [src[0] - center[0], src[1] - center[1]], key)
    });
    let s = scatter_invert(height, width, reach, samples);

    let polished = parallel::map_indexed(height * width, |k| {
        if !s.filled[k] {
            return None;
        }
        let q = [pixel_to_norm((k % width) as f64, width), pixel_to_norm((k / width) as f64, height)];
        let u0 = [q[0] + s.payload[k][0], q[1] + s.payload[k][1]];
        newton_preimage(xf, q, u0, [sx, sy])
    });
    InverseMap {
        height,
        width,
        valid: polished.iter().map(Option::is_some).collect(),
        points: polished.into_iter().map(|p| p.unwrap_or([f64::NAN; 2])).collect(),
    }
}

/// Refines an inverse map for a transform that moved slightly, using the
/// previous preimages as starting points. Cells that fail to converge fall
/// back to a full inversion.
pub fn refine_inverse(xf: &TpsTransform, prior: &InverseMap, reach: usize) -> InverseMap {
    let (height, width) = prior.dims();
    let (sx, sy) = (1.0 / norm_per_pixel(width), 1.0 / norm_per_pixel(height));
    let polished = parallel::map_indexed(height * width, |k| {
        if !prior.valid[k] {
            return Some(None);
        }
        let q = [pixel_to_norm((k % width) as f64, width), pixel_to_norm((k / width) as f64, height)];
        newton_preimage(xf, q, prior.points[k], [sx, sy]).map(Some)
    });
    if polished.iter().any(Option::is_none) {
        return invert_tps(xf, height, width, reach);
    }
    let points: Vec<Option<[f64; 2]>> = polished.into_iter().map(|p| p.unwrap()).collect();
    InverseMap {
        height,
        width,
        valid: points.iter().map(Option::is_some).collect(),
        points: points.into_iter().map(|p| p.unwrap_or([f64::NAN; 2])).collect(),
    }
}

fn newton_preimage(xf: &TpsTransform, q: [f64; 2], mut u: [f64; 2], px_scale: [f64; 2]) -> Option<[f64; 2]> {
    for _ in 0..NEWTON_STEPS {
        let (o, j) = xf.apply_with_jacobian(u[0], u[1]);
        let r = [o[0] - q[0], o[1] - q[1]];
        if (r[0] * px_scale[0]).abs() < NEWTON_STOP_PX && (r[1] * px_scale[1]).abs() < NEWTON_STOP_PX {
            return Some(u);
        }
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if !(det.abs() > 1e-12) {
            return None;
        }
        u[0] -= (j[1][1] * r[0] - j[0][1] * r[1]) / det;
        u[1] -= (-j[1][0] * r[0] + j[0][0] * r[1]) / det;
        if !(u[0].is_finite() && u[1].is_finite()) {
            return None;
        }
    }
    let o = xf.apply_xy(u[0], u[1]);
    let err = ((o[0] - q[0]) * px_scale[0]).hypot((o[1] - q[1]) * px_scale[1]);
    (err < NEWTON_TOL_PX).then_some(u)
}

/// Dense layer warp between two time steps of one layer.
#[derive(Clone, Debug)]
pub struct LayerWarp {
    /// Backward flow: from each pixel of the later frame to its match in the
    /// earlier frame.
    pub flow: FlowField,
    /// Intrinsic preimages of the later frame's pixels.
    pub preimage: InverseMap,
}

/// Composes the layer warp carrying layer content from the frame of
/// `earlier` to the frame of `later`, returned as backward flow on the
/// later frame: `earlier(later^-1(q)) - q`. Both transforms must share
/// their source grid. Validity follows the inversion of `later`.
pub fn compose_pair(earlier: &TpsTransform, later: &TpsTransform, height: usize, width: usize) -> Result<LayerWarp> {
    if earlier.source != later.source {
        return Err(Error::SizeMismatch("layer warps must share one source grid".into()));
    }
    let preimage = invert_tps(later, height, width, DEFAULT_REACH);
    Ok(LayerWarp { flow: chain_flow(earlier, &preimage), preimage })
}

/// Backward flow `earlier(u(q)) - q` for precomputed preimages `u`.
pub fn chain_flow(earlier: &TpsTransform, preimage: &InverseMap) -> FlowField {
    let (h, w) = preimage.dims();
    let (sx, sy) = (1.0 / norm_per_pixel(w), 1.0 / norm_per_pixel(h));
    let d = parallel::map_indexed(h * w, |k| {
        if !preimage.valid[k] {
            return None;
        }
        let u = preimage.points[k];
        let o = earlier.apply_xy(u[0], u[1]);
        let q = [pixel_to_norm((k % w) as f64, w), pixel_to_norm((k / w) as f64, h)];
        Some([(o[0] - q[0]) * sx, (o[1] - q[1]) * sy])
    });
    FlowField {
        height: h,
        width: w,
        u: d.iter().map(|d| d.map_or(2.0 * w as f64, |d| d[0])).collect(),
        v: d.iter().map(|d| d.map_or(2.0 * h as f64, |d| d[1])).collect(),
        valid: d.iter().map(Option::is_some).collect(),
    }
}

/// Backward-warps `img` by `flow` with bilinear sampling. Output pixels whose
/// flow is invalid or whose sample falls outside the image are zero and
/// flagged invalid.
pub fn warp_image(img: &Image, flow: &FlowField) -> Result<(Image, Vec<bool>)> {
    check_size("flow vs image", img.dims(), flow.dims())?;
    let (h, w, ch) = (img.height, img.width, img.channels);
    let mut data = vec![0.0; h * w * ch];
    let mut valid = vec![false; h * w];
    for k in 0..h * w {
        if !flow.valid[k] {
            continue;
        }
        let x = (k % w) as f64 + flow.u[k];
        let y = (k / w) as f64 + flow.v[k];
        if let Some(taps) = bilinear_taps(h, w, x, y) {
            for c in 0..ch {
                data[k * ch + c] = taps.iter().map(|&(idx, wt)| wt * img.data[idx * ch + c]).sum();
            }
            valid[k] = true;
        }
    }
    Ok((Image::new(h, w, ch, data), valid))
}

/// Visualizes flow with hue for direction and saturation for magnitude
/// (relative to the largest valid magnitude). Zero flow is white, invalid
/// pixels are black.
pub fn flow_to_color(flow: &FlowField) -> Image {
    let n = flow.len();
    let max_mag = (0..n)
        .filter(|&k| flow.valid[k])
        .map(|k| flow.u[k].hypot(flow.v[k]))
        .fold(0.0f64, f64::max);
    let mut data = vec![0.0; n * 3];
    for k in 0..n {
        if !flow.valid[k] {
            continue;
        }
        let mag = flow.u[k].hypot(flow.v[k]);
        let sat = if max_mag > 0.0 { (mag / max_mag).min(1.0) } else { 0.0 };
        let hue = (flow.v[k].atan2(flow.u[k]) / std::f64::consts::TAU).rem_euclid(1.0);
        data[k * 3..k * 3 + 3].copy_from_slice(&hsv_to_rgb(hue, sat, 1.0));
    }
    Image::new(flow.height, flow.width, 3, data)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let sector = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
