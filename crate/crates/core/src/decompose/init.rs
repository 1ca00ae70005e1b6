//! Initial parameters from pseudo labels.
//!
//! The background starts at rest in the last observed frame and is carried
//! backward by each frame's fitted background motion. Object layers are
//! seeded on connected components of the moving-foreground mask of the last
//! observed frame (largest first), splitting large components with a seeded
//! 2-means when there are more layers than components. Each object's
//! trajectory follows per-frame affine fits to the flow over its region.

use std::collections::VecDeque;

use nalgebra::{Matrix3, Matrix3x2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::layers::SegMap;
use crate::raster::{norm_per_pixel, pixel_to_norm, FlowField};
use crate::tps::ControlGrid;

use super::model::Params;
use super::PseudoLabels;

/// Mask logit magnitude of the initial intrinsic masks.
const LOGIT: f64 = 4.0;
/// Logit of layers that start without a region.
const EMPTY_LOGIT: f64 = -8.0;
/// Fraction of the canvas taken by the seeding region's bounding box.
const FILL: f64 = 0.75;
const KMEANS_STEPS: usize = 10;

pub(crate) struct InitInputs<'a> {
    pub height: usize,
    pub width: usize,
    pub flows: &'a [FlowField],
    pub segs: &'a [SegMap],
    pub labels: &'a [PseudoLabels],
    pub bg_grid: &'a ControlGrid,
    pub obj_grid: &'a ControlGrid,
    pub canvas: (usize, usize),
    pub objects: usize,
    pub seed: u64,
}

pub(crate) fn initialize(inp: &InitInputs) -> Params {
    let nt = inp.labels.len();
    let (h, w) = (inp.height, inp.width);
    let n = inp.objects + 1;
    let mut points = Vec::with_capacity(n);
    let mut depth = Vec::with_capacity(n);
    let mut logits = Vec::with_capacity(n);
    let mut class_logits = Vec::with_capacity(n);
    let nc = inp.segs[0].classes;

    let mut bg = vec![Vec::new(); nt];
    bg[nt - 1] = inp.bg_grid.points.iter().map(|p| p.xy()).collect::<Vec<_>>();
    for t in (0..nt - 1).rev() {
        let next = &inp.labels[t + 1].bg_transform;
        bg[t] = bg[t + 1].iter().map(|p| next.apply_xy(p[0], p[1])).collect();
    }
    points.push(bg);
    depth.push(vec![0.0; nt]);
    logits.push(Vec::new());
    class_logits.push(vec![0.0; nc]);

    let regions = seed_regions(&inp.labels[nt - 1].moving_fg.data, h, w, inp.objects, inp.seed);
    let (ch, cw) = inp.canvas;
    for i in 1..n {
        let d = 1.0 + 0.01 * i as f64;
        depth.push(vec![d; nt]);
        let Some(region) = regions.get(i - 1) else {
            points.push(vec![inp.obj_grid.points.iter().map(|p| [0.1 * p.x, 0.1 * p.y]).collect(); nt]);
            logits.push(vec![EMPTY_LOGIT; ch * cw]);
            class_logits.push(vec![0.0; nc]);
            continue;
        };
        // Canvas frame at the last observed step.
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &k in region {
            let (i_, j_) = ((k / w) as f64, (k % w) as f64);
            x0 = x0.min(j_ - 0.5);
            x1 = x1.max(j_ + 0.5);
            y0 = y0.min(i_ - 0.5);
            y1 = y1.max(i_ + 0.5);
        }
        let (nx, ny) = (norm_per_pixel(w), norm_per_pixel(h));
        let center = [pixel_to_norm((x0 + x1) / 2.0, w), pixel_to_norm((y0 + y1) / 2.0, h)];
        let half = [(x1 - x0) * nx / 2.0 / FILL, (y1 - y0) * ny / 2.0 / FILL];
        let last: Vec<[f64; 2]> =
            inp.obj_grid.points.iter().map(|p| [center[0] + p.x * half[0], center[1] + p.y * half[1]]).collect();

        let mut inside = vec![false; h * w];
        for &k in region {
            inside[k] = true;
        }
        let mut z = vec![-LOGIT; ch * cw];
        for (c, zc) in z.iter_mut().enumerate() {
            let u = [pixel_to_norm((c % cw) as f64, cw), pixel_to_norm((c / cw) as f64, ch)];
            let px = ((center[0] + u[0] * half[0] + 1.0) / nx - 0.5).round();
            let py = ((center[1] + u[1] * half[1] + 1.0) / ny - 0.5).round();
            if px >= 0.0 && py >= 0.0 && (px as usize) < w && (py as usize) < h && inside[py as usize * w + px as usize] {
                *zc = LOGIT;
            }
        }
        logits.push(z);

        let mut votes = vec![0usize; nc];
        for &k in region {
            votes[inp.segs[nt - 1].argmax(k)] += 1;
        }
        let major = (0..nc).fold(0, |b, c| if votes[c] > votes[b] { c } else { b });
        let mut cl = vec![0.0; nc];
        cl[major] = LOGIT;
        class_logits.push(cl);

        let mut traj = vec![Vec::new(); nt];
        traj[nt - 1] = last;
        let mut reg = inside;
        for t in (1..nt).rev() {
            let flow = &inp.flows[t];
            let movers = &inp.labels[t].moving_fg.data;
            let a = fit_affine(flow, &reg, Some(movers))
                .or_else(|| fit_affine(flow, &reg, None))
                .unwrap_or_else(|| affine_of(&inp.labels[t].bg_transform));
            traj[t - 1] = traj[t].iter().map(|p| apply_affine(&a, *p)).collect();
            reg = splat(flow, &reg);
        }
        points.push(traj);
    }
    Params { points, depth, logits, class_logits }
}

type Affine = [[f64; 3]; 2];

fn apply_affine(a: &Affine, p: [f64; 2]) -> [f64; 2] {
    [a[0][0] * p[0] + a[0][1] * p[1] + a[0][2], a[1][0] * p[0] + a[1][1] * p[1] + a[1][2]]
}

fn affine_of(xf: &crate::tps::TpsTransform) -> Affine {
    [xf.affine[0], xf.affine[1]]
}

/// Least-squares affine map `q -> q + flow(q)` (normalized) over the region,
/// optionally restricted to `keep`. Falls back to a pure translation when
/// the points do not span an affine frame.
fn fit_affine(flow: &FlowField, region: &[bool], keep: Option<&[f64]>) -> Option<Affine> {
    let (h, w) = flow.dims();
    let (nx, ny) = (norm_per_pixel(w), norm_per_pixel(h));
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Matrix3x2::<f64>::zeros();
    let mut shift = [0.0; 2];
    let mut count = 0usize;
    for k in 0..h * w {
        if !region[k] || !flow.valid[k] || keep.is_some_and(|m| m[k] < 0.5) {
            continue;
        }
        let x = pixel_to_norm((k % w) as f64, w);
        let y = pixel_to_norm((k / w) as f64, h);
        let d = [flow.u[k] * nx, flow.v[k] * ny];
        let row = [x, y, 1.0];
        for a in 0..3 {
            for b in 0..3 {
                ata[(a, b)] += row[a] * row[b];
            }
            atb[(a, 0)] += row[a] * (x + d[0]);
            atb[(a, 1)] += row[a] * (y + d[1]);
        }
        shift[0] += d[0];
        shift[1] += d[1];
        count += 1;
    }
    if count == 0 {
        return None;
    }
    let translation = [[1.0, 0.0, shift[0] / count as f64], [0.0, 1.0, shift[1] / count as f64]];
    if count < 6 {
        return Some(translation);
    }
    let scale = ata.abs().max();
    match ata.try_inverse() {
        Some(inv) if inv.abs().max() * scale < 1e8 => {
            let s = inv * atb;
            Some([[s[(0, 0)], s[(1, 0)], s[(2, 0)]], [s[(0, 1)], s[(1, 1)], s[(2, 1)]]])
        }
        _ => Some(translation),
    }
}

/// Moves a region along the flow to the previous frame.
fn splat(flow: &FlowField, region: &[bool]) -> Vec<bool> {
    let (h, w) = flow.dims();
    let mut out = vec![false; h * w];
    for k in (0..h * w).filter(|&k| region[k] && flow.valid[k]) {
        let x = ((k % w) as f64 + flow.u[k]).round();
        let y = ((k / w) as f64 + flow.v[k]).round();
        if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
            out[y as usize * w + x as usize] = true;
        }
    }
    out
}

/// Pixel sets seeding the object layers, at most `count`, largest first.
pub(crate) fn seed_regions(mask: &[f64], h: usize, w: usize, count: usize, seed: u64) -> Vec<Vec<usize>> {
    let min_size = (h * w / 4000).max(4);
    let mut comps: Vec<Vec<usize>> = components(mask, h, w).into_iter().filter(|c| c.len() >= min_size).collect();
    let split_min = (h * w / 100).max(64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while comps.len() < count {
        comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
        match comps.first() {
            Some(c) if c.len() >= 2 * split_min => {
                let c = comps.remove(0);
                let (a, b) = two_means(&c, w, &mut rng);
                comps.push(a);
                comps.push(b);
            }
            _ => break,
        }
    }
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    comps.truncate(count);
    comps
}

fn components(mask: &[f64], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] || mask[start] < 0.5 {
            continue;
        }
        seen[start] = true;
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        while let Some(k) = queue.pop_front() {
            comp.push(k);
            let (i, j) = (k / w, k % w);
            let nbrs = [
                (i > 0).then(|| k - w),
                (i + 1 < h).then(|| k + w),
                (j > 0).then(|| k - 1),
                (j + 1 < w).then(|| k + 1),
            ];
            for nb in nbrs.into_iter().flatten() {
                if !seen[nb] && mask[nb] >= 0.5 {
                    seen[nb] = true;
                    queue.push_back(nb);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

fn two_means(pixels: &[usize], w: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let pos = |k: usize| [(k % w) as f64, (k / w) as f64];
    let a = rng.random_range(0..pixels.len());
    // Second seed: the pixel farthest from the first.
    let pa = pos(pixels[a]);
    let b = (0..pixels.len())
        .max_by(|&x, &y| {
            let dx = dist2(pos(pixels[x]), pa);
            let dy = dist2(pos(pixels[y]), pa);
            dx.total_cmp(&dy).then(y.cmp(&x))
        })
        .unwrap_or(0);
    let mut c = [pa, pos(pixels[b])];
    let mut assign = vec![false; pixels.len()];
    for _ in 0..KMEANS_STEPS {
        let mut sum = [[0.0; 2]; 2];
        let mut cnt = [0usize; 2];
        for (s, &k) in assign.iter_mut().zip(pixels) {
            let p = pos(k);
            *s = dist2(p, c[1]) < dist2(p, c[0]);
            let g = usize::from(*s);
            sum[g][0] += p[0];
            sum[g][1] += p[1];
            cnt[g] += 1;
        }
        for g in 0..2 {
            if cnt[g] > 0 {
                c[g] = [sum[g][0] / cnt[g] as f64, sum[g][1] / cnt[g] as f64];
            }
        }
    }
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for (&s, &k) in assign.iter().zip(pixels) {
        if s {
            second.push(k);
        } else {
            first.push(k);
        }
    }
    if first.is_empty() || second.is_empty() {
        let mid = pixels.len() / 2;
        return (pixels[..mid].to_vec(), pixels[mid..].to_vec());
    }
    (first, second)
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}
