//! Differentiable forward model used by the fit.
//!
//! The forward pass goes parameters -> TPS per layer and frame -> preimages
//! `u = TPS^-1(q)` -> raw masks sampled from the intrinsic canvases ->
//! semantic refinement over each layer's tube -> occlusion -> losses. The
//! reverse pass is written by hand. Preimages are differentiated through
//! the implicit relation `TPS(u) = q`, i.e. `du = -J^-1 dTPS`.

use crate::error::Result;
use crate::layers::{filter_classes, SegMap};
use crate::parallel;
use crate::raster::{pixel_to_norm, FlowField, Mask};
use crate::tps::{accumulate_basis, TpsSolver, TpsTransform};
use crate::warp::{invert_tps, InverseMap, DEFAULT_REACH};

use super::losses::{entropy_grad, mask_entropy, nearest};
use super::{LossWeights, PseudoLabels};

const PIXEL_CHUNK: usize = 2048;

/// Free parameters of a decomposition at fit resolution.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Params {
    /// `points[layer][t][j]`, normalized frame coordinates.
    pub points: Vec<Vec<Vec<[f64; 2]>>>,
    /// `depth[layer][t]`; the background stays at 0.
    pub depth: Vec<Vec<f64>>,
    /// Intrinsic mask logits per layer (empty for the background).
    pub logits: Vec<Vec<f64>>,
    pub class_logits: Vec<Vec<f64>>,
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        Params {
            points: self.points.iter().map(|l| l.iter().map(|t| vec![[0.0; 2]; t.len()]).collect()).collect(),
            depth: self.depth.iter().map(|d| vec![0.0; d.len()]).collect(),
            logits: self.logits.iter().map(|z| vec![0.0; z.len()]).collect(),
            class_logits: self.class_logits.iter().map(|z| vec![0.0; z.len()]).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().flatten().flatten().all(|p| p[0].is_finite() && p[1].is_finite())
            && self.depth.iter().flatten().all(|d| d.is_finite())
            && self.logits.iter().flatten().all(|d| d.is_finite())
            && self.class_logits.iter().flatten().all(|d| d.is_finite())
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Everything the losses need besides the parameters.
pub(crate) struct Problem {
    pub height: usize,
    pub width: usize,
    /// Target flows per observed frame; entry 0 only feeds the labels.
    pub flows: Vec<FlowField>,
    pub segs: Vec<SegMap>,
    pub labels: Vec<PseudoLabels>,
    /// One solver per layer.
    pub solvers: Vec<TpsSolver>,
    /// Canvas size per layer (`(0, 0)` for the background).
    pub canvas: Vec<(usize, usize)>,
    pub weights: LossWeights,
    pub k_c: f64,
    pub empty_thresh: f64,
    pub refine: bool,
}

#[derive(Clone, Debug)]
pub(crate) struct Evaluation {
    pub total: f64,
    /// Unweighted `(L_o, L_f, L_r)`.
    pub parts: [f64; 3],
    pub grad: Option<Params>,
}

struct Tube {
    mean: Vec<f64>,
    den: f64,
    /// `sum r s_c` over the tube.
    rs: Vec<f64>,
    /// Refinement factor and whether it is unclamped, per frame and pixel.
    factor: Vec<Vec<f64>>,
    live: Vec<Vec<bool>>,
}

struct PixelOut {
    lo: f64,
    lf: f64,
    lr: f64,
    depth: Vec<f64>,
    init: Vec<[f64; 2]>,
    /// `(pixel, layer, dL/dm~, dL/dF)`.
    grads: Vec<(usize, usize, f64, [f64; 2])>,
}

impl Problem {
    pub fn layers(&self) -> usize {
        self.solvers.len()
    }

    pub fn frames(&self) -> usize {
        self.segs.len()
    }

    pub fn transforms(&self, p: &Params) -> Result<Vec<Vec<TpsTransform>>> {
        (0..self.frames())
            .map(|t| (0..self.layers()).map(|i| self.solvers[i].solve_xy(&p.points[i][t])).collect())
            .collect()
    }

    /// Evaluates the objective with `lambda_f` overriding the configured
    /// flow weight, and its gradient when `with_grad` is set.
    pub fn evaluate(&self, p: &Params, lambda_f: f64, with_grad: bool) -> Result<Evaluation> {
        let (h, w) = (self.height, self.width);
        let hw = h * w;
        let n = self.layers();
        let nt = self.frames();
        let wt = &self.weights;

        let canvases: Vec<Option<Mask>> = (0..n)
            .map(|i| {
                let (ch, cw) = self.canvas[i];
                (i > 0).then(|| Mask::new(ch, cw, p.logits[i].iter().map(|&z| sigmoid(z)).collect()))
            })
            .collect();
        let classes: Vec<Vec<f64>> = p.class_logits.iter().map(|z| softmax(z)).collect();
        let xfs = self.transforms(p)?;
        let inv: Vec<Vec<InverseMap>> =
            xfs.iter().map(|row| row.iter().map(|xf| invert_tps(xf, h, w, DEFAULT_REACH)).collect()).collect();

        // Raw masks r[t][i].
        let raw: Vec<Vec<Vec<f64>>> = (0..nt)
            .map(|t| {
                (0..n)
                    .map(|i| {
                        let im = &inv[t][i];
                        match &canvases[i] {
                            None => im.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
                            Some(c) => parallel::map_indexed(hw, |k| {
                                if im.valid[k] {
                                    c.sample_canvas(im.points[k]).value
                                } else {
                                    0.0
                                }
                            }),
                        }
                    })
                    .collect()
            })
            .collect();

        let tubes: Vec<Option<Tube>> = (0..n).map(|i| self.tube(i, &raw, &classes[i])).collect();
        let filtered: Vec<Vec<Vec<f64>>> = (0..nt)
            .map(|t| {
                (0..n)
                    .map(|i| match &tubes[i] {
                        Some(tb) => raw[t][i].iter().zip(&tb.factor[t]).map(|(r, f)| r * f).collect(),
                        None => raw[t][i].clone(),
                    })
                    .collect()
            })
            .collect();

        // Layer flows F[t][i] in pixels, for t >= 1.
        let (sx, sy) = (w as f64 / 2.0, h as f64 / 2.0);
        let lflows: Vec<Vec<Vec<[f64; 2]>>> = (0..nt)
            .map(|t| {
                if t == 0 {
                    return Vec::new();
                }
                (0..n)
                    .map(|i| {
                        let im = &inv[t][i];
                        let prev = &xfs[t - 1][i];
                        parallel::map_indexed(hw, |k| {
                            if !im.valid[k] {
                                return [0.0; 2];
                            }
                            let u = im.points[k];
                            let o = prev.apply_xy(u[0], u[1]);
                            let q = pixel_q(k, h, w);
                            [(o[0] - q[0]) * sx, (o[1] - q[1]) * sy]
                        })
                    })
                    .collect()
            })
            .collect();

        let mut parts = [0.0; 3];
        let mut grad = with_grad.then(|| p.zeros_like());
        // dL/dm~ and dL/dF per frame and layer.
        let mut dmt = vec![vec![vec![0.0; hw]; n]; if with_grad { nt } else { 0 }];
        let mut dfl = vec![vec![vec![[0.0; 2]; hw]; n]; if with_grad { nt } else { 0 }];

        for t in 0..nt {
            let depths: Vec<f64> = (0..n).map(|i| p.depth[i][t]).collect();
            let obj_points: Vec<[f64; 2]> = (1..n).flat_map(|i| p.points[i][t].iter().copied()).collect();
            let mt = &filtered[t];
            let count = if t == 0 {
                0
            } else {
                (0..hw)
                    .filter(|&k| self.flows[t].valid[k] && visible_any(mt, &depths, k))
                    .count()
            };
            let lam_f = if count > 0 { lambda_f / count as f64 } else { 0.0 };
            let chunks = parallel::map_chunks(hw, PIXEL_CHUNK, |range| {
                let mut out = PixelOut {
                    lo: 0.0,
                    lf: 0.0,
                    lr: 0.0,
                    depth: vec![0.0; n],
                    init: vec![[0.0; 2]; obj_points.len()],
                    grads: Vec::new(),
                };
                let mut active = Vec::with_capacity(n);
                let mut m = vec![0.0; n];
                let mut gm = vec![0.0; n];
                for k in range {
                    active.clear();
                    active.extend((0..n).filter(|&i| mt[i][k] > 0.0));
                    for &i in &active {
                        m[i] = mt[i][k] * others(&active, i, usize::MAX, |j| 1.0 - alpha(&depths, i, j) * mt[j][k]);
                    }
                    let l = &self.labels[t];
                    let c = wt.k_s * l.stuff.data[k] - wt.k_m * l.moving_fg.data[k];
                    let top = active.iter().filter(|&&i| i > 0).map(|&i| (i, m[i])).fold(None, |b, x| match b {
                        Some((_, v)) if v >= x.1 => b,
                        _ => Some(x),
                    });
                    let top_val = top.map_or(0.0, |x| x.1);
                    out.lo += c * top_val;
                    let vals: Vec<f64> = active.iter().map(|&i| m[i]).collect();
                    out.lr += mask_entropy(&vals);
                    let q = pixel_q(k, h, w);
                    let mut init_hit = None;
                    if l.moving_fg.data[k] > 0.5 && top_val < self.empty_thresh {
                        if let Some((j, d)) = nearest(obj_points.iter().copied(), q) {
                            out.lr += d;
                            init_hit = Some((j, d));
                        }
                    }
                    let mut fhat = [0.0; 2];
                    let mut err = None;
                    if t > 0 && self.flows[t].valid[k] && vals.iter().any(|&v| v > 0.0) {
                        for &i in &active {
                            let f = lflows[t][i][k];
                            fhat[0] += m[i] * f[0];
                            fhat[1] += m[i] * f[1];
                        }
                        let e = [fhat[0] - self.flows[t].u[k], fhat[1] - self.flows[t].v[k]];
                        out.lf += e[0].abs() + e[1].abs();
                        err = Some([sign(e[0]), sign(e[1])]);
                    }
                    if !with_grad {
                        continue;
                    }

                    for &i in &active {
                        gm[i] = 0.0;
                    }
                    if let Some((i, _)) = top {
                        gm[i] += wt.lambda_o * c / hw as f64;
                    }
                    let mut ge = vec![0.0; active.len()];
                    entropy_grad(&vals, wt.lambda_r / hw as f64, &mut ge);
                    for (a, &i) in active.iter().enumerate() {
                        gm[i] += ge[a];
                    }
                    if let Some((j, d)) = init_hit {
                        if d > 0.0 {
                            let s = wt.lambda_r / hw as f64 / d;
                            out.init[j][0] += s * (obj_points[j][0] - q[0]);
                            out.init[j][1] += s * (obj_points[j][1] - q[1]);
                        }
                    }
                    let mut gf = vec![[0.0; 2]; active.len()];
                    if let Some(sg) = err {
                        let g = [lam_f * sg[0], lam_f * sg[1]];
                        for (a, &i) in active.iter().enumerate() {
                            let f = lflows[t][i][k];
                            gm[i] += g[0] * f[0] + g[1] * f[1];
                            gf[a] = [g[0] * m[i], g[1] * m[i]];
                        }
                    }
                    // Occlusion backward.
                    let mut gmt = vec![0.0; active.len()];
                    for (a, &i) in active.iter().enumerate() {
                        if gm[i] == 0.0 {
                            continue;
                        }
                        let bf = |j: usize| 1.0 - alpha(&depths, i, j) * mt[j][k];
                        gmt[a] += gm[i] * others(&active, i, usize::MAX, bf);
                        for (b, &j) in active.iter().enumerate() {
                            if j == i {
                                continue;
                            }
                            let rest = gm[i] * mt[i][k] * others(&active, i, j, bf);
                            gmt[b] -= rest * alpha(&depths, i, j);
                            let (oi, oj) = (depths[i], depths[j]);
                            let s = oi + oj;
                            if s > 0.0 {
                                let da = -rest * mt[j][k];
                                out.depth[j] += da * oi / (s * s);
                                out.depth[i] -= da * oj / (s * s);
                            }
                        }
                    }
                    for (a, &i) in active.iter().enumerate() {
                        if gmt[a] != 0.0 || gf[a] != [0.0, 0.0] {
                            out.grads.push((k, i, gmt[a], gf[a]));
                        }
                    }
                }
                out
            });

            let (mut lo, mut lf, mut lr) = (0.0, 0.0, 0.0);
            for ch in chunks {
                lo += ch.lo;
                lf += ch.lf;
                lr += ch.lr;
                if let Some(g) = grad.as_mut() {
                    for i in 1..n {
                        g.depth[i][t] += ch.depth[i];
                    }
                    let mut idx = 0;
                    for i in 1..n {
                        for pt in g.points[i][t].iter_mut() {
                            pt[0] += ch.init[idx][0];
                            pt[1] += ch.init[idx][1];
                            idx += 1;
                        }
                    }
                    for (k, i, a, f) in ch.grads {
                        dmt[t][i][k] += a;
                        dfl[t][i][k] = f;
                    }
                }
            }
            parts[0] += lo / hw as f64;
            parts[1] += if count > 0 { lf / count as f64 } else { 0.0 };
            parts[2] += lr / hw as f64;
        }
        let total = wt.lambda_o * parts[0] + lambda_f * parts[1] + wt.lambda_r * parts[2];

        if let Some(g) = grad.as_mut() {
            self.backward(g, &xfs, &inv, &raw, &tubes, &classes, &canvases, &dmt, &dfl);
        }
        Ok(Evaluation { total, parts, grad })
    }

    fn tube(&self, i: usize, raw: &[Vec<Vec<f64>>], class: &[f64]) -> Option<Tube> {
        if i == 0 || !self.refine {
            return None;
        }
        let nc = class.len();
        let mut num = vec![0.0; nc];
        let mut rs = vec![0.0; nc];
        let mut den = 0.0;
        let mut filt = vec![0.0; nc];
        for (t, seg) in self.segs.iter().enumerate() {
            for (k, &r) in raw[t][i].iter().enumerate() {
                if r == 0.0 {
                    continue;
                }
                let s = seg.pixel(k);
                filter_classes(s, class, self.k_c, &mut filt);
                for c in 0..nc {
                    num[c] += r * filt[c];
                    rs[c] += r * s[c];
                }
                den += r;
            }
        }
        if den == 0.0 {
            return None;
        }
        let mean: Vec<f64> = num.iter().map(|v| v / den).collect();
        let mut factor = Vec::with_capacity(self.segs.len());
        let mut live = Vec::with_capacity(self.segs.len());
        for seg in &self.segs {
            let (f, l): (Vec<f64>, Vec<bool>) = (0..seg.height * seg.width)
                .map(|k| {
                    let d: f64 = seg.pixel(k).iter().zip(&mean).map(|(a, b)| (a - b).abs()).sum();
                    ((1.0 - d).clamp(0.0, 1.0), d < 1.0)
                })
                .unzip();
            factor.push(f);
            live.push(l);
        }
        Some(Tube { mean, den, rs, factor, live })
    }

    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        g: &mut Params,
        xfs: &[Vec<TpsTransform>],
        inv: &[Vec<InverseMap>],
        raw: &[Vec<Vec<f64>>],
        tubes: &[Option<Tube>],
        classes: &[Vec<f64>],
        canvases: &[Option<Mask>],
        dmt: &[Vec<Vec<f64>>],
        dfl: &[Vec<Vec<[f64; 2]>>],
    ) {
        let (h, w) = (self.height, self.width);
        let hw = h * w;
        let n = self.layers();
        let nt = self.frames();
        let (sx, sy) = (w as f64 / 2.0, h as f64 / 2.0);

        for i in 0..n {
            // Gradient with respect to the tube mean class, then to raw masks
            // and class logits.
            let mut dr: Vec<Vec<f64>> = (0..nt).map(|t| dmt[t][i].clone()).collect();
            if let Some(tb) = &tubes[i] {
                let nc = tb.mean.len();
                let mut gbar = vec![0.0; nc];
                for t in 0..nt {
                    let seg = &self.segs[t];
                    for k in 0..hw {
                        let gk = dmt[t][i][k];
                        dr[t][k] = gk * tb.factor[t][k];
                        if gk == 0.0 || !tb.live[t][k] {
                            continue;
                        }
                        let r = raw[t][i][k];
                        for (c, s) in seg.pixel(k).iter().enumerate() {
                            gbar[c] += gk * r * sign(s - tb.mean[c]);
                        }
                    }
                }
                if gbar.iter().any(|v| *v != 0.0) {
                    let mut filt = vec![0.0; nc];
                    for t in 0..nt {
                        for k in 0..hw {
                            if raw[t][i][k] == 0.0 {
                                continue;
                            }
                            filter_classes(self.segs[t].pixel(k), &classes[i], self.k_c, &mut filt);
                            dr[t][k] += (0..nc).map(|c| gbar[c] * (filt[c] - tb.mean[c])).sum::<f64>() / tb.den;
                        }
                    }
                    let dcls: Vec<f64> =
                        (0..nc).map(|c| gbar[c] * tb.rs[c] / ((1.0 + self.k_c) * tb.den)).collect();
                    let cl = &classes[i];
                    let dot: f64 = cl.iter().zip(&dcls).map(|(a, b)| a * b).sum();
                    for c in 0..nc {
                        g.class_logits[i][c] += cl[c] * (dcls[c] - dot);
                    }
                }
            }

            let grid = self.solvers[i].grid();
            let l3 = grid.len() + 3;
            let csize = canvases[i].as_ref().map_or(0, |c| c.data.len());
            for t in 0..nt {
                let im = &inv[t][i];
                let cur = &xfs[t][i];
                let prev = (t > 0).then(|| &xfs[t - 1][i]);
                let drt = &dr[t];
                let dft = &dfl[t][i];
                let canvas = canvases[i].as_ref();
                let (acc_t, acc_prev, dlog) = parallel::fold_chunks(
                    hw,
                    PIXEL_CHUNK,
                    || (vec![[0.0; 2]; l3], vec![[0.0; 2]; l3], vec![0.0; csize]),
                    |acc, k| {
                        if !im.valid[k] {
                            return;
                        }
                        let u = im.points[k];
                        let mut du = [0.0; 2];
                        if let Some(c) = canvas {
                            if drt[k] != 0.0 {
                                let s = c.sample_canvas(u);
                                if let Some(taps) = s.taps {
                                    for (idx, wgt) in taps {
                                        let a = c.data[idx];
                                        acc.2[idx] += drt[k] * wgt * a * (1.0 - a);
                                    }
                                    du[0] += drt[k] * s.grad[0];
                                    du[1] += drt[k] * s.grad[1];
                                }
                            }
                        }
                        if let Some(prev) = prev {
                            let gf = dft[k];
                            if gf != [0.0, 0.0] {
                                let gn = [gf[0] * sx, gf[1] * sy];
                                accumulate_basis(grid, u[0], u[1], gn, &mut acc.1);
                                let (_, jp) = prev.apply_with_jacobian(u[0], u[1]);
                                du[0] += jp[0][0] * gn[0] + jp[1][0] * gn[1];
                                du[1] += jp[0][1] * gn[0] + jp[1][1] * gn[1];
                            }
                        }
                        if du == [0.0, 0.0] {
                            return;
                        }
                        // u solves cur(u) = q: dL/dcur = -J^-T du.
                        let (_, j) = cur.apply_with_jacobian(u[0], u[1]);
                        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
                        if det.abs() < 1e-12 {
                            return;
                        }
                        let y0 = (j[1][1] * du[0] - j[1][0] * du[1]) / det;
                        let y1 = (-j[0][1] * du[0] + j[0][0] * du[1]) / det;
                        accumulate_basis(grid, u[0], u[1], [-y0, -y1], &mut acc.0);
                    },
                    |mut a, b| {
                        add_pairs(&mut a.0, &b.0);
                        add_pairs(&mut a.1, &b.1);
                        for (x, y) in a.2.iter_mut().zip(&b.2) {
                            *x += y;
                        }
                        a
                    },
                );
                add_pairs(&mut g.points[i][t], &self.solvers[i].backprop_coefficients(&acc_t));
                if t > 0 {
                    add_pairs(&mut g.points[i][t - 1], &self.solvers[i].backprop_coefficients(&acc_prev));
                }
                for (x, y) in g.logits[i].iter_mut().zip(&dlog) {
                    *x += y;
                }
            }
        }
    }
}

fn add_pairs(a: &mut [[f64; 2]], b: &[[f64; 2]]) {
    for (x, y) in a.iter_mut().zip(b) {
        x[0] += y[0];
        x[1] += y[1];
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn pixel_q(k: usize, h: usize, w: usize) -> [f64; 2] {
    [pixel_to_norm((k % w) as f64, w), pixel_to_norm((k / w) as f64, h)]
}

/// Weight with which layer `j` occludes layer `i`.
#[inline]
fn alpha(depths: &[f64], i: usize, j: usize) -> f64 {
    crate::layers::occlusion_weight(depths[i], depths[j])
}

/// Product of `f(j)` over active layers other than `i` and `skip`.
#[inline]
fn others(active: &[usize], i: usize, skip: usize, f: impl Fn(usize) -> f64) -> f64 {
    active.iter().filter(|&&j| j != i && j != skip).map(|&j| f(j)).product()
}

fn visible_any(mt: &[Vec<f64>], depths: &[f64], k: usize) -> bool {
    let n = mt.len();
    (0..n).any(|i| {
        mt[i][k] > 0.0 && (0..n).filter(|&j| j != i).all(|j| 1.0 - alpha(depths, i, j) * mt[j][k] > 0.0)
    })
}
