//! Future frame synthesis: warp past frames along the layer motions, fuse
//! the candidate views, and fill what no view covers.

use crate::decompose::SceneDecomposition;
use crate::error::{check_size, Error, Result};
use crate::forecast::TrajectorySet;
use crate::layers::{background_mask, occlusion_filter, sample_mask};
use crate::parallel::map_indexed;
use crate::raster::{bilinear_taps, FlowField, Image, Mask};
use crate::tps::TpsSolver;
use crate::warp::{chain_flow, invert_tps, warp_image, InverseMap, DEFAULT_REACH};

/// Confidence given to propagated candidates. They only count where no
/// rendered candidate is valid.
pub const PROPAGATED_CONFIDENCE: f64 = 1e-3;

/// Candidate views of one future step.
#[derive(Clone, Debug)]
pub struct ViewStack {
    /// Time index of the future frame.
    pub step: usize,
    pub candidates: Vec<Image>,
    pub valid: Vec<Vec<bool>>,
    /// Per-pixel confidence in [0, 1].
    pub confidence: Vec<Vec<f64>>,
    /// Source frame of each candidate; `None` for propagated fills.
    pub sources: Vec<Option<usize>>,
}

impl ViewStack {
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.candidates.first().map(Image::dims)
    }

    fn push(&mut self, img: Image, valid: Vec<bool>, confidence: Vec<f64>, source: Option<usize>) {
        self.candidates.push(img);
        self.valid.push(valid);
        self.confidence.push(confidence);
        self.sources.push(source);
    }
}

/// Per-layer state of one time step at frame resolution.
struct Frame {
    inverses: Vec<InverseMap>,
    visible: Vec<Mask>,
}

fn frame_state(d: &SceneDecomposition, solvers: &[TpsSolver], t: usize) -> Result<Frame> {
    let (h, w) = (d.height, d.width);
    let xfs = d.transforms(solvers, t)?;
    let inverses: Vec<InverseMap> = xfs.iter().map(|xf| invert_tps(xf, h, w, DEFAULT_REACH)).collect();
    let raw: Vec<Mask> = inverses
        .iter()
        .enumerate()
        .map(|(i, inv)| if i == 0 { background_mask(inv) } else { sample_mask(&d.stack.intrinsic[i], inv) })
        .collect();
    let visible = occlusion_filter(&raw, &d.depths(t))?.masks;
    Ok(Frame { inverses, visible })
}

fn sample_scalar(m: &Mask, x: f64, y: f64) -> Option<f64> {
    bilinear_taps(m.height, m.width, x, y).map(|taps| taps.iter().map(|&(k, wt)| wt * m.data[k]).sum())
}

/// Masks of frame `later` obtained by carrying the visible masks of
/// `earlier` along each layer's warp, occlusion-filtered with the depths of
/// `later`, and the mask-normalized composite backward flow.
fn carried(d: &SceneDecomposition, solvers: &[TpsSolver], earlier: &Frame, t1: usize, later: &Frame, t2: usize) -> Result<(Vec<Mask>, FlowField)> {
    let (h, w) = (d.height, d.width);
    let xf1 = d.transforms(solvers, t1)?;
    let flows: Vec<FlowField> = xf1.iter().zip(&later.inverses).map(|(a, inv)| chain_flow(a, inv)).collect();
    let moved: Vec<Mask> = flows
        .iter()
        .zip(&earlier.visible)
        .map(|(f, m)| {
            let data = map_indexed(h * w, |k| {
                if !f.valid[k] {
                    return 0.0;
                }
                sample_scalar(m, (k % w) as f64 + f.u[k], (k / w) as f64 + f.v[k]).unwrap_or(0.0)
            });
            Mask::new(h, w, data)
        })
        .collect();
    let masks = occlusion_filter(&moved, &d.depths(t2))?.masks;
    Ok((masks.clone(), normalized_composite(&flows, &masks)))
}

fn normalized_composite(flows: &[FlowField], masks: &[Mask]) -> FlowField {
    let (h, w) = flows[0].dims();
    let mut out = FlowField::zeros(h, w);
    for k in 0..h * w {
        let (mut mass, mut u, mut v) = (0.0, 0.0, 0.0);
        for (f, m) in flows.iter().zip(masks) {
            let wt = m.data[k];
            if wt > 0.0 && f.valid[k] {
                mass += wt;
                u += wt * f.u[k];
                v += wt * f.v[k];
            }
        }
        out.valid[k] = mass > 1e-6;
        if out.valid[k] {
            out.u[k] = u / mass;
            out.v[k] = v / mass;
        }
    }
    out
}

/// Candidate views for every predicted step of `future`, one per observed
/// frame. The confidence of a view is the carried mask coverage, times a
/// recency weight growing linearly with the source time.
pub fn render_views(frames: &[Image], decomp: &SceneDecomposition, future: &TrajectorySet) -> Result<Vec<ViewStack>> {
    let d = future.apply_to(decomp)?;
    let t = d.observed;
    if frames.len() < t {
        return Err(Error::SizeMismatch(format!("{} frames for {t} observed steps", frames.len())));
    }
    for f in &frames[..t] {
        check_size("frame", (d.height, d.width), f.dims())?;
    }
    let solvers = d.solvers()?;
    let past: Vec<Frame> = (0..t).map(|s| frame_state(&d, &solvers, s)).collect::<Result<_>>()?;
    (t..d.frames())
        .map(|t2| {
            let target = frame_state(&d, &solvers, t2)?;
            let mut stack = ViewStack { step: t2, candidates: vec![], valid: vec![], confidence: vec![], sources: vec![] };
            for (t1, src) in past.iter().enumerate() {
                let (masks, flow) = carried(&d, &solvers, src, t1, &target, t2)?;
                let (img, valid) = warp_image(&frames[t1], &flow)?;
                let recency = (t1 + 1) as f64 / t as f64;
                let conf: Vec<f64> = (0..valid.len())
                    .map(|k| {
                        let cover: f64 = masks.iter().map(|m| m.data[k]).sum();
                        if valid[k] {
                            cover.clamp(0.0, 1.0) * recency
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let valid = valid.iter().zip(&conf).map(|(&v, &c)| v && c > 0.0).collect();
                stack.push(img, valid, conf, Some(t1));
            }
            Ok(stack)
        })
        .collect()
}

/// Confidence-weighted average of the valid candidates. Propagated
/// candidates are used only where no rendered candidate is valid. Returns
/// the fused image and the hole mask (true where nothing was valid).
pub fn fuse_views(stack: &ViewStack) -> Result<(Image, Vec<bool>)> {
    let Some((h, w)) = stack.dims() else {
        return Err(Error::InvalidArgument("empty view stack".into()));
    };
    let ch = stack.candidates[0].channels;
    for c in &stack.candidates {
        check_size("candidate", (h, w), c.dims())?;
        if c.channels != ch {
            return Err(Error::SizeMismatch("candidate channels differ".into()));
        }
    }
    let mut data = vec![0.0; h * w * ch];
    let mut holes = vec![true; h * w];
    let tiers = [true, false];
    for k in 0..h * w {
        for genuine in tiers {
            let mut wsum = 0.0;
            let mut acc = vec![0.0; ch];
            let mut any = false;
            for (n, img) in stack.candidates.iter().enumerate() {
                if stack.sources[n].is_some() != genuine || !stack.valid[n][k] {
                    continue;
                }
                any = true;
                // A floor keeps a valid candidate usable if its confidence
                // underflows.
                let wt = stack.confidence[n][k].max(1e-12);
                wsum += wt;
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += wt * img.data[k * ch + c];
                }
            }
            if any {
                for c in 0..ch {
                    data[k * ch + c] = acc[c] / wsum;
                }
                holes[k] = false;
                break;
            }
        }
    }
    Ok((Image::new(h, w, ch, data), holes))
}

/// Fills hole pixels by pull-push averaging over an image pyramid. Pixels
/// outside `holes` are returned unchanged.
pub fn fill_holes(img: &Image, holes: &[bool]) -> Result<Image> {
    let (h, w, ch) = (img.height, img.width, img.channels);
    if holes.len() != h * w {
        return Err(Error::SizeMismatch(format!("{} hole flags for {} pixels", holes.len(), h * w)));
    }
    if !holes.iter().any(|&x| x) || holes.iter().all(|&x| x) {
        return Ok(img.clone());
    }
    // Level 0: premultiplied colors and weights.
    let weights: Vec<f64> = holes.iter().map(|&x| if x { 0.0 } else { 1.0 }).collect();
    let mut levels = vec![(h, w, img.data.clone(), weights)];
    while {
        let (lh, lw, _, _) = levels.last().unwrap();
        *lh > 1 || *lw > 1
    } {
        let (lh, lw, c, wt) = levels.last().unwrap();
        let (nh, nw) = (lh.div_ceil(2), lw.div_ceil(2));
        let mut nc = vec![0.0; nh * nw * ch];
        let mut nwt = vec![0.0; nh * nw];
        for i in 0..nh {
            for j in 0..nw {
                let (mut s, mut acc) = (0.0, vec![0.0; ch]);
                for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let (y, x) = (2 * i + a, 2 * j + b);
                    if y >= *lh || x >= *lw {
                        continue;
                    }
                    let k = y * lw + x;
                    s += wt[k];
                    for (q, v) in acc.iter_mut().enumerate() {
                        *v += wt[k] * c[k * ch + q];
                    }
                }
                let o = i * nw + j;
                if s > 0.0 {
                    for q in 0..ch {
                        nc[o * ch + q] = acc[q] / s;
                    }
                }
                nwt[o] = s.min(1.0);
            }
        }
        levels.push((nh, nw, nc, nwt));
    }
    // Push: blend each level with the bilinear upsampling of the coarser one.
    for l in (0..levels.len() - 1).rev() {
        let (ph, pw, pc, _) = levels[l + 1].clone();
        let (lh, lw, c, wt) = &mut levels[l];
        for i in 0..*lh {
            for j in 0..*lw {
                let k = i * *lw + j;
                if wt[k] >= 1.0 {
                    continue;
                }
                let y = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (ph - 1) as f64);
                let x = ((j as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (pw - 1) as f64);
                let taps = bilinear_taps(ph, pw, x, y).expect("clamped into the raster");
                for q in 0..ch {
                    let up: f64 = taps.iter().map(|&(p, tw)| tw * pc[p * ch + q]).sum();
                    c[k * ch + q] = wt[k] * c[k * ch + q] + (1.0 - wt[k]) * up;
                }
                wt[k] = 1.0;
            }
        }
    }
    let mut out = img.clone();
    for k in (0..h * w).filter(|&k| holes[k]) {
        out.data[k * ch..(k + 1) * ch].copy_from_slice(&levels[0].2[k * ch..(k + 1) * ch]);
    }
    Ok(out)
}

/// Adds the filled frame of the previous step, warped by the backward flow
/// from the next step to it, as a low-confidence candidate of `next`.
pub fn propagate_fill(filled: &Image, flow_next: &FlowField, next: &ViewStack) -> Result<ViewStack> {
    if let Some(dims) = next.dims() {
        check_size("next step", dims, filled.dims())?;
    }
    let (img, valid) = warp_image(filled, flow_next)?;
    let conf = valid.iter().map(|&v| if v { PROPAGATED_CONFIDENCE } else { 0.0 }).collect();
    let mut out = next.clone();
    out.push(img, valid, conf, None);
    Ok(out)
}

/// Mean absolute difference over pixels and channels.
pub fn pixel_l1(pred: &Image, reference: &Image) -> Result<f64> {
    pred.check_same(reference)?;
    let n = pred.data.len().max(1) as f64;
    Ok(pred.data.iter().zip(&reference.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

/// Synthesized future frames with their pre-fill hole masks.
#[derive(Clone, Debug)]
pub struct Synthesis {
    pub frames: Vec<Image>,
    pub holes: Vec<Vec<bool>>,
}

impl Synthesis {
    pub fn hole_area(&self) -> Vec<usize> {
        self.holes.iter().map(|h| h.iter().filter(|&&x| x).count()).collect()
    }
}

/// Renders, fuses and fills every predicted step. With `propagate`, steps
/// are processed in order and each filled frame is carried to the next
/// step along the predicted motion.
pub fn synthesize(frames: &[Image], decomp: &SceneDecomposition, future: &TrajectorySet, propagate: bool) -> Result<Synthesis> {
    let stacks = render_views(frames, decomp, future)?;
    let d = future.apply_to(decomp)?;
    let mut out = Synthesis { frames: Vec::with_capacity(stacks.len()), holes: Vec::with_capacity(stacks.len()) };
    let mut prev: Option<Image> = None;
    for stack in stacks {
        let stack = match (&prev, propagate) {
            (Some(p), true) => propagate_fill(p, &d.flow_normalized(stack.step - 1, stack.step)?, &stack)?,
            _ => stack,
        };
        let (img, holes) = fuse_views(&stack)?;
        let filled = fill_holes(&img, &holes)?;
        prev = Some(filled.clone());
        out.frames.push(filled);
        out.holes.push(holes);
    }
    Ok(out)
}

impl SceneDecomposition {
    /// Backward flow from `later` to `earlier` composited with
    /// mask-normalized weights of the visible masks of `later`.
    pub fn flow_normalized(&self, earlier: usize, later: usize) -> Result<FlowField> {
        let flows = self.layer_flows(earlier, later, self.height, self.width)?;
        let masks = self.visible_masks(later, self.height, self.width)?;
        Ok(normalized_composite(&flows, &masks))
    }
}
