//! Layer masks: warping intrinsic masks into frames, semantic refinement,
//! depth-ordered occlusion and flow compositing.

use serde::{Deserialize, Serialize};

use crate::error::{check_size, Error, Result};
use crate::parallel;
use crate::raster::{FlowField, Mask};
use crate::tps::TpsTransform;
use crate::warp::{invert_tps, InverseMap, DEFAULT_REACH};

/// Canvas pixels per grid cell along each axis for object layers.
pub const CANVAS_PER_GRID: usize = 16;

/// Default filtering constant of semantic refinement.
pub const DEFAULT_K_C: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub name: String,
    /// Static-scene ("stuff") class such as road or building.
    pub stuff: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTable {
    pub classes: Vec<ClassInfo>,
}

impl ClassTable {
    pub fn new(classes: Vec<ClassInfo>) -> Self {
        Self { classes }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn is_stuff(&self, class: usize) -> bool {
        self.classes[class].stuff
    }

    /// Merges groups of classes that form one entity (e.g. rider and
    /// bicycle). Returns the reduced table and, for every original class,
    /// its index in the reduced table. A group takes the name of its first
    /// member and counts as stuff only if all members are stuff.
    pub fn merge_groups(&self, groups: &[&[&str]]) -> (ClassTable, Vec<usize>) {
        let mut remap = vec![usize::MAX; self.len()];
        let mut merged: Vec<ClassInfo> = Vec::new();
        for (idx, class) in self.classes.iter().enumerate() {
            if remap[idx] != usize::MAX {
                continue;
            }
            let group = groups.iter().find(|g| g.contains(&class.name.as_str()));
            let new_idx = merged.len();
            let mut info = class.clone();
            match group {
                Some(g) => {
                    for (k, other) in self.classes.iter().enumerate() {
                        if g.contains(&other.name.as_str()) {
                            remap[k] = new_idx;
                            info.stuff &= other.stuff;
                        }
                    }
                }
                None => remap[idx] = new_idx,
            }
            merged.push(info);
        }
        (ClassTable::new(merged), remap)
    }
}

/// Groups merged before fitting: classes that move as one entity.
pub const DEFAULT_CLASS_GROUPS: &[&[&str]] = &[&["rider", "bicycle"], &["traffic sign", "pole"]];

/// Per-pixel soft class distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMap {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Pixel-major probabilities: `probs[k * classes + c]`.
    pub probs: Vec<f64>,
}

impl SegMap {
    pub fn new(height: usize, width: usize, classes: usize, probs: Vec<f64>) -> Self {
        assert_eq!(probs.len(), height * width * classes, "segmentation data length");
        Self { height, width, classes, probs }
    }

    /// One-hot map from hard labels.
    pub fn from_labels(height: usize, width: usize, classes: usize, labels: &[usize]) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::SizeMismatch(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        let mut probs = vec![0.0; height * width * classes];
        for (k, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::InvalidArgument(format!("label {l} outside {classes} classes")));
            }
            probs[k * classes + l] = 1.0;
        }
        Ok(Self::new(height, width, classes, probs))
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn pixel(&self, k: usize) -> &[f64] {
        &self.probs[k * self.classes..(k + 1) * self.classes]
    }

    pub fn argmax(&self, k: usize) -> usize {
        let p = self.pixel(k);
        (0..self.classes).fold(0, |best, c| if p[c] > p[best] { c } else { best })
    }

    /// Maps classes through `remap` (e.g. from [`ClassTable::merge_groups`]),
    /// summing merged probabilities.
    pub fn regroup(&self, remap: &[usize], classes: usize) -> SegMap {
        let mut probs = vec![0.0; self.height * self.width * classes];
        for k in 0..self.height * self.width {
            for (c, p) in self.pixel(k).iter().enumerate() {
                probs[k * classes + remap[c]] += p;
            }
        }
        SegMap::new(self.height, self.width, classes, probs)
    }
}

/// Masks of all layers of a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    /// Intrinsic mask per layer; layer 0 (background) is all ones.
    pub intrinsic: Vec<Mask>,
    /// Visible masks per layer and time step at frame resolution (may be
    /// empty when not materialized).
    pub warped: Vec<Vec<Mask>>,
    /// Soft class assignment per layer.
    pub classes: Vec<Vec<f64>>,
}

impl LayerStack {
    pub fn layer_count(&self) -> usize {
        self.intrinsic.len()
    }
}

/// Samples an intrinsic mask through precomputed preimages; invalid
/// preimages and samples outside the canvas read 0.
pub fn sample_mask(a: &Mask, preimage: &InverseMap) -> Mask {
    let data = parallel::map_indexed(preimage.height * preimage.width, |k| {
        if preimage.valid[k] {
            a.sample_canvas(preimage.points[k]).value
        } else {
            0.0
        }
    });
    Mask::new(preimage.height, preimage.width, data)
}

/// Warps the intrinsic mask `a` into an `height x width` frame through the
/// inverse of `xf`.
pub fn warp_mask(a: &Mask, xf: &TpsTransform, height: usize, width: usize) -> Mask {
    sample_mask(a, &invert_tps(xf, height, width, DEFAULT_REACH))
}

/// Background mask: ones wherever the background warp is invertible.
pub fn background_mask(preimage: &InverseMap) -> Mask {
    Mask::new(
        preimage.height,
        preimage.width,
        preimage.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    )
}

#[derive(Clone, Debug)]
pub struct Refinement {
    pub masks: Vec<Mask>,
    /// Mask-weighted mean filtered class over the tube.
    pub mean_class: Vec<f64>,
    /// The tube had no mass; masks were returned unchanged.
    pub empty: bool,
}

/// Class-filtered segmentation at one pixel: `s_c (c_c + k_c) / (1 + k_c)`.
#[inline]
pub fn filter_classes(s: &[f64], class: &[f64], k_c: f64, out: &mut [f64]) {
    for ((o, s), c) in out.iter_mut().zip(s).zip(class) {
        *o = s * (c + k_c) / (1.0 + k_c);
    }
}

/// Refinement factor at one pixel: `clamp(1 - |s - mean|_1, 0, 1)`.
#[inline]
pub fn refine_factor(s: &[f64], mean_class: &[f64]) -> f64 {
    let d: f64 = s.iter().zip(mean_class).map(|(a, b)| (a - b).abs()).sum();
    (1.0 - d).clamp(0.0, 1.0)
}

/// Attenuates mask pixels whose class distribution deviates from the mean
/// filtered class of the spatio-temporal tube the masks define.
pub fn semantic_refine(masks: &[Mask], class: &[f64], segs: &[SegMap], k_c: f64) -> Result<Refinement> {
    if !(k_c > 0.0) {
        return Err(Error::InvalidArgument(format!("k_c must be positive, got {k_c}")));
    }
    if masks.len() != segs.len() {
        return Err(Error::SizeMismatch(format!("{} masks vs {} segmentation maps", masks.len(), segs.len())));
    }
    let nc = class.len();
    let mut num = vec![0.0; nc];
    let mut den = 0.0;
    let mut filt = vec![0.0; nc];
    for (m, s) in masks.iter().zip(segs) {
        check_size("mask vs segmentation", m.dims(), s.dims())?;
        if s.classes != nc {
            return Err(Error::SizeMismatch(format!("{} seg classes vs {nc} class scores", s.classes)));
        }
        for (k, &mv) in m.data.iter().enumerate() {
            if mv == 0.0 {
                continue;
            }
            filter_classes(s.pixel(k), class, k_c, &mut filt);
            for (n, f) in num.iter_mut().zip(&filt) {
                *n += mv * f;
            }
            den += mv;
        }
    }
    if den == 0.0 {
        return Ok(Refinement { masks: masks.to_vec(), mean_class: vec![0.0; nc], empty: true });
    }
    let mean_class: Vec<f64> = num.iter().map(|n| n / den).collect();
    let refined = masks
        .iter()
        .zip(segs)
        .map(|(m, s)| {
            let data = m.data.iter().enumerate().map(|(k, &mv)| mv * refine_factor(s.pixel(k), &mean_class)).collect();
            Mask::new(m.height, m.width, data)
        })
        .collect();
    Ok(Refinement { masks: refined, mean_class, empty: false })
}

/// Weight of layer `j` occluding layer `i`: `o_j / (o_i + o_j)`, with the
/// equal-score limit 1/2 when both scores vanish.
#[inline]
pub fn occlusion_weight(o_i: f64, o_j: f64) -> f64 {
    let s = o_i + o_j;
    if s > 0.0 {
        o_j / s
    } else {
        0.5
    }
}

#[derive(Clone, Debug)]
pub struct Occlusion {
    pub masks: Vec<Mask>,
    /// Some pixel had two overlapping layers with zero depth scores.
    pub degenerate: bool,
}

/// Filters each layer's mask by the layers in front of it:
/// `m_i * prod_{j != i} (1 - o_j / (o_i + o_j) m_j)`.
pub fn occlusion_filter(masks: &[Mask], depths: &[f64]) -> Result<Occlusion> {
    if masks.len() != depths.len() {
        return Err(Error::SizeMismatch(format!("{} masks vs {} depth scores", masks.len(), depths.len())));
    }
    if let Some(o) = depths.iter().find(|o| !(**o >= 0.0)) {
        return Err(Error::InvalidArgument(format!("depth scores must be >= 0, got {o}")));
    }
    let Some(first) = masks.first() else {
        return Ok(Occlusion { masks: Vec::new(), degenerate: false });
    };
    for m in masks {
        check_size("layer masks", first.dims(), m.dims())?;
    }
    let n = masks.len();
    let mut out: Vec<Mask> = masks.to_vec();
    let mut degenerate = false;
    for k in 0..first.data.len() {
        for i in 0..n {
            let mi = masks[i].data[k];
            if mi == 0.0 {
                continue;
            }
            let mut f = 1.0;
            for j in (0..n).filter(|&j| j != i) {
                let mj = masks[j].data[k];
                if depths[i] + depths[j] == 0.0 && mj > 0.0 {
                    degenerate = true;
                }
                f *= 1.0 - occlusion_weight(depths[i], depths[j]) * mj;
            }
            out[i].data[k] = mi * f;
        }
    }
    Ok(Occlusion { masks: out, degenerate })
}

/// Mask-weighted sum of layer flows. A pixel is valid when the masks have
/// positive mass there and every layer with positive mask has a valid flow.
pub fn composite_flow(flows: &[FlowField], masks: &[Mask]) -> Result<FlowField> {
    if flows.len() != masks.len() || flows.is_empty() {
        return Err(Error::SizeMismatch(format!("{} layer flows vs {} masks", flows.len(), masks.len())));
    }
    let dims = flows[0].dims();
    for (f, m) in flows.iter().zip(masks) {
        check_size("layer flow", dims, f.dims())?;
        check_size("layer mask", dims, m.dims())?;
    }
    let mut out = FlowField::zeros(dims.0, dims.1);
    for k in 0..out.len() {
        let mut mass = 0.0;
        let mut ok = true;
        let (mut u, mut v) = (0.0, 0.0);
        for (f, m) in flows.iter().zip(masks) {
            let w = m.data[k];
            if w > 0.0 {
                if !f.valid[k] {
                    ok = false;
                    break;
                }
                mass += w;
                u += w * f.u[k];
                v += w * f.v[k];
            }
        }
        out.valid[k] = ok && mass > 0.0;
        if out.valid[k] {
            out.u[k] = u;
            out.v[k] = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tps::{ControlGrid, ControlState, TpsSolver};

    fn onehot(h: usize, w: usize, c: usize, label: impl Fn(usize) -> usize) -> SegMap {
        let labels: Vec<usize> = (0..h * w).map(label).collect();
        SegMap::from_labels(h, w, c, &labels).unwrap()
    }

    #[test]
    fn identity_warp_preserves_mask() {
        let s = TpsSolver::new(ControlGrid::regular(4, 4), 0.0).unwrap();
        let xf = s.solve(&ControlState::at_rest(s.grid(), 1, 0, 1.0)).unwrap();
        let a = Mask::new(8, 8, (0..64).map(|k| ((k * 7) % 11) as f64 / 10.0).collect());
        let m = warp_mask(&a, &xf, 8, 8);
        for (x, y) in m.data.iter().zip(&a.data) {
            assert!((x - y).abs() < 1e-9);
        }
        let ones = warp_mask(&Mask::filled(16, 16, 1.0), &xf, 12, 20);
        assert!(ones.data.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn refinement_cases() {
        let (h, w) = (4, 4);
        let segs = vec![onehot(h, w, 2, |_| 1); 2];
        let masks = vec![Mask::filled(h, w, 0.7); 2];
        let r = semantic_refine(&masks, &[0.0, 1.0], &segs, DEFAULT_K_C).unwrap();
        assert_eq!(r.mean_class, vec![0.0, 1.0]);
        assert_eq!(r.masks, masks);

        // A pixel on a class disjoint from the tube mean is zeroed.
        let segs = vec![onehot(h, w, 2, |k| usize::from(k != 0))];
        let mut m = Mask::zeros(h, w);
        m.data[0] = 0.01;
        m.data[5] = 1.0;
        m.data[6] = 1.0;
        let r = semantic_refine(&[m], &[0.0, 1.0], &segs, DEFAULT_K_C).unwrap();
        assert_eq!(r.masks[0].data[0], 0.0);
        assert!(r.masks[0].data[5] > 0.99 && r.masks[0].data[5] <= 1.0);

        let empty = semantic_refine(&[Mask::zeros(h, w)], &[0.5, 0.5], &segs, DEFAULT_K_C).unwrap();
        assert!(empty.empty);
        assert!(semantic_refine(&[Mask::zeros(h, w)], &[0.5, 0.5], &segs, 0.0).is_err());
    }

    #[test]
    fn occlusion_limits() {
        let ones = Mask::filled(1, 1, 1.0);
        let r = occlusion_filter(&[ones.clone(), ones.clone()], &[1.0, 1e9]).unwrap();
        assert!(r.masks[0].data[0] < 1e-8);
        assert!((r.masks[1].data[0] - 1.0).abs() < 1e-8);
        let r = occlusion_filter(&[ones.clone(), ones.clone()], &[2.0, 2.0]).unwrap();
        assert!((r.masks[0].data[0] - 0.5).abs() < 1e-15);
        let r = occlusion_filter(&[ones.clone(), ones.clone()], &[0.0, 0.0]).unwrap();
        assert!(r.degenerate);
        assert!((r.masks[0].data[0] - 0.5).abs() < 1e-15);
        assert!(occlusion_filter(&[ones], &[-1.0]).is_err());
    }

    #[test]
    fn compositing() {
        let (h, w) = (2, 4);
        let a = FlowField::uniform(h, w, 1.0, 2.0);
        let b = FlowField::uniform(h, w, -3.0, 0.5);
        let one = composite_flow(&[a.clone()], &[Mask::filled(h, w, 1.0)]).unwrap();
        assert_eq!(one, a);
        let left = Mask::new(h, w, (0..h * w).map(|k| if k % w < 2 { 1.0 } else { 0.0 }).collect());
        let right = Mask::new(h, w, left.data.iter().map(|v| 1.0 - v).collect());
        let pw = composite_flow(&[a.clone(), b.clone()], &[left.clone(), right]).unwrap();
        for k in 0..h * w {
            let want = if k % w < 2 { (1.0, 2.0) } else { (-3.0, 0.5) };
            assert_eq!((pw.u[k], pw.v[k]), want);
        }
        let half = Mask::filled(h, w, 0.5);
        let mean = composite_flow(&[a, b], &[half.clone(), half]).unwrap();
        assert!((mean.u[0] + 1.0).abs() < 1e-15 && (mean.v[0] - 1.25).abs() < 1e-15);
        let none = composite_flow(&[FlowField::zeros(h, w)], &[Mask::zeros(h, w)]).unwrap();
        assert!(none.valid.iter().all(|&v| !v));
    }

    #[test]
    fn class_groups_merge() {
        let table = ClassTable::new(
            ["road", "rider", "car", "bicycle"]
                .iter()
                .map(|n| ClassInfo { name: n.to_string(), stuff: *n == "road" })
                .collect(),
        );
        let (merged, remap) = table.merge_groups(DEFAULT_CLASS_GROUPS);
        assert_eq!(merged.len(), 3);
        assert_eq!(remap, vec![0, 1, 2, 1]);
        let seg = onehot(1, 2, 4, |k| if k == 0 { 3 } else { 2 });
        let r = seg.regroup(&remap, 3);
        assert_eq!(r.pixel(0), &[0.0, 1.0, 0.0]);
    }
}
