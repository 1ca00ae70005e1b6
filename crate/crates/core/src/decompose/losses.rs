//! Value-only evaluation of the decomposition losses on materialized masks.
//! The fit computes the same quantities together with their gradients in
//! [`super::model`]; both share the per-pixel helpers below.

use crate::error::{check_size, Error, Result};
use crate::layers::{composite_flow, SegMap};
use crate::raster::{pixel_to_norm, FlowField, Mask};

use super::{PseudoLabels, SceneDecomposition};

/// Probabilities below this are clamped inside logarithms of gradients.
pub(crate) const LOG_FLOOR: f64 = 1e-6;

/// Shannon entropy (nats) of non-negative weights normalized to sum to 1;
/// 0 when all weights vanish.
pub fn mask_entropy(values: &[f64]) -> f64 {
    let z: f64 = values.iter().sum();
    if !(z > 0.0) {
        return 0.0;
    }
    -values
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|v| {
            let p = v / z;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Gradient of [`mask_entropy`] with respect to each weight, added to `out`
/// after scaling by `scale`.
pub(crate) fn entropy_grad(values: &[f64], scale: f64, out: &mut [f64]) {
    let z: f64 = values.iter().sum();
    if !(z > 0.0) {
        return;
    }
    let h = mask_entropy(values);
    for (o, v) in out.iter_mut().zip(values) {
        let p = (v / z).max(LOG_FLOOR);
        *o -= scale * (p.ln() + h) / z;
    }
}

/// Distance to the nearest point and that point's index.
pub(crate) fn nearest(points: impl Iterator<Item = [f64; 2]>, q: [f64; 2]) -> Option<(usize, f64)> {
    points
        .enumerate()
        .map(|(k, p)| (k, (p[0] - q[0]).hypot(p[1] - q[1])))
        .fold(None, |best: Option<(usize, f64)>, c| match best {
            Some(b) if b.1 <= c.1 => Some(b),
            _ => Some(c),
        })
}

fn check_frames(masks: &[Vec<Mask>], labels: &[PseudoLabels]) -> Result<()> {
    if masks.len() != labels.len() {
        return Err(Error::SizeMismatch(format!("{} mask frames vs {} label frames", masks.len(), labels.len())));
    }
    for (m, l) in masks.iter().zip(labels) {
        for layer in m {
            check_size("mask vs labels", l.stuff.dims(), layer.dims())?;
        }
    }
    Ok(())
}

/// `sum_t mean_q (k_s S - k_m M) max_{i>0} m_i`. `masks[t][i]` are visible
/// masks with the background at index 0 (ignored here).
pub fn loss_object(masks: &[Vec<Mask>], labels: &[PseudoLabels], k_s: f64, k_m: f64) -> Result<f64> {
    check_frames(masks, labels)?;
    let mut total = 0.0;
    for (m, l) in masks.iter().zip(labels) {
        let n = l.stuff.data.len();
        let mut acc = 0.0;
        for k in 0..n {
            let top = m.iter().skip(1).map(|x| x.data[k]).fold(0.0, f64::max);
            acc += (k_s * l.stuff.data[k] - k_m * l.moving_fg.data[k]) * top;
        }
        total += acc / n as f64;
    }
    Ok(total)
}

/// Mean L1 flow error (pixels) over pixels valid in both fields.
pub(crate) fn mean_l1(pred: &FlowField, target: &FlowField) -> Result<f64> {
    check_size("flow", target.dims(), pred.dims())?;
    let (mut acc, mut count) = (0.0, 0usize);
    for k in 0..pred.len() {
        if pred.valid[k] && target.valid[k] {
            acc += (pred.u[k] - target.u[k]).abs() + (pred.v[k] - target.v[k]).abs();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { acc / count as f64 })
}

/// `sum_{t >= 1}` of the mean L1 error between `targets[t]` and the flow
/// the decomposition predicts from frame `t` back to `t - 1`, evaluated at
/// the targets' resolution. `segs` enables semantic refinement of the masks.
pub fn loss_flow(targets: &[FlowField], decomp: &SceneDecomposition, segs: Option<&[SegMap]>) -> Result<f64> {
    let t_obs = decomp.observed;
    if targets.len() < t_obs {
        return Err(Error::SizeMismatch(format!("{} target flows for {t_obs} frames", targets.len())));
    }
    let Some(first) = targets.first() else {
        return Ok(0.0);
    };
    let (h, w) = first.dims();
    let masks = decomp.observed_masks(h, w, segs)?;
    let mut total = 0.0;
    for t in 1..t_obs {
        let flows = decomp.layer_flows(t - 1, t, h, w)?;
        total += mean_l1(&composite_flow(&flows, &masks[t])?, &targets[t])?;
    }
    Ok(total)
}

/// Entropy of the layer distribution plus the distance of still-empty
/// moving-foreground pixels to the nearest object control point, both
/// mean-reduced over pixels and summed over frames.
pub fn loss_reg(
    masks: &[Vec<Mask>],
    decomp: &SceneDecomposition,
    labels: &[PseudoLabels],
    empty_thresh: f64,
) -> Result<f64> {
    check_frames(masks, labels)?;
    let mut total = 0.0;
    for (t, (m, l)) in masks.iter().zip(labels).enumerate() {
        let (h, w) = l.stuff.dims();
        let n = h * w;
        let mut ent = 0.0;
        let mut dist = 0.0;
        let mut vals = vec![0.0; m.len()];
        for k in 0..n {
            for (v, layer) in vals.iter_mut().zip(m) {
                *v = layer.data[k];
            }
            ent += mask_entropy(&vals);
            if l.moving_fg.data[k] > 0.5 && vals.iter().skip(1).fold(0.0, |a: f64, &b| a.max(b)) < empty_thresh {
                let q = [pixel_to_norm((k % w) as f64, w), pixel_to_norm((k / w) as f64, h)];
                let pts = decomp.trajectories.iter().skip(1).flat_map(|traj| traj[t].points.iter().map(|p| p.xy()));
                if let Some((_, d)) = nearest(pts, q) {
                    dist += d;
                }
            }
        }
        total += (ent + dist) / n as f64;
    }
    Ok(total)
}
