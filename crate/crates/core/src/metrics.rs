//! Reconstruction metrics.

use crate::error::{check_size, Error, Result};
use crate::raster::{FlowField, Image, Mask};

/// Value returned for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

pub fn mse(pred: &Image, reference: &Image) -> Result<f64> {
    pred.check_same(reference)?;
    let n = pred.data.len().max(1) as f64;
    Ok(pred.data.iter().zip(&reference.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// PSNR in dB for intensities in [0, 1].
pub fn psnr(pred: &Image, reference: &Image) -> Result<f64> {
    let m = mse(pred, reference)?;
    Ok(if m <= 0.0 { PSNR_CAP } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable filtering keeping only windows that fit inside the image.
fn filter_valid(data: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|k| g[k] * data[i * w + j + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|k| g[k] * rows[(i + k) * ow + j]).sum();
        }
    }
    out
}

/// Mean single-scale SSIM on luma with an 11x11 Gaussian window.
pub fn ssim(pred: &Image, reference: &Image) -> Result<f64> {
    pred.check_same(reference)?;
    let (h, w) = pred.dims();
    if h.min(w) < SSIM_WINDOW {
        return Err(Error::TooSmall { height: h, width: w });
    }
    let (x, y) = (pred.to_gray(), reference.to_gray());
    let g = gaussian_window();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mx = filter_valid(&x, h, w, &g);
    let my = filter_valid(&y, h, w, &g);
    let sxx = filter_valid(&prod(&x, &x), h, w, &g);
    let syy = filter_valid(&prod(&y, &y), h, w, &g);
    let sxy = filter_valid(&prod(&x, &y), h, w, &g);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let total: f64 = (0..mx.len())
        .map(|k| {
            let (a, b) = (mx[k], my[k]);
            let (va, vb, cov) = (sxx[k] - a * a, syy[k] - b * b, sxy[k] - a * b);
            ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Mean endpoint error over pixels valid in both fields.
pub fn epe(pred: &FlowField, reference: &FlowField) -> Result<f64> {
    check_size("flow", pred.dims(), reference.dims())?;
    let (mut sum, mut n) = (0.0, 0usize);
    for k in 0..pred.len() {
        if pred.valid[k] && reference.valid[k] {
            sum += (pred.u[k] - reference.u[k]).hypot(pred.v[k] - reference.v[k]);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoOverlap);
    }
    Ok(sum / n as f64)
}

/// IoU of `mask > thresh`; 1.0 when both sets are empty.
pub fn mask_iou(pred: &Mask, reference: &Mask, thresh: f64) -> Result<f64> {
    check_size("mask", pred.dims(), reference.dims())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in pred.data.iter().zip(&reference.data) {
        let (a, b) = (*a > thresh, *b > thresh);
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Pointwise maximum of the `layers` that put at least `min_share` of
/// their mass inside `target > 0.5`. Used to compare a decomposition, which
/// may split an object over several layers, with one ground-truth object.
pub fn matched_union(layers: &[Mask], target: &Mask, min_share: f64) -> Result<Mask> {
    let mut out = Mask::zeros(target.height, target.width);
    for m in layers {
        check_size("layer vs target", m.dims(), target.dims())?;
        let total: f64 = m.data.iter().sum();
        let inside: f64 = m.data.iter().zip(&target.data).filter(|(_, t)| **t > 0.5).map(|(v, _)| v).sum();
        if total > 0.0 && inside >= min_share * total {
            for (o, v) in out.data.iter_mut().zip(&m.data) {
                *o = o.max(*v);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, c, (0..h * w * c).map(|_| rng.random::<f64>()).collect())
    }

    fn square(h: usize, w: usize, i0: usize, j0: usize, s: usize) -> Mask {
        Mask::new(h, w, (0..h * w).map(|k| f64::from(u8::from((i0..i0 + s).contains(&(k / w)) && (j0..j0 + s).contains(&(k % w))))).collect())
    }

    #[test]
    fn psnr_cases() {
        let a = random_image(8, 9, 3, 1);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let z = Image::filled(4, 4, 1, 0.0);
        let p = Image::filled(4, 4, 1, 0.1);
        assert!((psnr(&p, &z).unwrap() - 20.0).abs() < 1e-12);
        let b = random_image(8, 9, 3, 2);
        let mut s = 0.0;
        for k in 0..a.data.len() {
            s += (a.data[k] - b.data[k]).powi(2);
        }
        let naive = 10.0 * (a.data.len() as f64 / s).log10();
        assert!((psnr(&a, &b).unwrap() - naive).abs() < 1e-12);
        assert!(matches!(psnr(&a, &random_image(8, 8, 3, 1)), Err(Error::SizeMismatch(_))));
    }

    fn naive_ssim(x: &Image, y: &Image) -> f64 {
        let (h, w) = x.dims();
        let (gx, gy) = (x.to_gray(), y.to_gray());
        let mut win = [[0.0; 11]; 11];
        let mut tot = 0.0;
        for (a, row) in win.iter_mut().enumerate() {
            for (b, v) in row.iter_mut().enumerate() {
                *v = (-(((a as f64 - 5.0).powi(2) + (b as f64 - 5.0).powi(2)) / 4.5)).exp();
                tot += *v;
            }
        }
        let mut sum = 0.0;
        let mut count = 0.0;
        for i in 0..=h - 11 {
            for j in 0..=w - 11 {
                let (mut mx, mut my) = (0.0, 0.0);
                for a in 0..11 {
                    for b in 0..11 {
                        let k = (i + a) * w + j + b;
                        mx += win[a][b] / tot * gx[k];
                        my += win[a][b] / tot * gy[k];
                    }
                }
                let (mut vx, mut vy, mut c) = (0.0, 0.0, 0.0);
                for a in 0..11 {
                    for b in 0..11 {
                        let k = (i + a) * w + j + b;
                        let wt = win[a][b] / tot;
                        vx += wt * (gx[k] - mx).powi(2);
                        vy += wt * (gy[k] - my).powi(2);
                        c += wt * (gx[k] - mx) * (gy[k] - my);
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                sum += (2.0 * mx * my + c1) * (2.0 * c + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
        sum / count
    }

    #[test]
    fn ssim_cases() {
        let a = random_image(16, 20, 3, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let tex = Image::new(16, 16, 1, (0..256).map(|k| 0.5 + 0.3 * ((k % 16) as f64 * 0.9).sin() * ((k / 16) as f64 * 0.7).cos()).collect());
        let neg = Image::new(16, 16, 1, tex.data.iter().map(|v| 1.0 - v).collect());
        assert!(ssim(&tex, &neg).unwrap() < 0.0);
        let b = random_image(16, 20, 3, 4);
        assert!((ssim(&a, &b).unwrap() - naive_ssim(&a, &b)).abs() < 1e-10);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-15);
        assert!(matches!(ssim(&random_image(10, 30, 1, 0), &random_image(10, 30, 1, 1)), Err(Error::TooSmall { .. })));
    }

    #[test]
    fn epe_cases() {
        let a = FlowField::from_fn(6, 7, |i, j| Some([i as f64 * 0.3, -(j as f64)]));
        assert_eq!(epe(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.u.iter_mut().for_each(|u| *u += 3.0);
        b.v.iter_mut().for_each(|v| *v += 4.0);
        assert!((epe(&b, &a).unwrap() - 5.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = FlowField::from_fn(6, 7, |_, _| None);
        assert!(matches!(epe(&r, &a), Err(Error::NoOverlap)));
        let p = FlowField::from_fn(6, 7, |i, _| if i % 2 == 0 { Some([0.0, 0.0]) } else { None });
        let mut q = FlowField::zeros(6, 7);
        for k in 0..42 {
            q.u[k] = rng.random_range(-2.0..2.0);
            q.v[k] = rng.random_range(-2.0..2.0);
        }
        let (mut s, mut n) = (0.0, 0.0);
        for k in 0..42 {
            if p.valid[k] {
                s += (q.u[k] * q.u[k] + q.v[k] * q.v[k]).sqrt();
                n += 1.0;
            }
        }
        assert!((epe(&p, &q).unwrap() - s / n).abs() < 1e-12);
        assert_eq!(epe(&p, &q).unwrap(), epe(&q, &p).unwrap());
    }

    #[test]
    fn iou_cases() {
        let a = square(20, 20, 2, 2, 6);
        assert_eq!(mask_iou(&a, &a, 0.5).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &square(20, 20, 10, 10, 6), 0.5).unwrap(), 0.0);
        let half = square(20, 20, 2, 5, 6);
        assert!((mask_iou(&a, &half, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let z = Mask::zeros(20, 20);
        assert_eq!(mask_iou(&z, &z, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn union_of_matching_layers() {
        let target = square(20, 20, 2, 2, 8);
        let parts = [square(20, 20, 2, 2, 4), square(20, 20, 6, 6, 4), square(20, 20, 12, 12, 6), square(20, 20, 8, 8, 4)];
        let u = matched_union(&parts, &target, 0.5).unwrap();
        // The third square lies outside; the fourth is only a quarter inside.
        assert_eq!(u.sum(), 32.0);
        assert_eq!(u.data[2 * 20 + 2], 1.0);
        assert_eq!(u.data[12 * 20 + 12], 0.0);
    }
}
