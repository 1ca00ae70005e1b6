//! Dense rasters: scalar masks, images and flow fields.
//!
//! Pixel `(i, j)` (row, column) has its center at normalized coordinates
//! `(2 (j + 0.5) / W - 1, 2 (i + 0.5) / H - 1)`. Continuous pixel
//! coordinates put the center of pixel `(i, j)` at `(x, y) = (j, i)`.

use serde::{Deserialize, Serialize};

use crate::error::{check_size, Result};

#[inline]
pub fn pixel_to_norm(index: f64, extent: usize) -> f64 {
    2.0 * (index + 0.5) / extent as f64 - 1.0
}

#[inline]
pub fn norm_to_pixel(coord: f64, extent: usize) -> f64 {
    (coord + 1.0) * extent as f64 / 2.0 - 0.5
}

/// Normalized units per pixel along an axis of `extent` pixels.
#[inline]
pub fn norm_per_pixel(extent: usize) -> f64 {
    2.0 / extent as f64
}

/// Bilinear taps for continuous pixel coordinates, `None` outside `[0, w-1] x [0, h-1]`.
#[inline]
pub fn bilinear_taps(height: usize, width: usize, x: f64, y: f64) -> Option<[(usize, f64); 4]> {
    if !(x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as usize).min(width.saturating_sub(2));
    let y0 = (y.floor() as usize).min(height.saturating_sub(2));
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    Some([
        (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * width + x1, fx * (1.0 - fy)),
        (y1 * width + x0, (1.0 - fx) * fy),
        (y1 * width + x1, fx * fy),
    ])
}

/// Single-channel raster with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width, "mask data length");
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Samples the mask as an intrinsic canvas at normalized coordinates.
    ///
    /// Bilinear with edge replication inside `[-1, 1]^2`; beyond the canvas
    /// the value fades linearly to 0 over one texel, so it is continuous
    /// everywhere. Returns the value, its derivative with respect to the
    /// normalized coordinates, and the weighted taps (for scattering
    /// gradients).
    pub fn sample_canvas(&self, u: [f64; 2]) -> CanvasSample {
        let (h, w) = (self.height, self.width);
        let x = norm_to_pixel(u[0], w);
        let y = norm_to_pixel(u[1], h);
        // Fade factor per axis and its derivative in pixels.
        let fade = |p: f64, n: usize| {
            let lo = -0.5 - p;
            let hi = p - (n as f64 - 0.5);
            if lo > 0.0 {
                (1.0 - lo, 1.0)
            } else if hi > 0.0 {
                (1.0 - hi, -1.0)
            } else {
                (1.0, 0.0)
            }
        };
        let ((ax, dax), (ay, day)) = (fade(x, w), fade(y, h));
        if !(ax > 0.0 && ay > 0.0) {
            return CanvasSample::default();
        }
        let axis = |p: f64, n: usize| {
            let last = (n - 1) as f64;
            let pc = p.clamp(0.0, last);
            let p0 = pc.floor().min((last - 1.0).max(0.0));
            let p1 = (p0 + 1.0).min(last);
            let inside = p > 0.0 && p < last;
            (p0 as usize, p1 as usize, pc - p0, inside)
        };
        let (x0, x1, fx, inx) = axis(x, w);
        let (y0, y1, fy, iny) = axis(y, h);
        let idx = [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1];
        let [a0, a1, a2, a3] = idx.map(|k| self.data[k]);
        let bw = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
        let b = a0 * bw[0] + a1 * bw[1] + a2 * bw[2] + a3 * bw[3];
        let dbx = if inx { (a1 - a0) * (1.0 - fy) + (a3 - a2) * fy } else { 0.0 };
        let dby = if iny { (a2 - a0) * (1.0 - fx) + (a3 - a1) * fx } else { 0.0 };
        let f = ax * ay;
        let dx = (f * dbx + dax * ay * b) * w as f64 / 2.0;
        let dy = (f * dby + ax * day * b) * h as f64 / 2.0;
        let taps = [0, 1, 2, 3].map(|k| (idx[k], f * bw[k]));
        CanvasSample { value: f * b, grad: [dx, dy], taps: Some(taps) }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CanvasSample {
    pub value: f64,
    pub grad: [f64; 2],
    pub taps: Option<[(usize, f64); 4]>,
}

/// Interleaved image with 1 or 3 channels, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        assert_eq!(data.len(), height * width * channels, "image data length");
        Self { height, width, channels, data }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    /// Luma (BT.601 weights) for RGB, identity for grayscale.
    pub fn to_gray(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub(crate) fn check_same(&self, other: &Image) -> Result<()> {
        check_size("image", self.dims(), other.dims())?;
        if self.channels != other.channels {
            return Err(crate::Error::SizeMismatch(format!(
                "image channels: {} vs {}",
                self.channels, other.channels
            )));
        }
        Ok(())
    }
}

/// Dense displacement field in pixels with a validity mask.
///
/// Backward convention: the vector at a pixel of the later frame points to
/// its match in the earlier frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        let n = height * width;
        Self { height, width, u: vec![0.0; n], v: vec![0.0; n], valid: vec![true; n] }
    }

    pub fn uniform(height: usize, width: usize, du: f64, dv: f64) -> Self {
        let n = height * width;
        Self { height, width, u: vec![du; n], v: vec![dv; n], valid: vec![true; n] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> Option<[f64; 2]>) -> Self {
        let mut out = Self::zeros(height, width);
        for i in 0..height {
            for j in 0..width {
                let k = i * width + j;
                match f(i, j) {
                    Some(d) => {
                        out.u[k] = d[0];
                        out.v[k] = d[1];
                    }
                    None => out.valid[k] = false,
                }
            }
        }
        out
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bilinear lookup of the displacement at continuous pixel coordinates.
    /// `None` outside the grid or when any contributing tap is invalid.
    pub fn sample(&self, x: f64, y: f64) -> Option<[f64; 2]> {
        let taps = bilinear_taps(self.height, self.width, x, y)?;
        let mut d = [0.0; 2];
        for (idx, wt) in taps {
            if wt == 0.0 {
                continue;
            }
            if !self.valid[idx] {
                return None;
            }
            d[0] += wt * self.u[idx];
            d[1] += wt * self.v[idx];
        }
        Some(d)
    }

    /// Resamples the field to another resolution through normalized
    /// coordinates, rescaling displacements to the new pixel units.
    pub fn resample(&self, height: usize, width: usize) -> FlowField {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        FlowField::from_fn(height, width, |i, j| {
            let x = norm_to_pixel(pixel_to_norm(j as f64, width), self.width)
                .clamp(0.0, (self.width - 1) as f64);
            let y = norm_to_pixel(pixel_to_norm(i as f64, height), self.height)
                .clamp(0.0, (self.height - 1) as f64);
            self.sample(x, y).map(|d| [d[0] * sx, d[1] * sy])
        })
    }
}
