//! Thin-plate-spline machinery.
//!
//! A layer's intrinsic coordinate system carries a fixed regular grid of
//! control points (the *source*). Moving those points to new *target*
//! positions defines a TPS transform
//!
//! ```text
//! p' = T p + U phi(p),   phi(p)_j = k(p, c_j),   k(p, q) = |p - q|^2 ln |p - q|
//! ```
//!
//! whose parameters are linear in the targets: `[T^T; U^T] = D^-1 [C2^T; 0]`
//! where `D` only depends on the source grid. The inverse of `D` is
//! computed once per grid by [`TpsSolver::new`], after which every solve is
//! a matrix product and every transform can be evaluated, differentiated or
//! densely sampled at any resolution.
//!
//! All coordinates are normalized to `[-1, 1]^2`; conversion to pixels only
//! happens when sampling dense fields.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{check_size, Error, Result};
use crate::parallel;
use crate::raster::{norm_per_pixel, pixel_to_norm, FlowField};

/// Reciprocal condition numbers below this are treated as singular.
pub const MIN_RCOND: f64 = 1e-12;

/// Point in homogeneous normalized coordinates; `w` is always 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point2H {
    pub x: f64,
    pub y: f64,
    pub w: f64,
}

impl Point2H {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y, w: 1.0 }
    }

    pub fn xy(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Point2H {
    fn from(p: [f64; 2]) -> Self {
        Self::new(p[0], p[1])
    }
}

/// Regular `rows x cols` grid of control points in raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlGrid {
    pub rows: usize,
    pub cols: usize,
    pub points: Vec<Point2H>,
}

fn linspace(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|k| -1.0 + 2.0 * k as f64 / (n - 1) as f64).collect()
}

impl ControlGrid {
    /// Grid spanning the intrinsic square `[-1, 1]^2`.
    ///
    /// Grids with a single row or column are representable (all points are
    /// collinear) but rejected by [`TpsSolver::new`].
    pub fn regular(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "grid needs at least one row and column");
        let ys = linspace(rows);
        let xs = linspace(cols);
        let points = ys.iter().flat_map(|&y| xs.iter().map(move |&x| Point2H::new(x, y))).collect();
        Self { rows, cols, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Target positions of one layer's control points at one time step, plus
/// the layer's depth ordering score.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlState {
    pub layer: usize,
    pub time: usize,
    pub points: Vec<Point2H>,
    pub depth: f64,
}

impl ControlState {
    pub fn new(layer: usize, time: usize, points: Vec<Point2H>, depth: f64) -> Self {
        Self { layer, time, points, depth }
    }

    /// State whose points sit exactly on the grid.
    pub fn at_rest(grid: &ControlGrid, layer: usize, time: usize, depth: f64) -> Self {
        Self::new(layer, time, grid.points.clone(), depth)
    }
}

/// `r^2 ln r` expressed through the squared distance; 0 at the origin.
#[inline]
pub fn kernel_sq(d2: f64) -> f64 {
    if d2 > 0.0 {
        0.5 * d2 * d2.ln()
    } else {
        0.0
    }
}

/// TPS radial kernel between the xy parts of two points.
pub fn kernel(p: Point2H, q: Point2H) -> f64 {
    let dx = p.x - q.x;
    let dy = p.y - q.y;
    kernel_sq(dx * dx + dy * dy)
}

/// Precomputed inverse of the TPS system matrix for one source grid.
#[derive(Clone, Debug)]
pub struct TpsSolver {
    grid: Arc<ControlGrid>,
    ridge: f64,
    delta: DMatrix<f64>,
    delta_inv: DMatrix<f64>,
}

impl TpsSolver {
    /// Assembles the `(L+3) x (L+3)` system for `grid`, with `ridge` added to
    /// the kernel block diagonal, and inverts it with full pivoting.
    pub fn new(grid: ControlGrid, ridge: f64) -> Result<Self> {
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(Error::InvalidArgument(format!("ridge must be finite and >= 0, got {ridge}")));
        }
        if grid.points.iter().any(|p| !p.is_finite()) {
            return Err(Error::DegenerateGrid("non-finite control point".into()));
        }
        let delta = system_matrix(&grid, ridge);
        let lu = delta.clone().full_piv_lu();
        let inv = lu
            .try_inverse()
            .ok_or_else(|| Error::DegenerateGrid(format!("{}x{} grid: system matrix is singular", grid.rows, grid.cols)))?;
        let rcond = 1.0 / (norm1(&delta) * norm1(&inv));
        if !(rcond.is_finite() && rcond >= MIN_RCOND) {
            return Err(Error::DegenerateGrid(format!(
                "{}x{} grid: reciprocal condition {rcond:.3e} below {MIN_RCOND:e}",
                grid.rows, grid.cols
            )));
        }
        Ok(Self { grid: Arc::new(grid), ridge, delta, delta_inv: inv })
    }

    pub fn grid(&self) -> &ControlGrid {
        &self.grid
    }

    pub fn shared_grid(&self) -> Arc<ControlGrid> {
        Arc::clone(&self.grid)
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn system(&self) -> &DMatrix<f64> {
        &self.delta
    }

    pub fn system_inverse(&self) -> &DMatrix<f64> {
        &self.delta_inv
    }

    /// Solves the TPS parameters mapping the grid onto `targets`.
    pub fn solve(&self, targets: &ControlState) -> Result<TpsTransform> {
        let pts: Vec<[f64; 2]> = targets.points.iter().map(Point2H::xy).collect();
        self.solve_xy(&pts)
    }

    pub fn solve_xy(&self, targets: &[[f64; 2]]) -> Result<TpsTransform> {
        let l = self.len();
        if targets.len() != l {
            return Err(Error::SizeMismatch(format!("expected {l} target points, got {}", targets.len())));
        }
        let mut sol = vec![[0.0f64; 2]; l + 3];
        for (k, row) in sol.iter_mut().enumerate() {
            let mut acc = [0.0; 2];
            for (j, t) in targets.iter().enumerate() {
                let a = self.delta_inv[(k, j)];
                acc[0] += a * t[0];
                acc[1] += a * t[1];
            }
            *row = acc;
        }
        let affine = [
            [sol[0][0], sol[1][0], sol[2][0]],
            [sol[0][1], sol[1][1], sol[2][1]],
            [0.0, 0.0, 1.0],
        ];
        Ok(TpsTransform { affine, nonaffine: sol[3..].to_vec(), source: self.shared_grid() })
    }

    /// Interpolation weights: `apply(p) = sum_j weights(p)_j * target_j`.
    pub fn weights(&self, p: Point2H) -> Vec<f64> {
        let basis = basis(&self.grid, p.x, p.y);
        (0..self.len())
            .map(|j| basis.iter().enumerate().map(|(k, b)| b * self.delta_inv[(k, j)]).sum())
            .collect()
    }

    /// Maps a gradient with respect to the transform coefficients (ordered
    /// like the basis `[x, y, 1, phi_1..phi_L]`, one column per output
    /// coordinate) to a gradient with respect to the target points.
    pub fn backprop_coefficients(&self, coeff_grad: &[[f64; 2]]) -> Vec<[f64; 2]> {
        assert_eq!(coeff_grad.len(), self.len() + 3);
        (0..self.len())
            .map(|j| {
                let mut acc = [0.0; 2];
                for (k, g) in coeff_grad.iter().enumerate() {
                    let a = self.delta_inv[(k, j)];
                    acc[0] += a * g[0];
                    acc[1] += a * g[1];
                }
                acc
            })
            .collect()
    }

    /// Gradient of `sum_q upstream(q) . D(q)`, where `D` is the dense warp
    /// of [`TpsTransform::sample_dense`] at the upstream's resolution, with
    /// respect to every target point. The dense warp is linear in the
    /// targets, so the result does not depend on `targets` beyond its size.
    pub fn grad_points(&self, targets: &ControlState, upstream: &FlowField) -> Result<Vec<[f64; 2]>> {
        if targets.points.len() != self.len() {
            return Err(Error::SizeMismatch(format!(
                "expected {} target points, got {}",
                self.len(),
                targets.points.len()
            )));
        }
        let (h, w) = upstream.dims();
        let (sx, sy) = (1.0 / norm_per_pixel(w), 1.0 / norm_per_pixel(h));
        let l = self.len();
        let grid = &self.grid;
        let coeff = parallel::fold_chunks(
            h * w,
            4096,
            || vec![[0.0f64; 2]; l + 3],
            |acc, q| {
                if !upstream.valid[q] {
                    return;
                }
                let g = [upstream.u[q] * sx, upstream.v[q] * sy];
                if g == [0.0, 0.0] {
                    return;
                }
                let x = pixel_to_norm((q % w) as f64, w);
                let y = pixel_to_norm((q / w) as f64, h);
                accumulate_basis(grid, x, y, g, acc);
            },
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    x[0] += y[0];
                    x[1] += y[1];
                }
                a
            },
        );
        Ok(self.backprop_coefficients(&coeff))
    }
}

/// Adds `g (x) basis(x, y)` to `acc`.
#[inline]
pub fn accumulate_basis(grid: &ControlGrid, x: f64, y: f64, g: [f64; 2], acc: &mut [[f64; 2]]) {
    let lin = [x, y, 1.0];
    for k in 0..3 {
        acc[k][0] += g[0] * lin[k];
        acc[k][1] += g[1] * lin[k];
    }
    for (c, a) in grid.points.iter().zip(acc[3..].iter_mut()) {
        let dx = x - c.x;
        let dy = y - c.y;
        let k = kernel_sq(dx * dx + dy * dy);
        a[0] += g[0] * k;
        a[1] += g[1] * k;
    }
}

fn basis(grid: &ControlGrid, x: f64, y: f64) -> Vec<f64> {
    let mut b = Vec::with_capacity(grid.len() + 3);
    b.extend([x, y, 1.0]);
    b.extend(grid.points.iter().map(|c| kernel(Point2H::new(x, y), *c)));
    b
}

fn system_matrix(grid: &ControlGrid, ridge: f64) -> DMatrix<f64> {
    let l = grid.len();
    let mut d = DMatrix::zeros(l + 3, l + 3);
    for (j, p) in grid.points.iter().enumerate() {
        d[(j, 0)] = p.x;
        d[(j, 1)] = p.y;
        d[(j, 2)] = 1.0;
        for (k, q) in grid.points.iter().enumerate() {
            d[(j, 3 + k)] = kernel(*p, *q);
        }
        d[(j, 3 + j)] += ridge;
        d[(l, 3 + j)] = p.x;
        d[(l + 1, 3 + j)] = p.y;
        d[(l + 2, 3 + j)] = 1.0;
    }
    d
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Solved TPS parameters.
///
/// `affine` is the 3x3 matrix `T` (last row `[0, 0, 1]`); `nonaffine[j]`
/// holds the x and y rows of column `j` of `U` (its third row is zero).
#[derive(Clone, Debug)]
pub struct TpsTransform {
    pub affine: [[f64; 3]; 3],
    pub nonaffine: Vec<[f64; 2]>,
    pub source: Arc<ControlGrid>,
}

impl TpsTransform {
    pub fn identity(grid: Arc<ControlGrid>) -> Self {
        let l = grid.len();
        Self {
            affine: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            nonaffine: vec![[0.0; 2]; l],
            source: grid,
        }
    }

    pub fn apply(&self, p: Point2H) -> Point2H {
        Point2H::from(self.apply_xy(p.x, p.y))
    }

    #[inline]
    pub fn apply_xy(&self, x: f64, y: f64) -> [f64; 2] {
        let a = &self.affine;
        let mut ox = a[0][0] * x + a[0][1] * y + a[0][2];
        let mut oy = a[1][0] * x + a[1][1] * y + a[1][2];
        for (c, u) in self.source.points.iter().zip(&self.nonaffine) {
            let dx = x - c.x;
            let dy = y - c.y;
            let k = kernel_sq(dx * dx + dy * dy);
            ox += u[0] * k;
            oy += u[1] * k;
        }
        [ox, oy]
    }

    /// Transformed point and its Jacobian `d(out)/d(x, y)` (row-major).
    #[inline]
    pub fn apply_with_jacobian(&self, x: f64, y: f64) -> ([f64; 2], [[f64; 2]; 2]) {
        let a = &self.affine;
        let mut ox = a[0][0] * x + a[0][1] * y + a[0][2];
        let mut oy = a[1][0] * x + a[1][1] * y + a[1][2];
        let mut j = [[a[0][0], a[0][1]], [a[1][0], a[1][1]]];
        for (c, u) in self.source.points.iter().zip(&self.nonaffine) {
            let dx = x - c.x;
            let dy = y - c.y;
            let d2 = dx * dx + dy * dy;
            if d2 > 0.0 {
                let ln = d2.ln();
                let k = 0.5 * d2 * ln;
                let dk = ln + 1.0;
                ox += u[0] * k;
                oy += u[1] * k;
                j[0][0] += u[0] * dk * dx;
                j[0][1] += u[0] * dk * dy;
                j[1][0] += u[1] * dk * dx;
                j[1][1] += u[1] * dk * dy;
            }
        }
        ([ox, oy], j)
    }

    /// Max-abs entry of `C1 U^T`, which the solve constrains to zero.
    pub fn side_constraint_residual(&self) -> f64 {
        let mut m = [[0.0f64; 2]; 3];
        for (c, u) in self.source.points.iter().zip(&self.nonaffine) {
            for (r, v) in [c.x, c.y, 1.0].into_iter().enumerate() {
                m[r][0] += v * u[0];
                m[r][1] += v * u[1];
            }
        }
        m.iter().flatten().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// Frobenius norm of `U`.
    pub fn nonaffine_norm(&self) -> f64 {
        self.nonaffine.iter().map(|u| u[0] * u[0] + u[1] * u[1]).sum::<f64>().sqrt()
    }

    /// Evaluates the transform at every pixel center of an `height x width`
    /// raster and returns the displacement in pixels of that raster.
    pub fn sample_dense(&self, height: usize, width: usize) -> FlowField {
        let (sx, sy) = (1.0 / norm_per_pixel(width), 1.0 / norm_per_pixel(height));
        let disp = parallel::map_rows(height, |i| {
            let y = pixel_to_norm(i as f64, height);
            (0..width)
                .map(|j| {
                    let x = pixel_to_norm(j as f64, width);
                    let o = self.apply_xy(x, y);
                    [(o[0] - x) * sx, (o[1] - y) * sy]
                })
                .collect()
        });
        FlowField {
            height,
            width,
            u: disp.iter().map(|d| d[0]).collect(),
            v: disp.iter().map(|d| d[1]).collect(),
            valid: vec![true; height * width],
        }
    }
}

/// Checks a state against a grid size.
pub(crate) fn check_state(grid: &ControlGrid, state: &ControlState) -> Result<()> {
    check_size("control points", (grid.len(), 1), (state.points.len(), 1))
}
