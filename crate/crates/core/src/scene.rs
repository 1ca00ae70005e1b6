//! Synthetic layered scenes with exact ground truth.
//!
//! Every layer is a textured shape carried by a TPS whose control points
//! follow an analytic motion program, so frames, backward flow, visible
//! masks, segmentation and control-point trajectories are all exact.
//! Layers are composited with the painter's algorithm by depth rank.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decompose::{LossWeights, SceneDecomposition};
use crate::error::{Error, Result};
use crate::layers::{ClassInfo, ClassTable, LayerStack, SegMap, CANVAS_PER_GRID};
use crate::raster::{norm_per_pixel, pixel_to_norm, FlowField, Image, Mask};
use crate::tps::{ControlGrid, ControlState, Point2H, TpsSolver, TpsTransform};
use crate::warp::{invert_tps, InverseMap, DEFAULT_REACH};

/// Fraction of an object's canvas covered by its shape (half-extent).
pub const SHAPE_FILL: f64 = 0.75;
/// Fill reach used when inverting the background for rendering.
const BACKGROUND_REACH: usize = 64;
const TEXTURE_WAVES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Disk,
}

/// Motion relative to a layer's rest pose, as a function of the frame index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Motion {
    /// Translation in pixels per frame.
    pub velocity: [f64; 2],
    /// Rotation in radians per frame.
    pub rotation: f64,
    /// Log-scale change per frame.
    pub scale_rate: f64,
    /// Amplitude in pixels of a non-rigid sinusoidal wobble of the control
    /// points.
    pub wobble: f64,
}

impl Default for Motion {
    fn default() -> Self {
        Self { velocity: [0.0; 2], rotation: 0.0, scale_rate: 0.0, wobble: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Texture {
    /// Mean RGB color.
    pub base: [f64; 3],
    /// Peak deviation from the base color.
    pub contrast: f64,
    /// Shortest wavelength in pixels.
    pub wavelength: f64,
}

impl Default for Texture {
    fn default() -> Self {
        Self { base: [0.5, 0.5, 0.5], contrast: 0.35, wavelength: 12.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    /// Center in pixels at frame 0.
    pub center: [f64; 2],
    /// Half-size of the shape in pixels.
    pub half_size: f64,
    /// Depth rank; larger ranks are drawn in front. Must be >= 1 and unique.
    pub depth: f64,
    pub class: String,
    #[serde(default)]
    pub texture: Texture,
    #[serde(default)]
    pub motion: Motion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    #[serde(default = "default_bg_class")]
    pub class: String,
    #[serde(default)]
    pub texture: Texture,
    /// Motion relative to the rest pose, which is the last observed frame.
    #[serde(default)]
    pub motion: Motion,
}

fn default_bg_class() -> String {
    "ground".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Total number of frames `T + K`.
    pub frames: usize,
    /// Number of observed frames `T`.
    pub observed: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_grid_obj")]
    pub grid_obj: (usize, usize),
    #[serde(default = "default_grid_bg")]
    pub grid_bg: (usize, usize),
    pub background: BackgroundSpec,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
}

fn default_grid_obj() -> (usize, usize) {
    (4, 4)
}

fn default_grid_bg() -> (usize, usize) {
    (8, 16)
}

impl SceneSpec {
    /// Two rigid movers over a translating background: 128x256, 4 observed
    /// frames followed by 5 future ones.
    pub fn canonical() -> Self {
        Self::two_objects([2.0, 0.0])
    }

    /// The canonical scene with a static camera.
    pub fn canonical_static() -> Self {
        Self::two_objects([0.0, 0.0])
    }

    fn two_objects(bg_velocity: [f64; 2]) -> Self {
        let obj = |shape, center, depth, class: &str, base, velocity| ObjectSpec {
            shape,
            center,
            half_size: 24.0,
            depth,
            class: class.into(),
            texture: Texture { base, contrast: 0.3, wavelength: 12.0 },
            motion: Motion { velocity, ..Motion::default() },
        };
        Self {
            height: 128,
            width: 256,
            frames: 9,
            observed: 4,
            seed: 7,
            grid_obj: default_grid_obj(),
            grid_bg: default_grid_bg(),
            background: BackgroundSpec {
                class: "road".into(),
                texture: Texture { base: [0.45, 0.5, 0.45], contrast: 0.3, wavelength: 14.0 },
                motion: Motion { velocity: bg_velocity, ..Motion::default() },
            },
            objects: vec![
                obj(Shape::Square, [60.0, 50.0], 1.0, "car", [0.75, 0.35, 0.3], [3.0, 1.0]),
                obj(Shape::Disk, [190.0, 70.0], 2.0, "person", [0.3, 0.4, 0.8], [-2.0, -1.0]),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.height < 8 || self.width < 8 {
            return bad(format!("resolution {}x{} below 8x8", self.height, self.width));
        }
        if self.frames < 2 || self.observed < 1 || self.observed > self.frames {
            return bad(format!("{} observed of {} frames", self.observed, self.frames));
        }
        let textures = std::iter::once(&self.background.texture).chain(self.objects.iter().map(|o| &o.texture));
        for t in textures {
            if !(t.wavelength > 0.0 && t.contrast >= 0.0 && t.base.iter().all(|c| (0.0..=1.0).contains(c))) {
                return bad(format!("invalid texture {t:?}"));
            }
        }
        for (k, o) in self.objects.iter().enumerate() {
            if !(o.half_size > 0.0 && o.depth >= 1.0 && o.depth.is_finite()) {
                return bad(format!("object {k}: half_size must be > 0 and depth >= 1"));
            }
            if self.objects[..k].iter().any(|p| p.depth == o.depth) {
                return bad(format!("object {k}: depth rank {} is not unique", o.depth));
            }
            for t in 0..self.frames {
                let inside = self.in_frame_fraction(k, t);
                if inside < 0.5 {
                    return bad(format!("object {k} is {:.0}% in frame at t={t}", inside * 100.0));
                }
            }
        }
        let (go, gb) = (self.grid_obj, self.grid_bg);
        if go.0 < 2 || go.1 < 2 || gb.0 < 2 || gb.1 < 2 {
            return bad("control grids need at least 2x2 points".into());
        }
        Ok(())
    }

    fn in_frame_fraction(&self, k: usize, t: usize) -> f64 {
        let o = &self.objects[k];
        let n = 15;
        let (mut hit, mut total) = (0, 0);
        for a in 0..n {
            for b in 0..n {
                let u = [-1.0 + 2.0 * (a as f64 + 0.5) / n as f64, -1.0 + 2.0 * (b as f64 + 0.5) / n as f64];
                let u = [u[0] * SHAPE_FILL, u[1] * SHAPE_FILL];
                if !inside_shape(o.shape, u) {
                    continue;
                }
                total += 1;
                let p = self.object_pose(k, t as f64, u);
                if p[0] >= -0.5 && p[1] >= -0.5 && p[0] < self.width as f64 - 0.5 && p[1] < self.height as f64 - 0.5 {
                    hit += 1;
                }
            }
        }
        hit as f64 / total.max(1) as f64
    }

    /// Pixel position at (possibly fractional or negative) time `t` of the
    /// object point with intrinsic coordinates `u`.
    fn object_pose(&self, k: usize, t: f64, u: [f64; 2]) -> [f64; 2] {
        let o = &self.objects[k];
        let radius = o.half_size / SHAPE_FILL;
        let r = [u[0] * radius, u[1] * radius];
        let d = moved(&o.motion, t, r, u);
        [o.center[0] + o.motion.velocity[0] * t + d[0], o.center[1] + o.motion.velocity[1] * t + d[1]]
    }

    fn background_pose(&self, t: f64, u: [f64; 2]) -> [f64; 2] {
        let m = &self.background.motion;
        let dt = t - (self.observed - 1) as f64;
        let (cx, cy) = ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0);
        let r = [u[0] * self.width as f64 / 2.0, u[1] * self.height as f64 / 2.0];
        let d = moved(m, dt, r, u);
        [cx + m.velocity[0] * dt + d[0], cy + m.velocity[1] * dt + d[1]]
    }

    /// Rest-pose pixel position of an intrinsic point (texture coordinates).
    fn rest(&self, layer: usize, u: [f64; 2]) -> [f64; 2] {
        if layer == 0 {
            [u[0] * self.width as f64 / 2.0, u[1] * self.height as f64 / 2.0]
        } else {
            let r = self.objects[layer - 1].half_size / SHAPE_FILL;
            [u[0] * r, u[1] * r]
        }
    }

    fn grid(&self, layer: usize) -> ControlGrid {
        let (r, c) = if layer == 0 { self.grid_bg } else { self.grid_obj };
        ControlGrid::regular(r, c)
    }

    /// Control points of `layer` at time `t` (normalized frame coordinates).
    fn control_points(&self, layer: usize, t: f64) -> Vec<[f64; 2]> {
        let (nx, ny) = (norm_per_pixel(self.width), norm_per_pixel(self.height));
        self.grid(layer)
            .points
            .iter()
            .map(|g| {
                let p = if layer == 0 { self.background_pose(t, g.xy()) } else { self.object_pose(layer - 1, t, g.xy()) };
                [(p[0] + 0.5) * nx - 1.0, (p[1] + 0.5) * ny - 1.0]
            })
            .collect()
    }

    pub fn class_table(&self) -> ClassTable {
        let mut classes = vec![ClassInfo { name: self.background.class.clone(), stuff: true }];
        for o in &self.objects {
            if !classes.iter().any(|c| c.name == o.class) {
                classes.push(ClassInfo { name: o.class.clone(), stuff: false });
            }
        }
        ClassTable::new(classes)
    }

    fn class_of(&self, layer: usize, table: &ClassTable) -> usize {
        let name = if layer == 0 { &self.background.class } else { &self.objects[layer - 1].class };
        table.classes.iter().position(|c| &c.name == name).unwrap_or(0)
    }
}

/// Rotation, scaling and wobble of a rest offset `r` (pixels).
fn moved(m: &Motion, t: f64, r: [f64; 2], u: [f64; 2]) -> [f64; 2] {
    let s = (m.scale_rate * t).exp();
    let (sn, cs) = (m.rotation * t).sin_cos();
    let mut d = [s * (cs * r[0] - sn * r[1]), s * (sn * r[0] + cs * r[1])];
    if m.wobble != 0.0 {
        let pi = std::f64::consts::PI;
        d[0] += m.wobble * (pi * u[1] + 0.9 * t).sin() * (0.7 * t).sin();
        d[1] += m.wobble * (pi * u[0] + 1.3 * t).sin() * (0.7 * t).sin();
    }
    d
}

fn inside_shape(shape: Shape, u: [f64; 2]) -> bool {
    match shape {
        Shape::Square => u[0].abs() <= SHAPE_FILL && u[1].abs() <= SHAPE_FILL,
        Shape::Disk => u[0].hypot(u[1]) <= SHAPE_FILL,
    }
}

/// Band-limited texture: a sum of random plane waves.
#[derive(Clone, Debug)]
struct Waves {
    base: [f64; 3],
    waves: Vec<([f64; 2], f64, [f64; 3])>,
}

impl Waves {
    fn new(tex: &Texture, rng: &mut ChaCha8Rng) -> Self {
        let mut waves = Vec::with_capacity(TEXTURE_WAVES);
        for _ in 0..TEXTURE_WAVES {
            let lambda = tex.wavelength * rng.random_range(1.0..3.0);
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = [theta.cos() / lambda, theta.sin() / lambda];
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = [0; 3].map(|_| rng.random_range(-1.0..1.0) * tex.contrast / TEXTURE_WAVES as f64 * 2.0);
            waves.push((freq, phase, amp));
        }
        Self { base: tex.base, waves }
    }

    fn color(&self, p: [f64; 2]) -> [f64; 3] {
        let mut c = self.base;
        for (f, phase, amp) in &self.waves {
            let s = (std::f64::consts::TAU * (f[0] * p[0] + f[1] * p[1]) + phase).sin();
            for ch in 0..3 {
                c[ch] += amp[ch] * s;
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

/// Exact ground truth of a generated scene.
#[derive(Clone, Debug)]
pub struct SceneTruth {
    pub spec: SceneSpec,
    pub frames: Vec<Image>,
    /// Backward flow of every frame; frame 0 points to a virtual frame -1.
    pub flows: Vec<FlowField>,
    /// Visible binary masks `[t][layer]`, background first.
    pub masks: Vec<Vec<Mask>>,
    /// `[layer][t]`, depth scores equal to depth ranks.
    pub trajectories: Vec<Vec<ControlState>>,
    pub grids: Vec<ControlGrid>,
    pub segs: Vec<SegMap>,
    /// Hard labels of `segs`.
    pub labels: Vec<Vec<usize>>,
    pub class_table: ClassTable,
}

pub fn generate(spec: &SceneSpec) -> Result<SceneTruth> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let n = spec.objects.len() + 1;
    let table = spec.class_table();
    let grids: Vec<ControlGrid> = (0..n).map(|i| spec.grid(i)).collect();
    let solvers: Vec<TpsSolver> = grids.iter().map(|g| TpsSolver::new(g.clone(), 0.0)).collect::<Result<_>>()?;
    let textures: Vec<Waves> = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
            let tex = if i == 0 { &spec.background.texture } else { &spec.objects[i - 1].texture };
            Waves::new(tex, &mut rng)
        })
        .collect();
    let depth = |i: usize| if i == 0 { 0.0 } else { spec.objects[i - 1].depth };
    let mut order: Vec<usize> = (1..n).collect();
    order.sort_by(|a, b| depth(*b).total_cmp(&depth(*a)));
    order.push(0);

    let transform = |i: usize, t: f64| solvers[i].solve_xy(&spec.control_points(i, t));
    let trajectories: Vec<Vec<ControlState>> = (0..n)
        .map(|i| {
            (0..spec.frames)
                .map(|t| {
                    let pts = spec.control_points(i, t as f64).into_iter().map(Point2H::from).collect();
                    ControlState::new(i, t, pts, depth(i))
                })
                .collect()
        })
        .collect();

    let (sx, sy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut frames = Vec::with_capacity(spec.frames);
    let mut flows = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    let mut segs = Vec::with_capacity(spec.frames);
    let mut labels = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let cur: Vec<TpsTransform> = (0..n).map(|i| transform(i, t as f64)).collect::<Result<_>>()?;
        let prev: Vec<TpsTransform> = (0..n).map(|i| transform(i, t as f64 - 1.0)).collect::<Result<_>>()?;
        let inv: Vec<InverseMap> = cur
            .iter()
            .enumerate()
            .map(|(i, xf)| invert_tps(xf, h, w, if i == 0 { BACKGROUND_REACH } else { DEFAULT_REACH }))
            .collect();
        let mut img = vec![0.0; h * w * 3];
        let mut flow = FlowField::zeros(h, w);
        let mut frame_masks = vec![Mask::zeros(h, w); n];
        let mut lab = vec![0usize; h * w];
        for k in 0..h * w {
            let top = order.iter().copied().find(|&i| {
                inv[i].valid[k] && (i == 0 || inside_shape(spec.objects[i - 1].shape, inv[i].points[k]))
            });
            let Some(i) = top else {
                flow.valid[k] = false;
                continue;
            };
            let u = inv[i].points[k];
            let c = textures[i].color(spec.rest(i, u));
            img[k * 3..k * 3 + 3].copy_from_slice(&c);
            let o = prev[i].apply_xy(u[0], u[1]);
            let q = [pixel_to_norm((k % w) as f64, w), pixel_to_norm((k / w) as f64, h)];
            flow.u[k] = (o[0] - q[0]) * sx;
            flow.v[k] = (o[1] - q[1]) * sy;
            frame_masks[i].data[k] = 1.0;
            lab[k] = spec.class_of(i, &table);
        }
        frames.push(Image::new(h, w, 3, img));
        flows.push(flow);
        masks.push(frame_masks);
        segs.push(SegMap::from_labels(h, w, table.len(), &lab)?);
        labels.push(lab);
    }
    Ok(SceneTruth { spec: spec.clone(), frames, flows, masks, trajectories, grids, segs, labels, class_table: table })
}

impl SceneTruth {
    /// The exact decomposition: ground-truth trajectories over all frames,
    /// rasterized shapes as intrinsic masks and one-hot classes.
    pub fn decomposition(&self) -> SceneDecomposition {
        let spec = &self.spec;
        let n = self.grids.len();
        let (ch, cw) = (spec.grid_obj.0 * CANVAS_PER_GRID, spec.grid_obj.1 * CANVAS_PER_GRID);
        let mut intrinsic = vec![Mask::filled(spec.grid_bg.0, spec.grid_bg.1, 1.0)];
        let mut classes = Vec::with_capacity(n);
        let mut onehot = |c: usize| {
            let mut v = vec![0.0; self.class_table.len()];
            v[c] = 1.0;
            classes.push(v);
        };
        onehot(spec.class_of(0, &self.class_table));
        for (k, o) in spec.objects.iter().enumerate() {
            let sub = 4;
            let data = (0..ch * cw)
                .map(|c| {
                    let (i, j) = ((c / cw) as f64, (c % cw) as f64);
                    let mut hit = 0;
                    for a in 0..sub {
                        for b in 0..sub {
                            let x = -1.0 + 2.0 * (j + (b as f64 + 0.5) / sub as f64) / cw as f64;
                            let y = -1.0 + 2.0 * (i + (a as f64 + 0.5) / sub as f64) / ch as f64;
                            hit += usize::from(inside_shape(o.shape, [x, y]));
                        }
                    }
                    hit as f64 / (sub * sub) as f64
                })
                .collect();
            intrinsic.push(Mask::new(ch, cw, data));
            onehot(spec.class_of(k + 1, &self.class_table));
        }
        SceneDecomposition {
            height: spec.height,
            width: spec.width,
            observed: spec.observed,
            grids: self.grids.clone(),
            trajectories: self.trajectories.clone(),
            stack: LayerStack { intrinsic, warped: Vec::new(), classes },
            class_table: self.class_table.clone(),
            weights: LossWeights::default(),
            history: Vec::new(),
        }
    }
}
