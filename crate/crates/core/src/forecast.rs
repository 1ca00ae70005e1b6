//! Closed-form extrapolation of control-point trajectories.
//!
//! Every predictor outputs displacements relative to the last observed
//! state `p_T`; depth scores are carried forward unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::decompose::SceneDecomposition;
use crate::error::{Error, Result};
use crate::parallel::map_indexed;
use crate::tps::{check_state, ControlGrid, ControlState, Point2H};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Constant,
    Linear,
    Quadratic,
}

impl Model {
    /// Minimum number of observed steps.
    pub fn history(self) -> usize {
        match self {
            Model::Constant => 1,
            Model::Linear => 2,
            Model::Quadratic => 3,
        }
    }
}

impl std::str::FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Model::Constant),
            "linear" => Ok(Model::Linear),
            "quadratic" => Ok(Model::Quadratic),
            _ => Err(Error::InvalidArgument(format!("unknown model '{s}'"))),
        }
    }
}

/// Per-layer trajectories: an observed prefix followed by predicted steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySet {
    /// `states[layer][t]`.
    pub states: Vec<Vec<ControlState>>,
    pub observed: usize,
}

impl TrajectorySet {
    pub fn new(states: Vec<Vec<ControlState>>, observed: usize) -> Result<Self> {
        let s = Self { states, observed };
        s.validate()?;
        Ok(s)
    }

    /// The observed part of a decomposition's trajectories.
    pub fn from_decomposition(d: &SceneDecomposition) -> Result<Self> {
        let states = d.trajectories.iter().map(|t| t[..d.observed.min(t.len())].to_vec()).collect();
        Self::new(states, d.observed)
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.len();
        for (i, layer) in self.states.iter().enumerate() {
            if layer.len() != len {
                return Err(Error::SizeMismatch(format!("layer {i} has {} steps, expected {len}", layer.len())));
            }
            let n = layer.first().map_or(0, |s| s.points.len());
            if let Some(s) = layer.iter().find(|s| s.points.len() != n) {
                return Err(Error::SizeMismatch(format!("layer {i} changes point count at t={}", s.time)));
            }
        }
        if self.observed > len {
            return Err(Error::InvalidArgument(format!("{} observed of {len} steps", self.observed)));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.states.len()
    }

    pub fn len(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn predicted(&self) -> usize {
        self.len() - self.observed
    }

    pub fn is_observed(&self, t: usize) -> bool {
        t < self.observed
    }

    /// A copy of `d` whose trajectories are replaced by this set.
    pub fn apply_to(&self, d: &SceneDecomposition) -> Result<SceneDecomposition> {
        if self.layers() != d.layer_count() {
            return Err(Error::SizeMismatch(format!("{} layers vs {}", self.layers(), d.layer_count())));
        }
        for (grid, layer) in d.grids.iter().zip(&self.states) {
            for s in layer {
                check_state(grid, s)?;
            }
        }
        let mut out = d.clone();
        out.trajectories = self.states.clone();
        out.observed = self.observed;
        out.validate()?;
        Ok(out)
    }
}

/// Per-coordinate displacement from `p_T` at future step `k` (k >= 1).
fn displacement(history: &[[f64; 2]], model: Model, k: f64) -> [f64; 2] {
    let n = history.len();
    let last = history[n - 1];
    match model {
        Model::Constant => [0.0; 2],
        Model::Linear => {
            let prev = history[n - 2];
            [k * (last[0] - prev[0]), k * (last[1] - prev[1])]
        }
        Model::Quadratic => {
            // Fit offsets from p_T at relative times s = -(n-1)..0, so a
            // constant history yields exactly zero.
            let mut ata = nalgebra::Matrix3::<f64>::zeros();
            let mut atb = nalgebra::Matrix3x2::<f64>::zeros();
            for (idx, p) in history.iter().enumerate() {
                let s = idx as f64 - (n - 1) as f64;
                let row = nalgebra::Vector3::new(1.0, s, s * s);
                ata += row * row.transpose();
                for c in 0..2 {
                    for r in 0..3 {
                        atb[(r, c)] += row[r] * (p[c] - last[c]);
                    }
                }
            }
            let coef = ata.lu().solve(&atb).unwrap_or_else(nalgebra::Matrix3x2::zeros);
            let f = |s: f64, c: usize| coef[(0, c)] + coef[(1, c)] * s + coef[(2, c)] * s * s;
            [f(k, 0) - f(0.0, 0), f(k, 1) - f(0.0, 1)]
        }
    }
}

/// Extends the observed prefix of `traj` by `k` predicted steps. Any
/// previously predicted steps are discarded.
pub fn predict(traj: &TrajectorySet, model: Model, k: usize) -> Result<TrajectorySet> {
    traj.validate()?;
    let t = traj.observed;
    if t < model.history() {
        return Err(Error::InsufficientHistory { needed: model.history(), got: t });
    }
    let states = traj
        .states
        .iter()
        .map(|layer| {
            let obs = &layer[..t];
            let last = &obs[t - 1];
            let mut out = obs.to_vec();
            let hist: Vec<Vec<[f64; 2]>> =
                (0..last.points.len()).map(|j| obs.iter().map(|s| s.points[j].xy()).collect()).collect();
            for step in 1..=k {
                let points = hist
                    .iter()
                    .zip(&last.points)
                    .map(|(h, p)| {
                        let d = displacement(h, model, step as f64);
                        Point2H::new(p.x + d[0], p.y + d[1])
                    })
                    .collect();
                out.push(ControlState::new(last.layer, t - 1 + step, points, last.depth));
            }
            out
        })
        .collect();
    Ok(TrajectorySet { states, observed: t })
}

/// Mean L1 distance between predicted steps, over layers, steps, points
/// and coordinates.
pub fn loss_points(pred: &TrajectorySet, reference: &TrajectorySet) -> Result<f64> {
    if pred.layers() != reference.layers() || pred.len() != reference.len() || pred.observed != reference.observed {
        return Err(Error::SizeMismatch(format!(
            "trajectories {}x{} (T={}) vs {}x{} (T={})",
            pred.layers(),
            pred.len(),
            pred.observed,
            reference.layers(),
            reference.len(),
            reference.observed
        )));
    }
    if pred.predicted() == 0 {
        return Err(Error::SizeMismatch("no predicted steps to compare".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (a, b) in pred.states.iter().zip(&reference.states) {
        for (sa, sb) in a[pred.observed..].iter().zip(&b[pred.observed..]) {
            if sa.points.len() != sb.points.len() {
                return Err(Error::SizeMismatch(format!("{} vs {} points", sa.points.len(), sb.points.len())));
            }
            for (p, q) in sa.points.iter().zip(&sb.points) {
                total += (p.x - q.x).abs() + (p.y - q.y).abs();
                count += 2;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// `count` predictions with Gaussian noise of standard deviation `sigma`
/// added to every predicted coordinate. Sample `i` uses its own stream of
/// the seeded generator, so results do not depend on scheduling.
pub fn jitter_samples(
    traj: &TrajectorySet,
    model: Model,
    k: usize,
    sigma: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<TrajectorySet>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }
    let base = predict(traj, model, k)?;
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(map_indexed(count, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut s = base.clone();
        for layer in &mut s.states {
            for state in &mut layer[base.observed..] {
                for p in &mut state.points {
                    p.x += normal.sample(&mut rng);
                    p.y += normal.sample(&mut rng);
                }
            }
        }
        s
    }))
}

/// States at rest on `grid`, for tests and bootstrapping.
pub fn rest_trajectory(grid: &ControlGrid, layer: usize, steps: usize, depth: f64) -> Vec<ControlState> {
    (0..steps).map(|t| ControlState::at_rest(grid, layer, t, depth)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_fn(layers: usize, steps: usize, observed: usize, f: impl Fn(usize, usize, usize) -> [f64; 2]) -> TrajectorySet {
        let grid = ControlGrid::regular(3, 3);
        let states = (0..layers)
            .map(|i| {
                (0..steps)
                    .map(|t| {
                        let pts = (0..grid.len()).map(|j| Point2H::from(f(i, t, j))).collect();
                        ControlState::new(i, t, pts, i as f64)
                    })
                    .collect()
            })
            .collect();
        TrajectorySet::new(states, observed).unwrap()
    }

    #[test]
    fn constant_points_stay() {
        let tr = from_fn(2, 4, 4, |i, _, j| [0.1 * i as f64, -0.05 * j as f64]);
        for m in [Model::Constant, Model::Linear, Model::Quadratic] {
            let p = predict(&tr, m, 5).unwrap();
            assert_eq!(p.len(), 9);
            for l in 0..2 {
                for t in 4..9 {
                    assert_eq!(p.states[l][t].points, tr.states[l][3].points);
                    assert_eq!(p.states[l][t].depth, l as f64);
                    assert_eq!(p.states[l][t].time, t);
                }
            }
        }
    }

    #[test]
    fn linear_motion_is_exact() {
        let v = [0.013, -0.021];
        let tr = from_fn(1, 4, 4, |_, t, j| [j as f64 * 0.1 + t as f64 * v[0], 0.3 + t as f64 * v[1]]);
        for m in [Model::Linear, Model::Quadratic] {
            let p = predict(&tr, m, 6).unwrap();
            for k in 1..=6 {
                for (a, b) in p.states[0][3 + k].points.iter().zip(&tr.states[0][3].points) {
                    assert!((a.x - b.x - k as f64 * v[0]).abs() < 1e-9);
                    assert!((a.y - b.y - k as f64 * v[1]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn quadratic_residual_of_linear_model() {
        let a = [0.002, -0.001];
        let tr = from_fn(1, 4, 4, |_, t, _| [t as f64 * t as f64 * a[0], 0.5 + t as f64 * t as f64 * a[1]]);
        let lin = predict(&tr, Model::Linear, 3).unwrap();
        let quad = predict(&tr, Model::Quadratic, 3).unwrap();
        for k in 1..=3usize {
            let truth = |c: usize| (3 + k) as f64 * (3 + k) as f64 * a[c] + if c == 1 { 0.5 } else { 0.0 };
            let p = lin.states[0][3 + k].points[0];
            // Linear extrapolation misses by a (k^2 + k) when p_t = t^2 a.
            let kk = k as f64;
            assert!((truth(0) - p.x - a[0] * (kk * kk + kk)).abs() < 1e-12);
            assert!((truth(1) - p.y - a[1] * (kk * kk + kk)).abs() < 1e-12);
            let q = quad.states[0][3 + k].points[0];
            assert!((truth(0) - q.x).abs() < 1e-12 && (truth(1) - q.y).abs() < 1e-12);
        }
    }

    #[test]
    fn insufficient_history() {
        let tr = from_fn(1, 2, 2, |_, t, _| [t as f64, 0.0]);
        assert!(predict(&tr, Model::Linear, 1).is_ok());
        assert!(matches!(predict(&tr, Model::Quadratic, 1), Err(Error::InsufficientHistory { needed: 3, got: 2 })));
    }

    #[test]
    fn zero_steps_returns_observed() {
        let tr = from_fn(2, 5, 3, |_, t, j| [t as f64 * 0.1, j as f64]);
        let p = predict(&tr, Model::Quadratic, 0).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p.states[1][2], tr.states[1][2]);
    }

    #[test]
    fn loss_points_cases() {
        let a = predict(&from_fn(2, 3, 3, |_, t, j| [t as f64 * 0.01, j as f64 * 0.1]), Model::Linear, 4).unwrap();
        assert_eq!(loss_points(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        for l in &mut b.states {
            for s in &mut l[3..] {
                s.points.iter_mut().for_each(|p| p.x += 0.01);
            }
        }
        assert!((loss_points(&a, &b).unwrap() - 0.005).abs() < 1e-12);
        let c = predict(&from_fn(1, 3, 3, |_, _, _| [0.0, 0.0]), Model::Linear, 4).unwrap();
        assert!(matches!(loss_points(&a, &c), Err(Error::SizeMismatch(_))));
    }

    #[test]
    fn jitter_statistics() {
        let tr = from_fn(1, 3, 3, |_, t, j| [t as f64 * 0.02, j as f64 * 0.1]);
        let base = predict(&tr, Model::Linear, 2).unwrap();
        for s in jitter_samples(&tr, Model::Linear, 2, 0.0, 3, 5).unwrap() {
            assert_eq!(s, base);
        }
        let a = jitter_samples(&tr, Model::Linear, 2, 0.01, 1000, 42).unwrap();
        assert_eq!(a, jitter_samples(&tr, Model::Linear, 2, 0.01, 1000, 42).unwrap());
        let d: Vec<f64> = a.iter().map(|s| s.states[0][4].points[2].y - base.states[0][4].points[2].y).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
        assert!((std - 0.01).abs() < 0.0005, "{std}");
        assert!(jitter_samples(&tr, Model::Linear, 2, -1.0, 1, 0).is_err());
    }
}
