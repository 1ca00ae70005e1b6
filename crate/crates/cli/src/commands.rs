//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use lamoco_core::decompose::fit_decomposition;
use lamoco_core::forecast::{jitter_samples, predict, TrajectorySet};
use lamoco_core::metrics::{epe, mask_iou, matched_union, psnr, ssim};
use lamoco_core::scene::{generate, SceneSpec};
use lamoco_core::synth::synthesize;
use lamoco_core::warp::flow_to_color;
use serde::Serialize;

use crate::config::Config;
use crate::manifest::{self, ForecastInfo, Hyperparameters};
use crate::raster_io::{self as rio, CLASS_SIDECAR};
use crate::{flo, EvalArgs, FitArgs, FlowArgs, ForecastArgs, GenArgs, RenderFlowArgs, SynthArgs};

/// Share of a fitted layer's mass that must fall inside a ground-truth
/// object for the layer to count towards it.
const MATCH_SHARE: f64 = 0.5;

fn existing(path: PathBuf, what: &str) -> Result<PathBuf> {
    ensure!(path.is_file(), "missing {what} file {}", path.display());
    Ok(path)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let mut cfg = Config::load(a.config.as_deref())?;
    let w = &mut cfg.weights;
    if let Some(v) = a.lambda_o {
        w.lambda_o = v;
    }
    if let Some(v) = a.lambda_f {
        w.lambda_f = v;
    }
    if let Some(v) = a.lambda_r {
        w.lambda_r = v;
    }
    if let Some(v) = a.tau_m {
        w.tau_m = v;
    }
    let s = &mut cfg.fit;
    if let Some(v) = a.layers {
        s.layers = v;
    }
    if let Some(v) = a.grid_obj {
        s.grid_obj = v;
    }
    if let Some(v) = a.grid_bg {
        s.grid_bg = v;
    }
    if let Some(v) = a.iterations {
        s.optimizer.iterations = v;
    }
    let seed = a.seed.or(cfg.seed).unwrap_or(s.seed);
    s.seed = seed;

    let table = rio::read_classes(&existing(a.segs.join(CLASS_SIDECAR), "class table")?)?;
    let available = rio::list(&a.segs, "png")?.len();
    let t = a.frames.unwrap_or(available);
    ensure!(t >= 2, "need at least 2 observed frames, found {t}");
    let mut flows = Vec::with_capacity(t);
    let mut segs = Vec::with_capacity(t);
    for k in 0..t {
        flows.push(flo::read(&existing(a.flows.join(rio::flow_name(k)), "flow")?)?);
        segs.push(rio::read_seg(&existing(a.segs.join(rio::seg_name(k)), "segmentation")?, &table)?);
    }
    let out = fit_decomposition(&flows, &segs, &table, &cfg.weights, &cfg.fit)?;
    let hyper = Hyperparameters { seed, weights: cfg.weights, fit: Some(cfg.fit.clone()), forecast: None };
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    manifest::save(&a.out, &out.decomposition, hyper)?;
    let log: String = out.decomposition.history.iter().enumerate().map(|(i, v)| format!("{i} {v:.10e}\n")).collect();
    let log_path = a.out.with_extension("loss.txt");
    fs::write(&log_path, log).with_context(|| format!("writing {}", log_path.display()))?;
    println!(
        "fit: {:?}, downsample x{}, L_o {:.5} L_f {:.5} L_r {:.5} -> {}",
        out.status,
        out.factor,
        out.final_parts[0],
        out.final_parts[1],
        out.final_parts[2],
        a.out.display()
    );
    Ok(())
}

pub fn flow(a: &FlowArgs) -> Result<()> {
    let (_, d) = manifest::load(&a.manifest)?;
    let n = d.frames();
    ensure!(a.t1 < n && a.t2 < n, "steps ({}, {}) outside the manifest range 0..{n}", a.t1, a.t2);
    let (h, w) = a.size.unwrap_or((d.height, d.width));
    let f = d.flow(a.t1, a.t2, h, w)?;
    flo::write(&a.out, &f)
}

pub fn forecast(a: &ForecastArgs) -> Result<()> {
    let (m, d) = manifest::load(&a.manifest)?;
    let obs = TrajectorySet::from_decomposition(&d)?;
    let sets = if a.samples == 1 && a.sigma == 0.0 {
        vec![predict(&obs, a.model, a.k)?]
    } else {
        ensure!(a.samples >= 1, "--samples must be at least 1");
        jitter_samples(&obs, a.model, a.k, a.sigma, a.samples, a.seed)?
    };
    let many = sets.len() > 1;
    for (i, set) in sets.iter().enumerate() {
        let out = if many { numbered(&a.out, i) } else { a.out.clone() };
        let mut hyper = m.hyperparameters.clone();
        hyper.forecast = Some(ForecastInfo { model: a.model, steps: a.k, sigma: a.sigma, sample: i });
        if a.sigma > 0.0 {
            hyper.seed = a.seed;
        }
        manifest::save(&out, &set.apply_to(&d)?, hyper)?;
    }
    println!("forecast: {} step(s), {} sample(s) -> {}", a.k, sets.len(), a.out.display());
    Ok(())
}

fn numbered(path: &Path, i: usize) -> PathBuf {
    let stem = path.file_stem().map_or("manifest".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}_{i:03}.json"))
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let (_, d) = manifest::load(&a.manifest)?;
    ensure!(d.frames() > d.observed, "manifest has no predicted steps; run forecast first");
    let frames = (0..d.observed)
        .map(|t| rio::read_rgb(&existing(a.frames.join(rio::frame_name(t)), "frame")?))
        .collect::<Result<Vec<_>>>()?;
    for (t, f) in frames.iter().enumerate() {
        ensure!(f.dims() == (d.height, d.width), "frame {t} is {:?}, manifest is {}x{}", f.dims(), d.height, d.width);
    }
    let traj = TrajectorySet::new(d.trajectories.clone(), d.observed)?;
    let s = synthesize(&frames, &d, &traj, !a.no_propagate)?;
    create_dir(&a.out)?;
    for (k, (img, holes)) in s.frames.iter().zip(&s.holes).enumerate() {
        let t = d.observed + k;
        rio::write_rgb(&a.out.join(rio::frame_name(t)), img)?;
        let hm = lamoco_core::Mask::new(d.height, d.width, holes.iter().map(|&x| f64::from(u8::from(x))).collect());
        rio::write_mask8(&a.out.join(format!("holes_{t:04}.png")), &hm)?;
    }
    println!("synth: {} frame(s), hole pixels {:?} -> {}", s.frames.len(), s.hole_area(), a.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct FrameScore {
    t: usize,
    psnr: f64,
    ssim: f64,
}

#[derive(Debug, Serialize)]
struct Metrics {
    /// Mean endpoint error of consecutive observed flows, per step.
    epe: Vec<f64>,
    epe_mean: Option<f64>,
    /// Per ground-truth object, mean IoU over the observed frames.
    iou: Vec<f64>,
    frames: Vec<FrameScore>,
    /// Point loss against the ground-truth trajectories, when the layer
    /// structure matches.
    loss_points: Option<f64>,
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let (_, d) = manifest::load(&a.manifest)?;
    let clip = &a.clip;
    let t_obs = d.observed;
    let (h, w) = rio::read_rgb(&existing(clip.join("frames").join(rio::frame_name(0)), "frame")?)?.dims();

    let mut epes = Vec::new();
    for t in 1..t_obs {
        let truth = flo::read(&existing(clip.join("flows").join(rio::flow_name(t)), "flow")?)?;
        epes.push(epe(&d.flow(t - 1, t, h, w)?, &truth)?);
    }
    let table = rio::read_classes(&existing(clip.join("segs").join(CLASS_SIDECAR), "class table")?)?;
    let segs = (0..t_obs)
        .map(|t| rio::read_seg(&existing(clip.join("segs").join(rio::seg_name(t)), "segmentation")?, &table))
        .collect::<Result<Vec<_>>>()?;
    let masks = d.observed_masks(h, w, Some(&segs))?;
    let mut iou = Vec::new();
    for obj in 1.. {
        let first = clip.join("masks").join(rio::mask_name(0, obj));
        if !first.is_file() {
            break;
        }
        let mut acc = 0.0;
        for (t, layers) in masks.iter().enumerate() {
            let gt = rio::read_mask8(&existing(clip.join("masks").join(rio::mask_name(t, obj)), "mask")?)?;
            acc += mask_iou(&matched_union(&layers[1..], &gt, MATCH_SHARE)?, &gt, 0.5)?;
        }
        iou.push(acc / masks.len() as f64);
    }

    let mut frames = Vec::new();
    if let Some(pred) = &a.pred {
        for t in t_obs..d.frames() {
            let p = pred.join(rio::frame_name(t));
            let r = clip.join("frames").join(rio::frame_name(t));
            if p.is_file() && r.is_file() {
                let (p, r) = (rio::read_rgb(&p)?, rio::read_rgb(&r)?);
                frames.push(FrameScore { t, psnr: psnr(&p, &r)?, ssim: ssim(&p, &r)? });
            }
        }
    }

    let truth_path = clip.join("truth.json");
    let mut loss_points = None;
    if truth_path.is_file() && d.frames() > t_obs {
        let (_, truth) = manifest::load(&truth_path)?;
        let same = truth.grids == d.grids && truth.frames() >= d.frames() && truth.observed == t_obs;
        if same {
            let cut = |s: &Vec<Vec<lamoco_core::ControlState>>| s.iter().map(|l| l[..d.frames()].to_vec()).collect();
            let r = TrajectorySet::new(cut(&truth.trajectories), t_obs)?;
            let p = TrajectorySet::new(d.trajectories.clone(), t_obs)?;
            loss_points = Some(lamoco_core::forecast::loss_points(&p, &r)?);
        }
    }

    let epe_mean = (!epes.is_empty()).then(|| epes.iter().sum::<f64>() / epes.len() as f64);
    let m = Metrics { epe: epes, epe_mean, iou, frames, loss_points };
    let text = serde_json::to_string_pretty(&m)? + "\n";
    match &a.out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn gen(a: &GenArgs) -> Result<()> {
    let mut spec = match (&a.spec, a.preset.as_deref()) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading scene {}", p.display()))?;
            toml::from_str::<SceneSpec>(&text).with_context(|| format!("parsing scene {}", p.display()))?
        }
        (None, Some("canonical") | None) => SceneSpec::canonical(),
        (None, Some("static")) => SceneSpec::canonical_static(),
        (None, Some(other)) => bail!("unknown preset '{other}' (expected canonical or static)"),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let truth = generate(&spec)?;
    let out = &a.out;
    for sub in ["frames", "flows", "segs", "masks"] {
        create_dir(&out.join(sub))?;
    }
    for t in 0..spec.frames {
        rio::write_rgb(&out.join("frames").join(rio::frame_name(t)), &truth.frames[t])?;
        flo::write(&out.join("flows").join(rio::flow_name(t)), &truth.flows[t])?;
        rio::write_labels(&out.join("segs").join(rio::seg_name(t)), spec.height, spec.width, &truth.labels[t])?;
        for (i, m) in truth.masks[t].iter().enumerate() {
            rio::write_mask8(&out.join("masks").join(rio::mask_name(t, i)), m)?;
        }
    }
    rio::write_classes(&out.join("segs").join(CLASS_SIDECAR), &truth.class_table)?;
    let hyper = Hyperparameters { seed: spec.seed, weights: Default::default(), fit: None, forecast: None };
    manifest::save(&out.join("truth.json"), &truth.decomposition(), hyper)?;
    fs::write(out.join("scene.toml"), toml::to_string(&spec)?)?;
    println!("gen: {} frames of {}x{} -> {}", spec.frames, spec.height, spec.width, out.display());
    Ok(())
}

pub fn render_flow(a: &RenderFlowArgs) -> Result<()> {
    if a.flow.is_dir() {
        create_dir(&a.out)?;
        for p in rio::list(&a.flow, "flo")? {
            let name = p.with_extension("png");
            let name = name.file_name().context("flow file name")?;
            rio::write_rgb(&a.out.join(name), &flow_to_color(&flo::read(&p)?))?;
        }
        Ok(())
    } else {
        rio::write_rgb(&a.out, &flow_to_color(&flo::read(&a.flow)?))
    }
}
