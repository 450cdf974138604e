use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use gaussocc::camera::{load_cameras, save_cameras, CameraModel};
use gaussocc::fusion::{evaluate_global, update_global, FusionStrategy, GlobalState};
use gaussocc::objectives::fit::{fit_gaussians, FitConfig, DEFAULT_FREE_MASS};
use gaussocc::pipeline::{evaluate_local, predict_local, AnchorInit, PredictConfig};
use gaussocc::refine::EncoderWeights;
use gaussocc::worldgen::{
    generate_scene, generate_trajectory, SceneSpec, DEFAULT_DIMS, DEFAULT_FRAMES, DEFAULT_IMAGE, DEFAULT_VOXEL_SIZE,
};
use gaussocc::{iou_miou, GaussianSet, OccupancyGrid, NUM_CLASSES};
use serde::Deserialize;

use crate::report::{self, FrameRow};
use crate::{EncoderArgs, EvalArgs, ExploreArgs, FitArgs, GenArgs, PredictArgs};

/// Bad invocation detected after argument parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::error::Error for UsageError {}

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    seed: Option<u64>,
    dims: Option<[usize; 3]>,
    frames: Option<usize>,
    voxel_size: Option<f64>,
    image: Option<(usize, usize)>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    gaussians: Option<usize>,
    smax: Option<f64>,
    steps: Option<usize>,
    lr: Option<f64>,
    free_mass: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    weights: Option<String>,
    init: Option<AnchorInit>,
    gaussians: Option<usize>,
    smax: Option<f64>,
    feat_dim: Option<usize>,
    rounds: Option<usize>,
    free_mass: Option<f64>,
    seed: Option<u64>,
    strategy: Option<FusionStrategy>,
    frames: Option<usize>,
}

/// Per-command defaults read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    gen: GenSection,
    fit: FitSection,
    predict: EncoderSection,
    explore: EncoderSection,
}

pub fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else { return Ok(ConfigFile::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(gaussocc::Error::from)
        .with_context(|| format!("creating {}", dir.display()))
}

pub fn gen(a: GenArgs, cfg: &ConfigFile) -> Result<()> {
    let c = &cfg.gen;
    let seed = a.seed.or(c.seed).unwrap_or(0);
    let dims = a.dims.or(c.dims).unwrap_or(DEFAULT_DIMS);
    let frames = a.frames.map(|f| f as usize).or(c.frames).unwrap_or(DEFAULT_FRAMES);
    let vs = a.voxel_size.or(c.voxel_size).unwrap_or(DEFAULT_VOXEL_SIZE);
    let image = a.image.or(c.image).unwrap_or(DEFAULT_IMAGE);
    let spec = SceneSpec::new(seed, dims, vs)?;
    let grid = generate_scene(&spec)?;
    let cams = generate_trajectory(&grid.scene_box, frames, seed, image)?;
    create_dir(&a.out)?;
    grid.save(a.out.join("scene.occg"))?;
    spec.save(a.out.join("spec.json"))?;
    save_cameras(&cams, a.out.join("trajectory.json"))?;
    if a.export_csv {
        grid.export_csv(a.out.join("scene.csv"))?;
    }
    println!(
        "scene {}x{}x{} with {} occupied voxels, {} frames -> {}",
        dims[0],
        dims[1],
        dims[2],
        grid.occupied_count(),
        cams.len(),
        a.out.display()
    );
    Ok(())
}

pub fn fit(a: FitArgs, cfg: &ConfigFile) -> Result<()> {
    let c = &cfg.fit;
    let gt = OccupancyGrid::load(&a.gt).with_context(|| format!("reading {}", a.gt.display()))?;
    let mut fc = FitConfig::default();
    fc.num_gaussians = a.gaussians.map(|n| n as usize).or(c.gaussians).unwrap_or(fc.num_gaussians);
    fc.scale_cap = a.smax.or(c.smax).unwrap_or(fc.scale_cap);
    fc.steps = a.steps.or(c.steps).unwrap_or(fc.steps);
    fc.optimizer.lr = a.lr.or(c.lr).unwrap_or(fc.optimizer.lr);
    fc.free_mass = a.free_mass.or(c.free_mass).unwrap_or(fc.free_mass);
    fc.seed = a.seed.or(c.seed).unwrap_or(fc.seed);
    if fc.num_gaussians == 0 {
        return Err(UsageError("--gaussians must be at least 1".into()).into());
    }
    let r = fit_gaussians(&gt, NUM_CLASSES, &fc)?;
    create_dir(&a.out)?;
    GaussianSet::new(&r.anchors, gt.scene_box, fc.scale_cap).save(a.out.join("gaussians.json"))?;
    r.prediction.save(a.out.join("pred.occg"))?;
    report::write(a.out.join("losses.csv"), &report::losses_csv(&r.curve))?;
    report::write(a.out.join("metrics.csv"), &report::metrics_csv(&r.metrics))?;
    if a.export_csv {
        r.prediction.export_csv(a.out.join("pred.csv"))?;
    }
    let last = r.curve.last().map_or(f64::NAN, |l| l.total);
    println!("fit {} Gaussians, {} steps, final loss {last:.5}", fc.num_gaussians, fc.steps);
    println!("{}", report::summary(&r.metrics));
    Ok(())
}

struct Scene {
    grid: OccupancyGrid,
    cams: Vec<CameraModel>,
}

fn load_scene(dir: &Path) -> Result<Scene> {
    let grid = OccupancyGrid::load(dir.join("scene.occg")).with_context(|| format!("reading scene in {}", dir.display()))?;
    let cams = load_cameras(dir.join("trajectory.json")).with_context(|| format!("reading trajectory in {}", dir.display()))?;
    Ok(Scene { grid, cams })
}

fn predict_config(a: &EncoderArgs, c: &EncoderSection) -> PredictConfig {
    let mut p = PredictConfig::default();
    p.gaussians = a.gaussians.map(|n| n as usize).or(c.gaussians).unwrap_or(p.gaussians);
    p.s_max = a.smax.or(c.smax).unwrap_or(p.s_max);
    p.feat_dim = a.feat_dim.or(c.feat_dim).unwrap_or(p.feat_dim);
    p.rounds = a.rounds.or(c.rounds).unwrap_or(p.rounds);
    p.free_mass = a.free_mass.or(c.free_mass).unwrap_or(DEFAULT_FREE_MASS);
    p.init = a.init.or(c.init).unwrap_or(p.init);
    p.seed = a.seed.or(c.seed).unwrap_or(p.seed);
    p
}

fn encoder_weights(spec: &str, cfg: &PredictConfig) -> Result<EncoderWeights> {
    let ecfg = cfg.encoder_config();
    Ok(match spec {
        "zero" => EncoderWeights::zeros(&ecfg, cfg.rounds),
        "random" => EncoderWeights::random(&ecfg, cfg.rounds, cfg.seed, 1.0),
        path => EncoderWeights::load(path, &ecfg, cfg.rounds).with_context(|| format!("reading weights {path}"))?,
    })
}

fn camera(scene: &Scene, i: usize) -> Result<&CameraModel> {
    scene.cams.get(i).ok_or_else(|| {
        gaussocc::Error::Validation(format!("frame {i} is not in a trajectory of {} frames", scene.cams.len())).into()
    })
}

pub fn predict(a: PredictArgs, cfg: &ConfigFile) -> Result<()> {
    let c = &cfg.predict;
    let pc = predict_config(&a.encoder, c);
    pc.validate()?;
    let weights = encoder_weights(a.encoder.weights.as_deref().or(c.weights.as_deref()).unwrap_or("zero"), &pc)?;
    let scene = load_scene(&a.scene)?;
    let cam = camera(&scene, a.frame)?;
    let p = predict_local(&scene.grid, cam, &weights, &pc)?;
    let m = evaluate_local(&p, &scene.grid, cam)?;
    create_dir(&a.out)?;
    p.grid.save(a.out.join("pred.occg"))?;
    GaussianSet::new(&p.anchors, p.frame.scene_box, pc.s_max).save(a.out.join("gaussians.json"))?;
    report::write(a.out.join("metrics.csv"), &report::metrics_csv(&m))?;
    if a.export_csv {
        p.grid.export_csv(a.out.join("pred.csv"))?;
    }
    println!("frame {}: {} (frustum-masked)", a.frame, report::summary(&m));
    Ok(())
}

pub fn explore(a: ExploreArgs, cfg: &ConfigFile) -> Result<()> {
    let c = &cfg.explore;
    let pc = predict_config(&a.encoder, c);
    pc.validate()?;
    let weights = encoder_weights(a.encoder.weights.as_deref().or(c.weights.as_deref()).unwrap_or("zero"), &pc)?;
    let strategy = a.strategy.or(c.strategy).unwrap_or(FusionStrategy::Confidence);
    let scene = load_scene(&a.scene)?;
    let frames = a.frames.or(c.frames).unwrap_or(scene.cams.len()).min(scene.cams.len());
    let mut state = GlobalState::new(scene.grid.scene_box, strategy);
    let mut rows = Vec::with_capacity(frames);
    for (i, cam) in scene.cams.iter().take(frames).enumerate() {
        let frame_cfg = PredictConfig {
            seed: pc.seed.wrapping_add(i as u64),
            ..pc.clone()
        };
        let p = predict_local(&scene.grid, cam, &weights, &frame_cfg)?;
        let local = evaluate_local(&p, &scene.grid, cam)?;
        let stats = update_global(&mut state, &p.field, &p.frame, cam, pc.free_mass)?;
        let global = evaluate_global(&state, &scene.grid, NUM_CLASSES)?;
        log::info!("frame {i}: explored {} voxels, {}", stats.explored, report::summary(&global));
        println!("frame {i}: explored {}", stats.explored);
        rows.push(FrameRow {
            frame: i,
            region: stats.region,
            explored: stats.explored,
            local,
            global,
        });
    }
    state.save(&a.out)?;
    report::write(a.out.join("metrics.csv"), &report::explore_csv(&rows))?;
    if a.export_csv {
        state.grid.export_csv(a.out.join("global.csv"))?;
    }
    let m = evaluate_global(&state, &scene.grid, NUM_CLASSES)?;
    println!("{strategy} over {frames} frames: {}", report::summary(&m));
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let pred = OccupancyGrid::load(&a.pred).with_context(|| format!("reading {}", a.pred.display()))?;
    let gt = OccupancyGrid::load(&a.gt).with_context(|| format!("reading {}", a.gt.display()))?;
    let mask = match &a.mask {
        Some(p) => {
            let m = OccupancyGrid::load(p).with_context(|| format!("reading {}", p.display()))?;
            if !m.same_lattice(&gt) {
                return Err(gaussocc::Error::DimMismatch("mask differs from the ground-truth grid".into()).into());
            }
            Some(m.to_mask())
        }
        None => None,
    };
    let m = iou_miou(&pred, &gt, mask.as_deref(), NUM_CLASSES)?;
    let csv = report::metrics_csv(&m);
    if let Some(out) = &a.out {
        report::write(out, &csv)?;
    }
    print!("{csv}");
    Ok(())
}
