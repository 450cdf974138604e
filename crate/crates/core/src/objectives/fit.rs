//! Fitting Gaussians to a labeled grid by descent through the splatting
//! path.
//!
//! Voxel class probabilities come from the splatted semantic mass: the free
//! channel receives a constant background mass `free_mass`, then
//! `p = softmax(log(m + 1e-8))`, i.e. the shifted masses normalized. A voxel
//! no Gaussian reaches therefore predicts free.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{focal_loss, lovasz_softmax, scene_class_affinity, AffinityMode};
use super::metrics::{iou_miou, Metrics};
use crate::error::{validation, Error, Result};
use crate::gaussian::{activate, activation_backward, GaussianAnchor, UnconstrainedAnchor};
use crate::grid::{OccupancyGrid, SemanticField, DEFAULT_MASS_FLOOR};
use crate::splat::{field_to_grid, splat_backward, splat_forward, DEFAULT_CUTOFF_SIGMA};

const MASS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub focal: f64,
    pub lovasz: f64,
    pub geo: f64,
    pub sem: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            focal: 1.0,
            lovasz: 1.0,
            geo: 1.0,
            sem: 1.0,
        }
    }
}

/// Adaptive-moment step settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// How initial anchors are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitInit {
    /// Means uniform in the box, neutral semantics.
    Uniform,
    /// Means at randomly drawn occupied ground-truth voxels, semantics
    /// leaning toward that voxel's class.
    Occupied,
}

/// Background mass on the free channel used when turning mass into labels.
pub const DEFAULT_FREE_MASS: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub num_gaussians: usize,
    pub scale_cap: f64,
    pub steps: usize,
    pub optimizer: AdamParams,
    pub weights: LossWeights,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub cutoff_sigma: f64,
    /// Background mass added to the free channel before normalization.
    pub free_mass: f64,
    pub init: FitInit,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            num_gaussians: crate::gaussian::DEFAULT_NUM_GAUSSIANS,
            scale_cap: crate::gaussian::DEFAULT_SCALE_CAP,
            steps: 2000,
            optimizer: AdamParams::default(),
            weights: LossWeights::default(),
            focal_gamma: 2.0,
            focal_alpha: 1.0,
            cutoff_sigma: DEFAULT_CUTOFF_SIGMA,
            free_mass: DEFAULT_FREE_MASS,
            init: FitInit::Occupied,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub focal: f64,
    pub lovasz: f64,
    pub geo: f64,
    pub sem: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub anchors: Vec<GaussianAnchor>,
    pub raw: Vec<UnconstrainedAnchor>,
    pub curve: Vec<LossRecord>,
    pub prediction: OccupancyGrid,
    pub metrics: Metrics,
}

/// Shifted-mass class probabilities, voxel-major.
pub fn mass_to_probs(field: &SemanticField, free_mass: f64) -> Vec<f64> {
    let nc = field.num_classes;
    let mut probs = vec![0.0; field.values.len()];
    for v in 0..field.num_voxels() {
        let m = field.voxel(v);
        let out = &mut probs[v * nc..(v + 1) * nc];
        let mut z = 0.0;
        for k in 0..nc {
            let shifted = m[k] + if k == 0 { free_mass } else { 0.0 } + MASS_EPS;
            out[k] = shifted;
            z += shifted;
        }
        out.iter_mut().for_each(|p| *p /= z);
    }
    probs
}

/// Pulls a gradient with respect to the probabilities back to the masses.
fn probs_backward(field: &SemanticField, probs: &[f64], grad_probs: &[f64], free_mass: f64) -> SemanticField {
    let nc = field.num_classes;
    let mut up = SemanticField::zeros(field.scene_box, nc);
    for v in 0..field.num_voxels() {
        let m = field.voxel(v);
        let z: f64 = m.iter().sum::<f64>() + free_mass + nc as f64 * MASS_EPS;
        let p = &probs[v * nc..(v + 1) * nc];
        let g = &grad_probs[v * nc..(v + 1) * nc];
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (k, out) in up.voxel_mut(v).iter_mut().enumerate() {
            *out = (g[k] - dot) / z;
        }
    }
    up
}

/// Labels from the shifted masses, consistent with [`mass_to_probs`].
pub fn predict_grid(field: &SemanticField, free_mass: f64) -> OccupancyGrid {
    let mut shifted = field.clone();
    for v in 0..shifted.num_voxels() {
        shifted.voxel_mut(v)[0] += free_mass;
    }
    let mut grid = field_to_grid(&shifted, DEFAULT_MASS_FLOOR);
    if let Some(c) = grid.confidence.as_mut() {
        for (v, conf) in c.iter_mut().enumerate() {
            *conf = field.total_mass(v) as f32;
        }
    }
    grid
}

struct Adam {
    params: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(params: AdamParams, n: usize) -> Self {
        Adam {
            params,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64]) {
        self.t += 1;
        let AdamParams { lr, beta1, beta2, eps } = self.params;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g[i] * g[i];
            x[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
        }
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

fn initial_anchors(gt: &OccupancyGrid, cfg: &FitConfig, nc: usize) -> Vec<UnconstrainedAnchor> {
    let bx = gt.scene_box;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let occupied: Vec<usize> = (0..gt.labels.len()).filter(|&i| gt.labels[i] != 0).collect();
    let init = if occupied.is_empty() { FitInit::Uniform } else { cfg.init };
    let sites: Vec<usize> = match init {
        FitInit::Uniform => Vec::new(),
        FitInit::Occupied if occupied.len() >= cfg.num_gaussians => sample(&mut rng, occupied.len(), cfg.num_gaussians)
            .into_iter()
            .map(|i| occupied[i])
            .collect(),
        FitInit::Occupied => (0..cfg.num_gaussians)
            .map(|_| occupied[rng.random_range(0..occupied.len())])
            .collect(),
    };
    (0..cfg.num_gaussians)
        .map(|g| {
            let mut raw_semantics = vec![0.0; nc];
            let raw_mean = match init {
                FitInit::Uniform => std::array::from_fn(|_| rng.random_range(-2.0..2.0)),
                FitInit::Occupied => {
                    let site = sites[g];
                    let [ix, iy, iz] = bx.unflatten(site);
                    let c = bx.voxel_center(ix, iy, iz);
                    raw_semantics[gt.labels[site] as usize] = 2.0;
                    std::array::from_fn(|k| {
                        let jitter = rng.random_range(-0.25..0.25) * bx.voxel_size;
                        logit((c[k] + jitter - bx.origin[k]) / bx.extent[k])
                    })
                }
            };
            let small = |r: &mut ChaCha8Rng| r.random_range(-0.05..0.05);
            UnconstrainedAnchor {
                raw_mean,
                raw_scale: [0.0; 3],
                raw_rotation: [1.0, small(&mut rng), small(&mut rng), small(&mut rng)],
                raw_opacity: 0.0,
                raw_semantics,
            }
        })
        .collect()
}

/// Evaluates the weighted objective and its gradient with respect to the
/// semantic masses.
fn objective(
    field: &SemanticField,
    labels: &[u8],
    cfg: &FitConfig,
) -> Result<(LossRecord, SemanticField)> {
    let nc = field.num_classes;
    let probs = mass_to_probs(field, cfg.free_mass);
    let w = cfg.weights;
    let mut grad = vec![0.0; probs.len()];
    let mut rec = LossRecord {
        step: 0,
        total: 0.0,
        focal: 0.0,
        lovasz: 0.0,
        geo: 0.0,
        sem: 0.0,
    };
    let mut add = |weight: f64, value: f64, g: &[f64]| {
        if weight != 0.0 {
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += weight * b);
        }
        weight * value
    };
    if w.focal != 0.0 {
        let l = focal_loss(&probs, labels, nc, cfg.focal_gamma, cfg.focal_alpha)?;
        rec.focal = l.value;
        rec.total += add(w.focal, l.value, &l.grad);
    }
    if w.lovasz != 0.0 {
        let l = lovasz_softmax(&probs, labels, nc)?;
        rec.lovasz = l.value;
        rec.total += add(w.lovasz, l.value, &l.grad);
    }
    if w.geo != 0.0 {
        let l = scene_class_affinity(&probs, labels, nc, AffinityMode::Geometry)?;
        rec.geo = l.value;
        rec.total += add(w.geo, l.value, &l.grad);
    }
    if w.sem != 0.0 {
        let l = scene_class_affinity(&probs, labels, nc, AffinityMode::Semantic)?;
        rec.sem = l.value;
        rec.total += add(w.sem, l.value, &l.grad);
    }
    Ok((rec, probs_backward(field, &probs, &grad, cfg.free_mass)))
}

/// Fits `cfg.num_gaussians` anchors to `gt`.
pub fn fit_gaussians(gt: &OccupancyGrid, nc: usize, cfg: &FitConfig) -> Result<FitResult> {
    if cfg.num_gaussians == 0 {
        return Err(validation("need at least one Gaussian"));
    }
    if !(cfg.scale_cap > 0.0) {
        return Err(validation(format!("scale cap must be positive, got {}", cfg.scale_cap)));
    }
    gt.validate(nc)?;
    let bx = gt.scene_box;
    let mut raw = initial_anchors(gt, cfg, nc);
    let dim = raw[0].num_params();
    let mut params: Vec<f64> = raw.iter().flat_map(UnconstrainedAnchor::to_vec).collect();
    let mut adam = Adam::new(cfg.optimizer, params.len());
    let mut curve = Vec::with_capacity(cfg.steps + 1);

    for step in 0..=cfg.steps {
        let anchors = raw
            .iter()
            .map(|r| activate(r, &bx, cfg.scale_cap))
            .collect::<Result<Vec<_>>>()?;
        let field = splat_forward(&anchors, &bx, cfg.cutoff_sigma)?;
        let (mut rec, upstream) = objective(&field, &gt.labels, cfg)?;
        rec.step = step;
        if !rec.total.is_finite() {
            return Err(Error::Numerical(format!(
                "loss diverged at step {step}: {rec:?}"
            )));
        }
        curve.push(rec);
        if step == cfg.steps {
            break;
        }
        let grads = splat_backward(&anchors, &bx, cfg.cutoff_sigma, &upstream)?;
        let mut flat = Vec::with_capacity(params.len());
        for (r, g) in raw.iter().zip(&grads) {
            flat.extend(activation_backward(r, &bx, cfg.scale_cap, &g.to_packed())?);
        }
        if flat.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient at step {step}")));
        }
        adam.step(&mut params, &flat);
        for (g, r) in raw.iter_mut().enumerate() {
            let slice = &mut params[g * dim..(g + 1) * dim];
            // keep the rotation 4-vector near unit length; the activated
            // anchor is unchanged by this
            let n = slice[6..10].iter().map(|c| c * c).sum::<f64>().sqrt();
            if n > 1e-6 {
                slice[6..10].iter_mut().for_each(|c| *c /= n);
            }
            *r = UnconstrainedAnchor::from_slice(slice);
        }
        if step % 100 == 0 {
            log::debug!("fit step {step}: loss {:.5}", curve[step].total);
        }
    }

    let anchors = raw
        .iter()
        .map(|r| activate(r, &bx, cfg.scale_cap))
        .collect::<Result<Vec<_>>>()?;
    let field = splat_forward(&anchors, &bx, cfg.cutoff_sigma)?;
    let prediction = predict_grid(&field, cfg.free_mass);
    let metrics = iou_miou(&prediction, gt, None, nc)?;
    Ok(FitResult {
        anchors,
        raw,
        curve,
        prediction,
        metrics,
    })
}

/// Exponential moving average of the total loss.
pub fn loss_ema(curve: &[LossRecord], decay: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(curve.len());
    let mut acc = None;
    for r in curve {
        let next = match acc {
            None => r.total,
            Some(a) => decay * a + (1.0 - decay) * r.total,
        };
        acc = Some(next);
        out.push(next);
    }
    out
}

pub fn curve_to_csv(curve: &[LossRecord]) -> String {
    let mut s = String::from("step,loss,focal,lovasz,geo,sem\n");
    for r in curve {
        let _ = writeln!(
            s,
            "{},{:.9},{:.9},{:.9},{:.9},{:.9}",
            r.step, r.total, r.focal, r.lovasz, r.geo, r.sem
        );
    }
    s
}

pub fn write_curve_csv(curve: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, curve_to_csv(curve))?;
    Ok(())
}
