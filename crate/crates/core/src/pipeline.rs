//! Local prediction for one posed frame: render features, seed anchors,
//! run the encoder rounds, and splat into the box in front of the camera.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::error::{validation, Result};
use crate::fusion::{local_frame_for_camera, LocalFrame};
use crate::gaussian::{GaussianAnchor, UnconstrainedAnchor, DEFAULT_FEAT_DIM, DEFAULT_NUM_GAUSSIANS, DEFAULT_SCALE_CAP, NUM_CLASSES};
use crate::grid::{OccupancyGrid, SemanticField};
use crate::nn::Queries;
use crate::objectives::fit::predict_grid;
use crate::objectives::metrics::{iou_miou, Metrics};
use crate::refine::{activate_all, run_encoder, EncoderConfig, EncoderState, EncoderWeights, FrameInputs};
use crate::splat::{splat_forward, DEFAULT_CUTOFF_SIGMA};
use crate::worldgen::{frustum_mask, render_feature_pyramid, RenderedFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorInit {
    /// Means uniform in the local box, random rotations, neutral logits.
    Random,
    /// Means at back-projected depth hits of random pixels, semantics
    /// favoring the rendered class.
    Depth,
}

impl std::str::FromStr for AnchorInit {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(AnchorInit::Random),
            "depth" => Ok(AnchorInit::Depth),
            other => Err(validation(format!("unknown anchor init {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictConfig {
    pub gaussians: usize,
    pub s_max: f64,
    pub feat_dim: usize,
    pub rounds: usize,
    pub pyramid_levels: usize,
    pub cutoff_sigma: f64,
    pub free_mass: f64,
    pub init: AnchorInit,
    pub seed: u64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            gaussians: DEFAULT_NUM_GAUSSIANS,
            s_max: DEFAULT_SCALE_CAP,
            feat_dim: DEFAULT_FEAT_DIM,
            rounds: crate::refine::DEFAULT_ROUNDS,
            pyramid_levels: 3,
            cutoff_sigma: DEFAULT_CUTOFF_SIGMA,
            free_mass: crate::objectives::fit::DEFAULT_FREE_MASS,
            init: AnchorInit::Random,
            seed: 0,
        }
    }
}

impl PredictConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        let mut e = EncoderConfig::new(self.feat_dim, NUM_CLASSES, self.s_max);
        e.pyramid_levels = self.pyramid_levels;
        e
    }

    pub fn validate(&self) -> Result<()> {
        if self.gaussians == 0 {
            return Err(validation("need at least one Gaussian"));
        }
        if self.feat_dim < NUM_CLASSES + 1 {
            return Err(validation(format!("feature width must be at least {}", NUM_CLASSES + 1)));
        }
        if !(self.s_max > 0.0) || !(self.cutoff_sigma > 0.0) || self.free_mass < 0.0 || self.pyramid_levels == 0 {
            return Err(validation("scale cap, cutoff and pyramid levels must be positive"));
        }
        Ok(())
    }
}

pub struct LocalPrediction {
    pub frame: LocalFrame,
    pub initial: Vec<UnconstrainedAnchor>,
    pub anchors: Vec<GaussianAnchor>,
    pub field: SemanticField,
    pub grid: OccupancyGrid,
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        if q.iter().map(|v| v * v).sum::<f64>() > 1e-6 {
            return q;
        }
    }
}

/// Seeded initial anchors in the local frame.
pub fn initial_anchors(
    cfg: &PredictConfig,
    frame: &LocalFrame,
    cam: &CameraModel,
    rendered: &RenderedFrame,
    rng: &mut ChaCha8Rng,
) -> Vec<UnconstrainedAnchor> {
    let bx = &frame.scene_box;
    let rel = |p: &Vector3<f64>| -> [f64; 3] { std::array::from_fn(|k| logit((p[k] - bx.origin[k]) / bx.extent[k])) };
    let hits: Vec<usize> = (0..rendered.labels.len()).filter(|&p| rendered.labels[p] != 0).collect();
    let eye = cam.position();
    let rt = cam.rotation().transpose();
    let (fx, fy) = cam.focal();
    let (cx, cy) = (cam.k[(0, 2)], cam.k[(1, 2)]);
    (0..cfg.gaussians)
        .map(|_| {
            let raw_rotation = random_rotation(rng);
            let raw_scale = [0.0; 3];
            if cfg.init == AnchorInit::Depth && !hits.is_empty() {
                let p = hits[rng.random_range(0..hits.len())];
                let (i, j) = ((p / cam.width) as f64, (p % cam.width) as f64);
                let u = (j + rng.random_range(0.0..1.0) - cx) / fx;
                let v = (i + rng.random_range(0.0..1.0) - cy) / fy;
                let d = rendered.depth[p] + 0.5 * bx.voxel_size;
                let world = eye + rt * Vector3::new(u * d, v * d, d);
                let local = frame.pose.inverse_apply(&world);
                let mut sem = vec![0.0; NUM_CLASSES];
                sem[rendered.labels[p] as usize] = 4.0;
                UnconstrainedAnchor {
                    raw_mean: rel(&local),
                    raw_scale,
                    raw_rotation,
                    raw_opacity: 2.0,
                    raw_semantics: sem,
                }
            } else {
                UnconstrainedAnchor {
                    raw_mean: std::array::from_fn(|_| logit(rng.random_range(0.02..0.98))),
                    raw_scale,
                    raw_rotation,
                    raw_opacity: 0.0,
                    raw_semantics: (0..NUM_CLASSES).map(|_| StandardNormal.sample(rng)).collect(),
                }
            }
        })
        .collect()
}

/// Predicts semantic occupancy in the box in front of `cam`. Image features
/// are rendered from `scene` (the stand-in for a camera image).
pub fn predict_local(
    scene: &OccupancyGrid,
    cam: &CameraModel,
    weights: &EncoderWeights,
    cfg: &PredictConfig,
) -> Result<LocalPrediction> {
    cfg.validate()?;
    let ecfg = cfg.encoder_config();
    let frame = local_frame_for_camera(cam, &scene.scene_box, scene.dims())?;
    let rendered = render_feature_pyramid(scene, cam, cfg.pyramid_levels, cfg.feat_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial = initial_anchors(cfg, &frame, cam, &rendered, &mut rng);
    let queries = Queries::random(&mut rng, cfg.gaussians, cfg.feat_dim, 1.0);
    let local_cam = cam.relative_to(&frame.pose);
    let inputs = FrameInputs {
        scene_box: &frame.scene_box,
        camera: &local_cam,
        pyramid: &rendered.pyramid,
    };
    let state = run_encoder(
        EncoderState {
            raws: initial.clone(),
            queries,
        },
        weights,
        &inputs,
        &ecfg,
    )?;
    let anchors = activate_all(&state.raws, &frame.scene_box, cfg.s_max)?;
    let field = splat_forward(&anchors, &frame.scene_box, cfg.cutoff_sigma)?;
    let grid = predict_grid(&field, cfg.free_mass);
    Ok(LocalPrediction {
        frame,
        initial,
        anchors,
        field,
        grid,
    })
}

/// Scene labels carried into the local box by nearest voxel; free where
/// the local box leaves the scene.
pub fn local_ground_truth(scene: &OccupancyGrid, frame: &LocalFrame) -> OccupancyGrid {
    let lb = &frame.scene_box;
    let mut out = OccupancyGrid::empty(*lb);
    for i in 0..lb.num_voxels() {
        let [x, y, z] = lb.unflatten(i);
        let world = frame.pose.apply(&lb.voxel_center(x, y, z));
        if let Some([gx, gy, gz]) = scene.scene_box.voxel_of(&world) {
            out.labels[i] = scene.label_at(gx, gy, gz);
        }
    }
    out
}

/// Metrics of a local prediction over the part of its box inside the
/// camera frustum.
pub fn evaluate_local(pred: &LocalPrediction, scene: &OccupancyGrid, cam: &CameraModel) -> Result<Metrics> {
    let mask = frustum_mask(&cam.relative_to(&pred.frame.pose), &pred.frame.scene_box);
    let gt = local_ground_truth(scene, &pred.frame);
    iou_miou(&pred.grid, &gt, Some(&mask), NUM_CLASSES)
}
