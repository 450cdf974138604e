//! Anchor decoding from queries and the self → cross → refine encoder round.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::CameraModel;
use crate::error::{validation, Error, Result};
use crate::exec;
use crate::gaussian::{activate, GaussianAnchor, Quat, SceneBox, UnconstrainedAnchor, GEOMETRY_PARAMS};
use crate::gce::{cross_encode, FeaturePyramid, MixWeights, OffsetTemplate};
use crate::nn::{relu_in_place, Linear, Queries, WeightFile};
use crate::ose::{multiscale_self_encode, voxelize_queries, OseWeights, DEFAULT_NUM_SCALES, DEFAULT_SE_VOXEL_SIZE};

pub const DEFAULT_ROUNDS: usize = 3;

/// Two-layer perceptron from a query to a residual on the raw anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineHead {
    pub l1: Linear,
    pub l2: Linear,
}

impl RefineHead {
    pub fn zeros(width: usize, num_classes: usize) -> Self {
        RefineHead {
            l1: Linear::zeros(width, width),
            l2: Linear::zeros(width, GEOMETRY_PARAMS + num_classes),
        }
    }

    pub fn random<R: rand::Rng>(rng: &mut R, width: usize, num_classes: usize, gain: f64) -> Self {
        RefineHead {
            l1: Linear::random(rng, width, width, gain),
            l2: Linear::random(rng, width, GEOMETRY_PARAMS + num_classes, gain),
        }
    }

    pub fn forward(&self, q: &[f64]) -> Vec<f64> {
        let mut h = self.l1.forward(q);
        relu_in_place(&mut h);
        self.l2.forward(&h)
    }

    pub fn store(&self, w: &mut WeightFile, prefix: &str) {
        self.l1.store(w, &format!("{prefix}.l1"));
        self.l2.store(w, &format!("{prefix}.l2"));
    }

    pub fn load(w: &WeightFile, prefix: &str, width: usize, num_classes: usize) -> Result<Self> {
        Ok(RefineHead {
            l1: Linear::load(w, &format!("{prefix}.l1"), width, width)?,
            l2: Linear::load(w, &format!("{prefix}.l2"), width, GEOMETRY_PARAMS + num_classes)?,
        })
    }
}

/// `raw' = raw + head(q)`. A rotation residual that collapses the raw
/// quaternion to (near) zero keeps the previous rotation.
pub fn refine_anchors(queries: &Queries, raws: &[UnconstrainedAnchor], head: &RefineHead) -> Result<Vec<UnconstrainedAnchor>> {
    if queries.len() != raws.len() {
        return Err(validation("one query per anchor is required"));
    }
    let out = exec::map_indices(raws.len(), |i| {
        let delta = head.forward(queries.row(i));
        let mut v = raws[i].to_vec();
        if delta.len() != v.len() {
            return Err(validation(format!(
                "head emits {} values for {} anchor parameters",
                delta.len(),
                v.len()
            )));
        }
        for (a, d) in v.iter_mut().zip(&delta) {
            *a += d;
        }
        let mut next = UnconstrainedAnchor::from_slice(&v);
        if Quat(next.raw_rotation).norm() < 1e-12 {
            next.raw_rotation = raws[i].raw_rotation;
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("refined anchor {i} is not finite")));
        }
        Ok(next)
    });
    out.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub feat_dim: usize,
    pub num_classes: usize,
    pub scale_cap: f64,
    pub se_voxel_size: f64,
    pub num_scales: usize,
    pub template: OffsetTemplate,
    pub pyramid_levels: usize,
    pub pyramid_channels: usize,
}

impl EncoderConfig {
    pub fn new(feat_dim: usize, num_classes: usize, scale_cap: f64) -> Self {
        EncoderConfig {
            feat_dim,
            num_classes,
            scale_cap,
            se_voxel_size: DEFAULT_SE_VOXEL_SIZE,
            num_scales: DEFAULT_NUM_SCALES,
            template: OffsetTemplate::default(),
            pyramid_levels: 3,
            pyramid_channels: feat_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundWeights {
    pub ose: OseWeights,
    pub gce: MixWeights,
    pub head: RefineHead,
}

/// Weights for every round; rounds do not share parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub rounds: Vec<RoundWeights>,
}

impl EncoderWeights {
    pub fn zeros(cfg: &EncoderConfig, rounds: usize) -> Self {
        let r = cfg.template.len();
        EncoderWeights {
            rounds: (0..rounds)
                .map(|_| RoundWeights {
                    ose: OseWeights::zeros(cfg.feat_dim, cfg.num_scales),
                    gce: MixWeights::zeros(cfg.feat_dim, r, cfg.pyramid_levels, cfg.pyramid_channels),
                    head: RefineHead::zeros(cfg.feat_dim, cfg.num_classes),
                })
                .collect(),
        }
    }

    /// Uniform random weights scaled by `gain / √fan_in`.
    pub fn random(cfg: &EncoderConfig, rounds: usize, seed: u64, gain: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = cfg.template.len();
        EncoderWeights {
            rounds: (0..rounds)
                .map(|_| RoundWeights {
                    ose: OseWeights::random(&mut rng, cfg.feat_dim, cfg.num_scales, gain),
                    gce: MixWeights::random(&mut rng, cfg.feat_dim, r, cfg.pyramid_levels, cfg.pyramid_channels, gain),
                    head: RefineHead::random(&mut rng, cfg.feat_dim, cfg.num_classes, gain),
                })
                .collect(),
        }
    }

    pub fn to_file(&self) -> WeightFile {
        let mut w = WeightFile::default();
        for (k, r) in self.rounds.iter().enumerate() {
            r.ose.store(&mut w, &format!("round{k}.ose"));
            r.gce.store(&mut w, &format!("round{k}.gce"));
            r.head.store(&mut w, &format!("round{k}.refine.head"));
        }
        w
    }

    pub fn from_file(w: &WeightFile, cfg: &EncoderConfig, rounds: usize) -> Result<Self> {
        let r = cfg.template.len();
        let rounds = (0..rounds)
            .map(|k| {
                Ok(RoundWeights {
                    ose: OseWeights::load(w, &format!("round{k}.ose"), cfg.feat_dim, cfg.num_scales)?,
                    gce: MixWeights::load(
                        w,
                        &format!("round{k}.gce"),
                        cfg.feat_dim,
                        r,
                        cfg.pyramid_levels,
                        cfg.pyramid_channels,
                    )?,
                    head: RefineHead::load(w, &format!("round{k}.refine.head"), cfg.feat_dim, cfg.num_classes)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderWeights { rounds })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_file().save(path)
    }

    pub fn load(path: impl AsRef<Path>, cfg: &EncoderConfig, rounds: usize) -> Result<Self> {
        Self::from_file(&WeightFile::load(path)?, cfg, rounds)
    }
}

/// Anchors and their queries between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub raws: Vec<UnconstrainedAnchor>,
    pub queries: Queries,
}

/// The image-side inputs of one frame, with the camera expressed in the
/// frame of `scene_box`.
pub struct FrameInputs<'a> {
    pub scene_box: &'a SceneBox,
    pub camera: &'a CameraModel,
    pub pyramid: &'a FeaturePyramid,
}

pub fn activate_all(raws: &[UnconstrainedAnchor], bx: &SceneBox, scale_cap: f64) -> Result<Vec<GaussianAnchor>> {
    raws.iter().map(|r| activate(r, bx, scale_cap)).collect()
}

/// Self-encoder, cross-encoder, then residual anchor refinement.
pub fn encode_round(
    state: &EncoderState,
    weights: &EncoderWeights,
    round: usize,
    frame: &FrameInputs<'_>,
    cfg: &EncoderConfig,
) -> Result<EncoderState> {
    let w = weights
        .rounds
        .get(round)
        .ok_or_else(|| validation(format!("no weights for round {round}")))?;
    let anchors = activate_all(&state.raws, frame.scene_box, cfg.scale_cap)?;
    let sparse = voxelize_queries(&anchors, &state.queries, frame.scene_box, cfg.se_voxel_size)?;
    let q = multiscale_self_encode(&sparse, &state.queries, &w.ose, cfg.num_scales)?;
    let q = cross_encode(&anchors, &q, frame.camera, frame.pyramid, &cfg.template, &w.gce)?;
    if !q.is_finite() {
        return Err(Error::Numerical(format!("queries became non-finite in round {round}")));
    }
    let raws = refine_anchors(&q, &state.raws, &w.head)?;
    Ok(EncoderState { raws, queries: q })
}

/// Runs every round in `weights` in order.
pub fn run_encoder(
    init: EncoderState,
    weights: &EncoderWeights,
    frame: &FrameInputs<'_>,
    cfg: &EncoderConfig,
) -> Result<EncoderState> {
    let mut state = init;
    for r in 0..weights.rounds.len() {
        state = encode_round(&state, weights, r, frame, cfg)?;
    }
    Ok(state)
}
