//! Semantic occupancy from 3D Gaussians.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod error;
pub mod exec;
pub mod fusion;
pub mod gaussian;
pub mod gce;
pub mod grid;
pub mod nn;
pub mod objectives;
pub mod ose;
pub mod pipeline;
pub mod refine;
pub mod splat;
pub mod worldgen;

pub use error::{Error, Result};
pub use gaussian::{
    activate, covariance, quaternion_to_matrix, GaussianAnchor, GaussianSet, Quat, SceneBox,
    UnconstrainedAnchor, NUM_CLASSES,
};
pub use grid::{OccupancyGrid, SemanticField};
pub use splat::{field_to_grid, splat_backward, splat_forward, AnchorGradient};
pub use camera::{project, CameraModel, RigidTransform};
pub use fusion::{evaluate_global, update_global, FusionStrategy, GlobalState};
pub use objectives::{fit_gaussians, iou_miou, FitConfig, Metrics};
