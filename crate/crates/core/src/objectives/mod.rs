//! Training losses, evaluation metrics and the Gaussian fitting loop.

pub mod fit;
pub mod loss;
pub mod metrics;

pub use fit::{fit_gaussians, FitConfig, FitInit, FitResult, LossRecord};
pub use loss::{focal_loss, lovasz_softmax, scene_class_affinity, AffinityMode, LossValue};
pub use metrics::{iou_miou, Metrics, CLASS_NAMES};
