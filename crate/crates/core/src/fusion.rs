//! Folding per-frame local predictions into a global occupancy grid.
//!
//! A local prediction lives in a gravity-aligned box in front of the camera.
//! Each update copies the local labels onto the global voxels that are both
//! inside the camera frustum and covered by the local box, then marks those
//! voxels explored.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, RigidTransform};
use crate::error::{validation, Error, Result};
use crate::exec;
use crate::gaussian::SceneBox;
use crate::grid::{OccupancyGrid, SemanticField};
use crate::objectives::fit::predict_grid;
use crate::objectives::metrics::{iou_miou, Metrics};
use crate::worldgen::frustum_mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    /// The latest frame overwrites.
    Splice,
    /// The larger accumulated mass wins.
    Confidence,
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "splice" => Ok(FusionStrategy::Splice),
            "confidence" => Ok(FusionStrategy::Confidence),
            other => Err(validation(format!("unknown fusion strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionStrategy::Splice => "splice",
            FusionStrategy::Confidence => "confidence",
        })
    }
}

/// A local box together with its pose in the world.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFrame {
    pub scene_box: SceneBox,
    pub pose: RigidTransform,
}

/// Gravity-aligned box of `dims` voxels in front of `cam`: local x points
/// along the horizontal viewing direction, local z up from the scene floor,
/// and the box is centered on the camera laterally.
pub fn local_frame_for_camera(cam: &CameraModel, scene: &SceneBox, dims: [usize; 3]) -> Result<LocalFrame> {
    let fwd = cam.rotation().row(2).transpose();
    let yaw = if fwd[0].hypot(fwd[1]) < 1e-9 { 0.0 } else { fwd[1].atan2(fwd[0]) };
    let eye = cam.position();
    let vs = scene.voxel_size;
    let scene_box = SceneBox::from_dims([0.0, -0.5 * dims[1] as f64 * vs, 0.0], dims, vs)?;
    let pose = RigidTransform::from_yaw(yaw, Vector3::new(eye[0], eye[1], scene.origin[2]));
    Ok(LocalFrame { scene_box, pose })
}

/// For each global voxel, the local voxel whose cell contains its center.
pub fn local_index_map(frame: &LocalFrame, global_box: &SceneBox) -> Result<Vec<Option<usize>>> {
    let lb = &frame.scene_box;
    if (lb.voxel_size - global_box.voxel_size).abs() > 1e-9 * global_box.voxel_size {
        return Err(validation(format!(
            "local voxel size {} differs from global {}",
            lb.voxel_size, global_box.voxel_size
        )));
    }
    let [_, ny, nz] = global_box.dims();
    Ok(exec::map_indices(global_box.num_voxels(), |i| {
        let c = global_box.voxel_center(i / (ny * nz), (i / nz) % ny, i % nz);
        lb.voxel_of(&frame.pose.inverse_apply(&c)).map(|[x, y, z]| lb.flat_index(x, y, z))
    }))
}

/// Local semantic vectors carried to global voxels by nearest cell; `None`
/// where the local box does not reach.
pub fn resample_local_to_global(field: &SemanticField, frame: &LocalFrame, global_box: &SceneBox) -> Result<Vec<Option<Vec<f64>>>> {
    if field.scene_box.dims() != frame.scene_box.dims() {
        return Err(Error::DimMismatch("field does not match its local box".into()));
    }
    Ok(local_index_map(frame, global_box)?
        .into_iter()
        .map(|m| m.map(|l| field.voxel(l).to_vec()))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    /// Labels with per-voxel confidence (accumulated mass).
    pub grid: OccupancyGrid,
    pub explored: Vec<bool>,
    pub frame_index: usize,
    pub strategy: FusionStrategy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Voxels written by this update.
    pub region: usize,
    /// Explored voxels after this update.
    pub explored: usize,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    frame_index: usize,
    strategy: FusionStrategy,
    explored_voxels: usize,
}

impl GlobalState {
    pub fn new(scene_box: SceneBox, strategy: FusionStrategy) -> Self {
        let n = scene_box.num_voxels();
        let mut grid = OccupancyGrid::empty(scene_box);
        grid.confidence = Some(vec![0.0; n]);
        GlobalState {
            grid,
            explored: vec![false; n],
            frame_index: 0,
            strategy,
        }
    }

    pub fn explored_count(&self) -> usize {
        self.explored.iter().filter(|e| **e).count()
    }

    /// Writes `global.occg`, `explored.occg` and `global.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.grid.save(dir.join("global.occg"))?;
        OccupancyGrid::from_mask(self.grid.scene_box, &self.explored).save(dir.join("explored.occg"))?;
        let side = Sidecar {
            frame_index: self.frame_index,
            strategy: self.strategy,
            explored_voxels: self.explored_count(),
        };
        fs::write(dir.join("global.json"), serde_json::to_vec_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut grid = OccupancyGrid::load(dir.join("global.occg"))?;
        let explored = OccupancyGrid::load(dir.join("explored.occg"))?.to_mask();
        let side: Sidecar = serde_json::from_slice(&fs::read(dir.join("global.json"))?)?;
        if explored.len() != grid.len() {
            return Err(Error::DimMismatch("explored mask differs from the global grid".into()));
        }
        if grid.confidence.is_none() {
            grid.confidence = Some(vec![0.0; grid.len()]);
        }
        Ok(GlobalState {
            grid,
            explored,
            frame_index: side.frame_index,
            strategy: side.strategy,
        })
    }
}

/// Merges one local prediction. Labels come from the local field with the
/// background `free_mass` added to the free channel; confidence is the
/// voxel's total mass. Voxels outside the frustum or the local box are left
/// untouched.
pub fn update_global(
    state: &mut GlobalState,
    local_field: &SemanticField,
    frame: &LocalFrame,
    cam: &CameraModel,
    free_mass: f64,
) -> Result<UpdateStats> {
    if local_field.scene_box.dims() != frame.scene_box.dims() {
        return Err(Error::DimMismatch("field does not match its local box".into()));
    }
    let gbox = state.grid.scene_box;
    let map = local_index_map(frame, &gbox)?;
    let frustum = frustum_mask(cam, &gbox);
    let local = predict_grid(local_field, free_mass);
    let local_conf = local.confidence.as_ref().expect("prediction carries confidence");
    let n = state.grid.len();
    let conf = state.grid.confidence.get_or_insert_with(|| vec![0.0; n]);
    let mut region = 0;
    for g in 0..n {
        let Some(l) = map[g] else { continue };
        if !frustum[g] {
            continue;
        }
        region += 1;
        let take = match state.strategy {
            FusionStrategy::Splice => true,
            FusionStrategy::Confidence => !state.explored[g] || local_conf[l] > conf[g],
        };
        if take {
            state.grid.labels[g] = local.labels[l];
            conf[g] = local_conf[l];
        }
        state.explored[g] = true;
    }
    state.frame_index += 1;
    Ok(UpdateStats {
        region,
        explored: state.explored_count(),
    })
}

/// Metrics of the global grid against `gt`, restricted to explored voxels.
pub fn evaluate_global(state: &GlobalState, gt: &OccupancyGrid, nc: usize) -> Result<Metrics> {
    iou_miou(&state.grid, gt, Some(&state.explored), nc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::NUM_CLASSES;

    #[test]
    fn strategy_parses() {
        assert_eq!("splice".parse::<FusionStrategy>().unwrap(), FusionStrategy::Splice);
        assert!("merge".parse::<FusionStrategy>().is_err());
        assert_eq!(FusionStrategy::Confidence.to_string(), "confidence");
    }

    #[test]
    fn voxel_size_mismatch_is_rejected() {
        let g = SceneBox::from_dims([0.0; 3], [4, 4, 4], 0.1).unwrap();
        let frame = LocalFrame {
            scene_box: SceneBox::from_dims([0.0; 3], [4, 4, 4], 0.2).unwrap(),
            pose: RigidTransform::identity(),
        };
        assert!(local_index_map(&frame, &g).is_err());
    }

    #[test]
    fn integer_offset_copies_cells() {
        let g = SceneBox::from_dims([0.0; 3], [6, 6, 4], 0.1).unwrap();
        let frame = LocalFrame {
            scene_box: SceneBox::from_dims([0.0; 3], [3, 3, 4], 0.1).unwrap(),
            pose: RigidTransform::from_yaw(0.0, Vector3::new(0.2, 0.1, 0.0)),
        };
        let map = local_index_map(&frame, &g).unwrap();
        assert_eq!(map[g.flat_index(2, 1, 0)], Some(0));
        assert_eq!(map[g.flat_index(4, 3, 3)], Some(frame.scene_box.flat_index(2, 2, 3)));
        assert_eq!(map[g.flat_index(0, 0, 0)], None);
        assert_eq!(map[g.flat_index(5, 1, 0)], None);
    }

    #[test]
    fn empty_exploration_is_undefined() {
        let g = SceneBox::from_dims([0.0; 3], [4, 4, 4], 0.1).unwrap();
        let state = GlobalState::new(g, FusionStrategy::Splice);
        let gt = OccupancyGrid::empty(g);
        let m = evaluate_global(&state, &gt, NUM_CLASSES).unwrap();
        assert!(!m.defined && m.iou.is_nan());
    }

    #[test]
    fn checkpoint_round_trip() {
        let g = SceneBox::from_dims([0.0; 3], [4, 4, 4], 0.1).unwrap();
        let mut state = GlobalState::new(g, FusionStrategy::Confidence);
        state.grid.labels[5] = 3;
        state.grid.confidence.as_mut().unwrap()[5] = 0.75;
        state.explored[5] = true;
        state.frame_index = 2;
        let dir = tempfile::tempdir().unwrap();
        state.save(dir.path()).unwrap();
        let back = GlobalState::load(dir.path()).unwrap();
        // box geometry is stored as f32
        assert!((back.grid.scene_box.voxel_size - 0.1).abs() < 1e-7);
        assert_eq!(back.grid.labels, state.grid.labels);
        assert_eq!(back.grid.confidence, state.grid.confidence);
        assert_eq!((back.explored, back.frame_index, back.strategy), (state.explored, 2, state.strategy));
        let side = fs::read_to_string(dir.path().join("global.json")).unwrap();
        assert!(side.contains("\"explored_voxels\": 1") && side.contains("confidence"));
    }
}
