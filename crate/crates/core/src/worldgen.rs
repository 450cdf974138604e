//! Procedural indoor rooms, orbit trajectories, frustum masks, and rendered
//! stand-in image features.
//!
//! Layout decisions use integer voxel arithmetic driven by a seeded ChaCha
//! stream, so a seed yields the same room on every platform.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, Z_FAR, Z_NEAR};
use crate::error::{validation, Error, Result};
use crate::exec;
use crate::gaussian::{SceneBox, NUM_CLASSES};
use crate::gce::{FeatureMap, FeaturePyramid};
use crate::grid::OccupancyGrid;

pub const CEILING: u8 = 1;
pub const FLOOR: u8 = 2;
pub const WALL: u8 = 3;
pub const WINDOW: u8 = 4;
pub const CHAIR: u8 = 5;
pub const BED: u8 = 6;
pub const SOFA: u8 = 7;
pub const TABLE: u8 = 8;
pub const TVS: u8 = 9;
pub const FURNITURE: u8 = 10;
pub const OBJECTS: u8 = 11;

pub const DEFAULT_DIMS: [usize; 3] = [60, 60, 36];
pub const DEFAULT_VOXEL_SIZE: f64 = 0.08;
pub const DEFAULT_FRAMES: usize = 30;
/// Camera spacing along the trajectory for a 4.8 m room.
pub const FRAME_SPACING: f64 = 0.16;
pub const DEFAULT_IMAGE: (usize, usize) = (60, 80);
pub const DEFAULT_HFOV_DEG: f64 = 70.0;

const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectCounts {
    pub windows: usize,
    pub chairs: usize,
    pub beds: usize,
    pub sofas: usize,
    pub tables: usize,
    pub tvs: usize,
    pub furniture: usize,
    pub objects: usize,
}

impl ObjectCounts {
    pub fn none() -> Self {
        ObjectCounts {
            windows: 0,
            chairs: 0,
            beds: 0,
            sofas: 0,
            tables: 0,
            tvs: 0,
            furniture: 0,
            objects: 0,
        }
    }
}

impl Default for ObjectCounts {
    fn default() -> Self {
        ObjectCounts {
            windows: 2,
            chairs: 3,
            beds: 1,
            sofas: 1,
            tables: 1,
            tvs: 1,
            furniture: 2,
            objects: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    #[serde(rename = "box")]
    pub scene_box: SceneBox,
    /// Thicknesses in voxels.
    pub wall_thickness: usize,
    pub floor_thickness: usize,
    pub ceiling_thickness: usize,
    pub counts: ObjectCounts,
}

impl SceneSpec {
    pub fn new(seed: u64, dims: [usize; 3], voxel_size: f64) -> Result<Self> {
        Ok(SceneSpec {
            seed,
            scene_box: SceneBox::from_dims([0.0; 3], dims, voxel_size)?,
            wall_thickness: 1,
            floor_thickness: 1,
            ceiling_thickness: 1,
            counts: ObjectCounts::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.scene_box.validate()?;
        let [x, y, z] = self.scene_box.dims();
        if 2 * self.wall_thickness + 4 > x.min(y) || self.floor_thickness + self.ceiling_thickness + 4 > z {
            return Err(validation("room is too small for its walls, floor and ceiling"));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s: SceneSpec = serde_json::from_slice(&fs::read(path)?)?;
        s.validate()?;
        Ok(s)
    }
}

/// Half-open integer voxel box.
#[derive(Debug, Clone, Copy)]
struct VBox {
    lo: [usize; 3],
    hi: [usize; 3],
}

impl VBox {
    fn overlaps_footprint(&self, other: &VBox, gap: usize) -> bool {
        (0..2).all(|k| self.lo[k] < other.hi[k] + gap && other.lo[k] < self.hi[k] + gap)
    }
}

struct Room<'a> {
    grid: &'a mut OccupancyGrid,
    rng: ChaCha8Rng,
    // interior bounds
    lo: [usize; 3],
    hi: [usize; 3],
    footprints: Vec<VBox>,
    surfaces: Vec<VBox>,
}

impl Room<'_> {
    fn extent(&self, k: usize) -> usize {
        self.hi[k] - self.lo[k]
    }

    /// Integer size in `[lo_pct, hi_pct]` percent of the interior along `k`,
    /// at least `min`.
    fn size(&mut self, k: usize, lo_pct: usize, hi_pct: usize, min: usize) -> usize {
        let pct = self.rng.random_range(lo_pct..=hi_pct);
        ((self.extent(k) * pct) / 100).max(min).min(self.extent(k))
    }

    fn fill(&mut self, b: &VBox, label: u8, overwrite: bool) {
        for x in b.lo[0]..b.hi[0] {
            for y in b.lo[1]..b.hi[1] {
                for z in b.lo[2]..b.hi[2] {
                    if overwrite || self.grid.label_at(x, y, z) == 0 {
                        self.grid.set(x, y, z, label);
                    }
                }
            }
        }
    }

    /// Finds a free floor footprint `sx × sy`; `against_wall` pins one side
    /// to a wall.
    fn place_on_floor(&mut self, sx: usize, sy: usize, sz: usize, against_wall: bool) -> Result<VBox> {
        for _ in 0..MAX_ATTEMPTS {
            let (sx, sy) = if self.rng.random_bool(0.5) { (sx, sy) } else { (sy, sx) };
            if sx > self.extent(0) || sy > self.extent(1) {
                continue;
            }
            let mut x = self.rng.random_range(self.lo[0]..=self.hi[0] - sx);
            let mut y = self.rng.random_range(self.lo[1]..=self.hi[1] - sy);
            if against_wall {
                match self.rng.random_range(0..4u8) {
                    0 => x = self.lo[0],
                    1 => x = self.hi[0] - sx,
                    2 => y = self.lo[1],
                    _ => y = self.hi[1] - sy,
                }
            }
            let b = VBox {
                lo: [x, y, self.lo[2]],
                hi: [x + sx, y + sy, (self.lo[2] + sz).min(self.hi[2])],
            };
            if self.footprints.iter().all(|f| !f.overlaps_footprint(&b, 1)) {
                self.footprints.push(b);
                return Ok(b);
            }
        }
        Err(Error::Overconstrained(format!(
            "no free {sx}×{sy} floor spot after {MAX_ATTEMPTS} attempts"
        )))
    }

    fn ellipsoid(&mut self, center: [usize; 3], radii: [usize; 3], label: u8) {
        let r2 = radii.map(|r| (r * r).max(1) as i64);
        for x in center[0].saturating_sub(radii[0])..=(center[0] + radii[0]).min(self.hi[0] - 1) {
            for y in center[1].saturating_sub(radii[1])..=(center[1] + radii[1]).min(self.hi[1] - 1) {
                for z in center[2].saturating_sub(radii[2])..=(center[2] + radii[2]).min(self.hi[2] - 1) {
                    let d = [x as i64 - center[0] as i64, y as i64 - center[1] as i64, z as i64 - center[2] as i64];
                    // Σ d²/r² ≤ 1 scaled by the product of squared radii
                    let lhs = d[0] * d[0] * r2[1] * r2[2] + d[1] * d[1] * r2[0] * r2[2] + d[2] * d[2] * r2[0] * r2[1];
                    if lhs <= r2[0] * r2[1] * r2[2] && self.grid.label_at(x, y, z) == 0 {
                        self.grid.set(x, y, z, label);
                    }
                }
            }
        }
    }
}

/// Rasterizes the room described by `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<OccupancyGrid> {
    spec.validate()?;
    let bx = spec.scene_box;
    let [nx, ny, nz] = bx.dims();
    let mut grid = OccupancyGrid::empty(bx);
    let (wt, ft, ct) = (spec.wall_thickness, spec.floor_thickness, spec.ceiling_thickness);

    let mut room = Room {
        grid: &mut grid,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        lo: [wt, wt, ft],
        hi: [nx - wt, ny - wt, nz - ct],
        footprints: Vec::new(),
        surfaces: Vec::new(),
    };
    room.fill(&VBox { lo: [0, 0, 0], hi: [nx, ny, ft] }, FLOOR, true);
    room.fill(&VBox { lo: [0, 0, nz - ct], hi: [nx, ny, nz] }, CEILING, true);
    for b in [
        VBox { lo: [0, 0, ft], hi: [wt, ny, nz - ct] },
        VBox { lo: [nx - wt, 0, ft], hi: [nx, ny, nz - ct] },
        VBox { lo: [0, 0, ft], hi: [nx, wt, nz - ct] },
        VBox { lo: [0, ny - wt, ft], hi: [nx, ny, nz - ct] },
    ] {
        room.fill(&b, WALL, true);
    }

    let c = &spec.counts;
    let h = room.extent(2);
    // windows: rectangles cut into the wall slabs, above a third of the height
    for _ in 0..c.windows {
        let side = room.rng.random_range(0..4u8);
        let along = if side < 2 { 1 } else { 0 };
        let w = room.size(along, 15, 25, 2);
        let wh = room.size(2, 25, 35, 2);
        let start = room.rng.random_range(room.lo[along]..=room.hi[along] - w);
        let z0 = room.lo[2] + h / 3;
        let z1 = (z0 + wh).min(room.hi[2]);
        let (lo, hi) = match side {
            0 => ([0, start, z0], [wt, start + w, z1]),
            1 => ([nx - wt, start, z0], [nx, start + w, z1]),
            2 => ([start, 0, z0], [start + w, wt, z1]),
            _ => ([start, ny - wt, z0], [start + w, ny, z1]),
        };
        room.fill(&VBox { lo, hi }, WINDOW, true);
    }
    for _ in 0..c.beds {
        let (sx, sy, sz) = (room.size(0, 30, 40, 3), room.size(1, 20, 28, 3), room.size(2, 12, 16, 2));
        let b = room.place_on_floor(sx, sy, sz, true)?;
        room.fill(&b, BED, false);
    }
    for _ in 0..c.sofas {
        let (sx, sy, sz) = (room.size(0, 25, 35, 3), room.size(1, 10, 14, 2), room.size(2, 12, 18, 2));
        let b = room.place_on_floor(sx, sy, sz, false)?;
        room.fill(&b, SOFA, false);
    }
    for _ in 0..c.tables {
        let (sx, sy, sz) = (room.size(0, 15, 22, 2), room.size(1, 12, 18, 2), room.size(2, 20, 25, 2));
        let b = room.place_on_floor(sx, sy, sz, false)?;
        room.fill(&b, TABLE, false);
        room.surfaces.push(b);
    }
    for _ in 0..c.furniture {
        let (sx, sy, sz) = (room.size(0, 10, 20, 2), room.size(1, 6, 10, 2), room.size(2, 40, 60, 3));
        let b = room.place_on_floor(sx, sy, sz, true)?;
        room.fill(&b, FURNITURE, false);
        room.surfaces.push(b);
    }
    for _ in 0..c.chairs {
        let (sx, sy, sz) = (room.size(0, 6, 10, 2), room.size(1, 6, 10, 2), room.size(2, 20, 30, 2));
        let b = room.place_on_floor(sx, sy, sz, false)?;
        room.fill(&b, CHAIR, false);
    }
    // screens: one voxel thick, hung on a wall at mid height
    for _ in 0..c.tvs {
        let side = room.rng.random_range(0..4u8);
        let along = if side < 2 { 1 } else { 0 };
        let w = room.size(along, 12, 20, 3);
        let th = room.size(2, 12, 18, 2);
        let start = room.rng.random_range(room.lo[along]..=room.hi[along] - w);
        let z0 = room.lo[2] + h / 2;
        let z1 = (z0 + th).min(room.hi[2]);
        let (lo, hi) = match side {
            0 => ([room.lo[0], start, z0], [room.lo[0] + 1, start + w, z1]),
            1 => ([room.hi[0] - 1, start, z0], [room.hi[0], start + w, z1]),
            2 => ([start, room.lo[1], z0], [start + w, room.lo[1] + 1, z1]),
            _ => ([start, room.hi[1] - 1, z0], [start + w, room.hi[1], z1]),
        };
        room.fill(&VBox { lo, hi }, TVS, false);
    }
    // small ellipsoids resting on tables and cabinets, else on the floor
    for i in 0..c.objects {
        let r = [room.size(0, 3, 5, 1), room.size(1, 3, 5, 1), room.size(2, 3, 5, 1)];
        let center = if !room.surfaces.is_empty() {
            let s = room.surfaces[i % room.surfaces.len()];
            let cx = room.rng.random_range(s.lo[0]..s.hi[0]);
            let cy = room.rng.random_range(s.lo[1]..s.hi[1]);
            [cx, cy, (s.hi[2] + r[2]).min(room.hi[2] - 1)]
        } else {
            let b = room.place_on_floor(2 * r[0] + 1, 2 * r[1] + 1, 2 * r[2] + 1, false)?;
            [b.lo[0] + r[0], b.lo[1] + r[1], room.lo[2] + r[2]]
        };
        room.ellipsoid(center, r, OBJECTS);
    }
    Ok(grid)
}

/// Orbit around the room center at half height, each camera looking inward
/// past the center with seeded jitter. Consecutive cameras are
/// `FRAME_SPACING` apart for a 4.8 m room, scaled with the room size.
pub fn generate_trajectory(bx: &SceneBox, frames: usize, seed: u64, image: (usize, usize)) -> Result<Vec<CameraModel>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_616a);
    let c = bx.center();
    let horiz = bx.extent[0].min(bx.extent[1]);
    let radius = 0.3 * horiz;
    let spacing = FRAME_SPACING * horiz / 4.8;
    let step = spacing / radius;
    let start: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    (0..frames)
        .map(|f| {
            let a = start + step * f as f64;
            let jitter = |rng: &mut ChaCha8Rng, s: f64| rng.random_range(-s..s);
            let eye = Vector3::new(
                c[0] + radius * a.cos() + jitter(&mut rng, 0.005 * horiz),
                c[1] + radius * a.sin() + jitter(&mut rng, 0.005 * horiz),
                bx.origin[2] + 0.5 * bx.extent[2] + jitter(&mut rng, 0.01 * bx.extent[2]),
            );
            let target = Vector3::new(
                c[0] - 0.3 * radius * a.cos() + jitter(&mut rng, 0.05 * horiz),
                c[1] - 0.3 * radius * a.sin() + jitter(&mut rng, 0.05 * horiz),
                bx.origin[2] + 0.4 * bx.extent[2],
            );
            CameraModel::look_at(eye, target, DEFAULT_HFOV_DEG, image.0, image.1)
        })
        .collect()
}

/// Voxels whose centers project into the image at depth in `(Z_NEAR, Z_FAR)`.
pub fn frustum_mask(cam: &CameraModel, bx: &SceneBox) -> Vec<bool> {
    let [_, ny, nz] = bx.dims();
    exec::map_indices(bx.num_voxels(), |i| {
        let (ix, iy, iz) = (i / (ny * nz), (i / nz) % ny, i % nz);
        let c = cam.to_camera(&bx.voxel_center(ix, iy, iz));
        c[2] > Z_NEAR && c[2] < Z_FAR && cam.in_image(cam.camera_to_pixel(&c))
    })
}

/// Rendered stand-in for image features: per-pixel first-hit class one-hot,
/// depth over `Z_FAR`, and zero padding to `channels`.
pub struct RenderedFrame {
    pub pyramid: FeaturePyramid,
    /// Camera-z depth of the first hit, `Z_FAR` on misses; row-major.
    pub depth: Vec<f64>,
    /// First-hit class per pixel, 0 on misses.
    pub labels: Vec<u8>,
}

/// Marches each pixel ray in half-voxel steps to the first occupied voxel.
pub fn render_feature_pyramid(grid: &OccupancyGrid, cam: &CameraModel, levels: usize, channels: usize) -> Result<RenderedFrame> {
    let nc = NUM_CLASSES;
    if channels < nc + 1 {
        return Err(validation(format!("need at least {} feature channels", nc + 1)));
    }
    if levels == 0 {
        return Err(validation("need at least one pyramid level"));
    }
    let (h, w) = (cam.height, cam.width);
    let bx = &grid.scene_box;
    let step = 0.5 * bx.voxel_size;
    let eye = cam.position();
    let rt = cam.rotation().transpose();
    let (fx, fy) = cam.focal();
    let (cx, cy) = (cam.k[(0, 2)], cam.k[(1, 2)]);
    let skew = cam.k[(0, 1)];
    let hits = exec::map_indices(h * w, |p| {
        let (i, j) = (p / w, p % w);
        let v = (i as f64 + 0.5 - cy) / fy;
        let u = (j as f64 + 0.5 - cx - skew * v) / fx;
        let dir_cam = Vector3::new(u, v, 1.0);
        let len = dir_cam.norm();
        let dir = rt * (dir_cam / len);
        let dz = 1.0 / len; // camera z gained per unit of ray length
        let mut t = 0.0;
        while t * dz < Z_FAR {
            let q = eye + dir * t;
            if let Some([x, y, z]) = bx.voxel_of(&q) {
                let l = grid.label_at(x, y, z);
                if l != 0 {
                    return (l, t * dz);
                }
            }
            t += step;
        }
        (0u8, Z_FAR)
    });
    let mut base = FeatureMap::zeros(h, w, channels);
    for (p, &(l, d)) in hits.iter().enumerate() {
        let px = base.pixel_mut(p / w, p % w);
        px[l as usize] = 1.0;
        px[nc] = d / Z_FAR;
    }
    Ok(RenderedFrame {
        pyramid: FeaturePyramid::from_base(base, levels)?,
        depth: hits.iter().map(|h| h.1).collect(),
        labels: hits.iter().map(|h| h.0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slab_only_room_counts_floor() {
        let mut spec = SceneSpec::new(1, [20, 16, 12], 0.1).unwrap();
        spec.counts = ObjectCounts::none();
        let g = generate_scene(&spec).unwrap();
        let hist = g.class_histogram(NUM_CLASSES);
        assert_eq!(hist[FLOOR as usize], 20 * 16);
        assert_eq!(hist[CEILING as usize], 20 * 16);
        assert!(hist[4..].iter().all(|&n| n == 0));
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SceneSpec::new(11, [40, 40, 24], 0.08).unwrap();
        assert_eq!(generate_scene(&spec).unwrap().to_bytes(), generate_scene(&spec).unwrap().to_bytes());
        let other = SceneSpec { seed: 12, ..spec.clone() };
        assert_ne!(generate_scene(&spec).unwrap().labels, generate_scene(&other).unwrap().labels);
    }

    #[test]
    fn default_room_has_every_class() {
        for seed in 0..5 {
            let spec = SceneSpec::new(seed, DEFAULT_DIMS, DEFAULT_VOXEL_SIZE).unwrap();
            let hist = generate_scene(&spec).unwrap().class_histogram(NUM_CLASSES);
            for (c, &n) in hist.iter().enumerate().skip(1) {
                assert!(n >= 20, "seed {seed}: class {c} has {n} voxels");
            }
        }
    }

    #[test]
    fn crowded_room_fails_cleanly() {
        let mut spec = SceneSpec::new(3, [12, 12, 10], 0.1).unwrap();
        spec.counts.beds = 40;
        assert!(matches!(generate_scene(&spec), Err(Error::Overconstrained(_))));
    }

    #[test]
    fn camera_facing_away_sees_nothing() {
        let bx = SceneBox::from_dims([0.0; 3], [10, 10, 10], 0.1).unwrap();
        let cam = CameraModel::look_at(Vector3::new(-0.5, 0.5, 0.5), Vector3::new(-2.0, 0.5, 0.5), 60.0, 30, 40).unwrap();
        assert!(frustum_mask(&cam, &bx).iter().all(|m| !m));
        let inside = CameraModel::look_at(Vector3::new(0.5, 0.5, 0.5), Vector3::new(1.0, 0.5, 0.5), 60.0, 30, 40).unwrap();
        let m = frustum_mask(&inside, &bx);
        let n = m.iter().filter(|v| **v).count();
        assert!(n > 0 && n < m.len());
    }

    #[test]
    fn empty_grid_renders_far_free() {
        let bx = SceneBox::from_dims([0.0; 3], [10, 10, 10], 0.1).unwrap();
        let g = OccupancyGrid::empty(bx);
        let cam = CameraModel::look_at(Vector3::new(0.5, 0.5, 0.5), Vector3::new(1.0, 0.6, 0.5), 60.0, 12, 16).unwrap();
        let r = render_feature_pyramid(&g, &cam, 2, 16).unwrap();
        assert!(r.depth.iter().all(|d| *d == Z_FAR));
        let base = &r.pyramid.levels[0];
        for i in 0..12 {
            for j in 0..16 {
                assert_eq!(base.pixel(i, j)[0], 1.0);
                assert_eq!(base.pixel(i, j)[NUM_CLASSES], 1.0);
            }
        }
    }

    #[test]
    fn trajectory_spacing_and_validity() {
        let bx = SceneBox::from_dims([0.0; 3], DEFAULT_DIMS, DEFAULT_VOXEL_SIZE).unwrap();
        let cams = generate_trajectory(&bx, DEFAULT_FRAMES, 4, DEFAULT_IMAGE).unwrap();
        assert_eq!(cams.len(), DEFAULT_FRAMES);
        for w in cams.windows(2) {
            let d = (w[1].position() - w[0].position()).norm();
            assert!((d - FRAME_SPACING).abs() < 0.12, "spacing {d}");
        }
        for c in &cams {
            assert!(bx.contains(&c.position()));
        }
    }
}
