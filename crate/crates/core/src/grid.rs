//! Dense voxel volumes: labeled occupancy grids, per-class semantic fields,
//! and the `OCCG` binary grid format.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gaussian::SceneBox;

pub const OCCG_MAGIC: &[u8; 4] = b"OCCG";
pub const OCCG_VERSION: u32 = 1;
/// Header flag (upper half of the version word) marking a confidence block.
pub const OCCG_FLAG_CONFIDENCE: u32 = 1 << 16;
const OCCG_HEADER_LEN: usize = 4 + 4 + 12 + 4 + 12;

/// Default total-mass threshold below which a voxel is labeled free.
pub const DEFAULT_MASS_FLOOR: f64 = 1e-6;

/// Labeled voxel volume.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub scene_box: SceneBox,
    pub labels: Vec<u8>,
    pub confidence: Option<Vec<f32>>,
}

impl OccupancyGrid {
    pub fn empty(scene_box: SceneBox) -> Self {
        OccupancyGrid {
            labels: vec![0; scene_box.num_voxels()],
            scene_box,
            confidence: None,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.scene_box.dims()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_at(&self, ix: usize, iy: usize, iz: usize) -> u8 {
        self.labels[self.scene_box.flat_index(ix, iy, iz)]
    }

    pub fn set(&mut self, ix: usize, iy: usize, iz: usize, label: u8) {
        let i = self.scene_box.flat_index(ix, iy, iz);
        self.labels[i] = label;
    }

    pub fn occupied_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn class_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0usize; num_classes];
        for &l in &self.labels {
            if (l as usize) < num_classes {
                h[l as usize] += 1;
            }
        }
        h
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.labels.len() != self.scene_box.num_voxels() {
            return Err(Error::DimMismatch(format!(
                "{} labels for a {:?} grid",
                self.labels.len(),
                self.dims()
            )));
        }
        if let Some(c) = &self.confidence {
            if c.len() != self.labels.len() {
                return Err(Error::DimMismatch("confidence length differs from labels".into()));
            }
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Validation(format!("label {bad} out of range")));
        }
        Ok(())
    }

    /// Boolean view: nonzero labels are `true`.
    pub fn to_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }

    /// Mask stored as a 0/1 label grid.
    pub fn from_mask(scene_box: SceneBox, mask: &[bool]) -> Self {
        OccupancyGrid {
            scene_box,
            labels: mask.iter().map(|&m| m as u8).collect(),
            confidence: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let [x, y, z] = self.dims();
        let mut out = Vec::with_capacity(OCCG_HEADER_LEN + self.labels.len() * 5);
        out.extend_from_slice(OCCG_MAGIC);
        let word = OCCG_VERSION
            | if self.confidence.is_some() {
                OCCG_FLAG_CONFIDENCE
            } else {
                0
            };
        out.extend_from_slice(&word.to_le_bytes());
        for d in [x, y, z] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.scene_box.voxel_size as f32).to_le_bytes());
        for o in self.scene_box.origin {
            out.extend_from_slice(&(o as f32).to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        if let Some(c) = &self.confidence {
            for v in c {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses an `OCCG` buffer. The box is rebuilt from the f32 header
    /// values, so its geometry carries f32 precision.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < OCCG_HEADER_LEN || &bytes[..4] != OCCG_MAGIC {
            return Err(Error::Format("missing OCCG header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let word = u32_at(4);
        if word & 0xffff != OCCG_VERSION {
            return Err(Error::Format(format!("unsupported OCCG version {}", word & 0xffff)));
        }
        let has_conf = word & OCCG_FLAG_CONFIDENCE != 0;
        let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
        let voxel_size = f32_at(20) as f64;
        let origin = [f32_at(24) as f64, f32_at(28) as f64, f32_at(32) as f64];
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| Error::Format("grid dimensions overflow".into()))?;
        let expected = OCCG_HEADER_LEN + n + if has_conf { 4 * n } else { 0 };
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "OCCG payload is {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let scene_box = SceneBox::from_dims(origin, dims, voxel_size)?;
        let labels = bytes[OCCG_HEADER_LEN..OCCG_HEADER_LEN + n].to_vec();
        let confidence = has_conf.then(|| {
            bytes[OCCG_HEADER_LEN + n..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        });
        Ok(OccupancyGrid {
            scene_box,
            labels,
            confidence,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Writes `x,y,z,label` rows for occupied voxels.
    pub fn export_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(f, "x,y,z,label")?;
        let [dx, dy, dz] = self.dims();
        for x in 0..dx {
            for y in 0..dy {
                for z in 0..dz {
                    let l = self.label_at(x, y, z);
                    if l != 0 {
                        writeln!(f, "{x},{y},{z},{l}")?;
                    }
                }
            }
        }
        f.flush()?;
        Ok(())
    }

    /// Same lattice (dims, and geometry to f32 precision).
    pub fn same_lattice(&self, other: &OccupancyGrid) -> bool {
        let a = &self.scene_box;
        let b = &other.scene_box;
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-6 * (1.0 + x.abs().max(y.abs()));
        self.dims() == other.dims()
            && close(a.voxel_size, b.voxel_size)
            && (0..3).all(|k| close(a.origin[k], b.origin[k]))
    }
}

/// Per-voxel, per-class accumulated semantic mass. Values are stored
/// voxel-major: `values[voxel * num_classes + class]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticField {
    pub scene_box: SceneBox,
    pub num_classes: usize,
    pub values: Vec<f64>,
}

impl SemanticField {
    pub fn zeros(scene_box: SceneBox, num_classes: usize) -> Self {
        SemanticField {
            values: vec![0.0; scene_box.num_voxels() * num_classes],
            scene_box,
            num_classes,
        }
    }

    pub fn num_voxels(&self) -> usize {
        self.values.len() / self.num_classes
    }

    pub fn voxel(&self, idx: usize) -> &[f64] {
        &self.values[idx * self.num_classes..(idx + 1) * self.num_classes]
    }

    pub fn voxel_mut(&mut self, idx: usize) -> &mut [f64] {
        let c = self.num_classes;
        &mut self.values[idx * c..(idx + 1) * c]
    }

    pub fn total_mass(&self, idx: usize) -> f64 {
        self.voxel(idx).iter().sum()
    }

    pub fn max_abs_diff(&self, other: &SemanticField) -> f64 {
        assert_eq!(self.values.len(), other.values.len(), "field shapes differ");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_box() -> SceneBox {
        SceneBox::from_dims([0.5, -1.0, 0.0], [3, 4, 5], 0.08).unwrap()
    }

    #[test]
    fn flat_index_is_x_major() {
        let b = small_box();
        assert_eq!(b.flat_index(0, 0, 1), 1);
        assert_eq!(b.flat_index(0, 1, 0), 5);
        assert_eq!(b.flat_index(1, 0, 0), 20);
        assert_eq!(b.unflatten(b.flat_index(2, 3, 4)), [2, 3, 4]);
    }

    #[test]
    fn occg_header_layout() {
        let mut g = OccupancyGrid::empty(small_box());
        g.set(1, 2, 3, 7);
        let bytes = g.to_bytes();
        assert_eq!(&bytes[..4], b"OCCG");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 5);
        assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), 0.08f32);
        assert_eq!(f32::from_le_bytes(bytes[24..28].try_into().unwrap()), 0.5f32);
        assert_eq!(bytes.len(), 36 + 60);
        assert_eq!(bytes[36 + small_box().flat_index(1, 2, 3)], 7);
    }

    #[test]
    fn occg_round_trip_with_confidence() {
        let mut g = OccupancyGrid::empty(small_box());
        g.set(2, 0, 4, 11);
        g.confidence = Some((0..60).map(|i| i as f32 * 0.25).collect());
        let bytes = g.to_bytes();
        assert_eq!(
            u32::from_le_bytes(bytes[4..8].try_into().unwrap()),
            OCCG_VERSION | OCCG_FLAG_CONFIDENCE
        );
        let back = OccupancyGrid::from_bytes(&bytes).unwrap();
        assert_eq!(back.labels, g.labels);
        assert_eq!(back.confidence, g.confidence);
        assert!(back.same_lattice(&g));
        // a second trip is bit-exact
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn occg_rejects_garbage() {
        assert!(OccupancyGrid::from_bytes(b"NOPE").is_err());
        let mut bytes = OccupancyGrid::empty(small_box()).to_bytes();
        bytes.pop();
        assert!(matches!(OccupancyGrid::from_bytes(&bytes), Err(Error::Format(_))));
        let mut bytes = OccupancyGrid::empty(small_box()).to_bytes();
        bytes[4] = 2;
        assert!(OccupancyGrid::from_bytes(&bytes).is_err());
    }

    #[test]
    fn csv_export_lists_occupied() {
        let mut g = OccupancyGrid::empty(small_box());
        g.set(0, 1, 2, 3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        g.export_csv(&p).unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap(), "x,y,z,label\n0,1,2,3\n");
    }
}
