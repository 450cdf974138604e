//! Semantic 3D Gaussians: the scene box, anchors, their unconstrained
//! parameterization and ellipsoid math.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

/// Number of occupancy classes; index 0 is free space.
pub const NUM_CLASSES: usize = 12;
/// Default Gaussian query width.
pub const DEFAULT_FEAT_DIM: usize = 96;
/// Default upper bound on any Gaussian semi-axis, meters.
pub const DEFAULT_SCALE_CAP: f64 = 0.08;
/// Default number of Gaussians per local prediction.
pub const DEFAULT_NUM_GAUSSIANS: usize = 16_200;

/// Raw parameters per anchor: mean(3) + scale(3) + rotation(4) + opacity(1).
pub const GEOMETRY_PARAMS: usize = 11;

const PROB_EPS: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid clamped into the open interval, so saturated logits still give
/// a strictly positive scale and an opacity below one.
fn sigmoid_open(x: f64) -> f64 {
    sigmoid(x).clamp(PROB_EPS, 1.0 - PROB_EPS)
}

pub(crate) fn sigmoid_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Axis-aligned annotated volume with a voxel lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub origin: [f64; 3],
    pub extent: [f64; 3],
    pub voxel_size: f64,
}

impl SceneBox {
    pub fn new(origin: [f64; 3], extent: [f64; 3], voxel_size: f64) -> Result<Self> {
        let b = SceneBox {
            origin,
            extent,
            voxel_size,
        };
        b.validate()?;
        Ok(b)
    }

    /// Box spanning `dims` voxels of `voxel_size` from `origin`.
    pub fn from_dims(origin: [f64; 3], dims: [usize; 3], voxel_size: f64) -> Result<Self> {
        let extent = [
            dims[0] as f64 * voxel_size,
            dims[1] as f64 * voxel_size,
            dims[2] as f64 * voxel_size,
        ];
        Self::new(origin, extent, voxel_size)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(validation(format!(
                "voxel size must be positive, got {}",
                self.voxel_size
            )));
        }
        for k in 0..3 {
            let e = self.extent[k];
            if !(e > 0.0 && e.is_finite()) || !self.origin[k].is_finite() {
                return Err(validation(format!("box axis {k} has extent {e}")));
            }
            let cells = e / self.voxel_size;
            if (cells - cells.round()).abs() > 0.5 || cells.round() < 1.0 {
                return Err(validation(format!(
                    "box axis {k}: extent {e} is not a whole number of {} m voxels",
                    self.voxel_size
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        let d = |k: usize| (self.extent[k] / self.voxel_size).round() as usize;
        [d(0), d(1), d(2)]
    }

    pub fn num_voxels(&self) -> usize {
        let [x, y, z] = self.dims();
        x * y * z
    }

    /// Flat index with x-major, then y, then z ordering.
    #[inline]
    pub fn flat_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        let [_, y, z] = self.dims();
        (ix * y + iy) * z + iz
    }

    #[inline]
    pub fn unflatten(&self, idx: usize) -> [usize; 3] {
        let [_, y, z] = self.dims();
        [idx / (y * z), (idx / z) % y, idx % z]
    }

    #[inline]
    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        let v = self.voxel_size;
        Vector3::new(
            self.origin[0] + (ix as f64 + 0.5) * v,
            self.origin[1] + (iy as f64 + 0.5) * v,
            self.origin[2] + (iz as f64 + 0.5) * v,
        )
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + 0.5 * self.extent[0],
            self.origin[1] + 0.5 * self.extent[1],
            self.origin[2] + 0.5 * self.extent[2],
        )
    }

    /// Voxel containing `p`, if inside the box.
    pub fn voxel_of(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let dims = self.dims();
        let mut out = [0usize; 3];
        for k in 0..3 {
            let f = ((p[k] - self.origin[k]) / self.voxel_size).floor();
            if !(f >= 0.0 && f < dims[k] as f64) {
                return None;
            }
            out[k] = f as usize;
        }
        Some(out)
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.origin[k] && p[k] <= self.origin[k] + self.extent[k])
    }
}

/// Unit quaternion, scalar first `(w, x, y, z)`, Hamilton convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat(pub [f64; 4]);

impl Quat {
    pub const IDENTITY: Quat = Quat([1.0, 0.0, 0.0, 0.0]);

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn normalized(raw: [f64; 4]) -> Result<Quat> {
        let n = Quat(raw).norm();
        if !(n >= 1e-12) {
            return Err(Error::DegenerateRotation(n));
        }
        Ok(Quat([raw[0] / n, raw[1] / n, raw[2] / n, raw[3] / n]))
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Quat {
        let a = axis.normalize() * (0.5 * angle).sin();
        Quat([(0.5 * angle).cos(), a[0], a[1], a[2]])
    }

    /// Hamilton product `self ⊗ rhs`.
    pub fn mul(&self, rhs: &Quat) -> Quat {
        let [w1, x1, y1, z1] = self.0;
        let [w2, x2, y2, z2] = rhs.0;
        Quat([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ])
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        quaternion_to_matrix(self)
    }
}

/// Rotation matrix of a unit quaternion.
pub fn quaternion_to_matrix(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = q.0;
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, xz, yz) = (x * y, x * z, y * z);
    let (wx, wy, wz) = (w * x, w * y, w * z);
    Matrix3::new(
        1.0 - 2.0 * (yy + zz),
        2.0 * (xy - wz),
        2.0 * (xz + wy),
        2.0 * (xy + wz),
        1.0 - 2.0 * (xx + zz),
        2.0 * (yz - wx),
        2.0 * (xz - wy),
        2.0 * (yz + wx),
        1.0 - 2.0 * (xx + yy),
    )
}

/// Partial derivatives of `quaternion_to_matrix` with respect to w, x, y, z.
pub(crate) fn quaternion_matrix_partials(q: &Quat) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = q.0;
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    [dw, dx, dy, dz]
}

/// One ellipsoidal scene primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianAnchor {
    pub mean: Vector3<f64>,
    /// Per-axis semi-axis lengths, meters.
    pub scale: Vector3<f64>,
    pub rotation: Quat,
    pub opacity: f64,
    /// Unnormalized class logits; index 0 is free.
    pub semantics: Vec<f64>,
}

impl GaussianAnchor {
    /// Checks the anchor invariants against a scale cap.
    pub fn validate(&self, scale_cap: f64) -> Result<()> {
        let finite = self.mean.iter().all(|v| v.is_finite())
            && self.scale.iter().all(|v| v.is_finite())
            && self.rotation.0.iter().all(|v| v.is_finite())
            && self.opacity.is_finite()
            && self.semantics.iter().all(|v| v.is_finite());
        if !finite {
            return Err(validation("anchor has non-finite fields"));
        }
        if (self.rotation.norm() - 1.0).abs() > 1e-6 {
            return Err(validation(format!(
                "rotation norm {} is not unit",
                self.rotation.norm()
            )));
        }
        if self.scale.iter().any(|&s| !(s > 0.0 && s <= scale_cap)) {
            return Err(validation(format!(
                "scale {:?} outside (0, {scale_cap}]",
                self.scale.as_slice()
            )));
        }
        if !(self.opacity > 0.0 && self.opacity < 1.0) {
            return Err(validation(format!("opacity {} outside (0,1)", self.opacity)));
        }
        if self.semantics.is_empty() {
            return Err(validation("anchor has no semantic logits"));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quaternion_to_matrix(&self.rotation)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        covariance(self)
    }

    /// Inverse covariance `R diag(1/s²) Rᵀ`.
    pub fn precision(&self) -> Matrix3<f64> {
        let inv = self.scale.map(|s| 1.0 / (s * s));
        rotate_diagonal(&self.rotation_matrix(), &inv)
    }

    /// Flattened row `mean, scale, rotation, opacity, semantics`.
    pub fn to_row(&self) -> Vec<f64> {
        let mut row = Vec::with_capacity(GEOMETRY_PARAMS + self.semantics.len());
        row.extend(self.mean.iter());
        row.extend(self.scale.iter());
        row.extend(self.rotation.0.iter());
        row.push(self.opacity);
        row.extend(self.semantics.iter());
        row
    }

    pub fn from_row(row: &[f64], num_classes: usize) -> Result<Self> {
        if row.len() != GEOMETRY_PARAMS + num_classes {
            return Err(Error::Format(format!(
                "anchor row has {} entries, expected {}",
                row.len(),
                GEOMETRY_PARAMS + num_classes
            )));
        }
        Ok(GaussianAnchor {
            mean: Vector3::new(row[0], row[1], row[2]),
            scale: Vector3::new(row[3], row[4], row[5]),
            rotation: Quat([row[6], row[7], row[8], row[9]]),
            opacity: row[10],
            semantics: row[11..].to_vec(),
        })
    }
}

/// `Σ = R diag(s²) Rᵀ`.
pub fn covariance(anchor: &GaussianAnchor) -> Matrix3<f64> {
    let s2 = anchor.scale.component_mul(&anchor.scale);
    rotate_diagonal(&anchor.rotation_matrix(), &s2)
}

/// `R diag(d) Rᵀ`, summed so the result is exactly symmetric.
pub(crate) fn rotate_diagonal(r: &Matrix3<f64>, d: &Vector3<f64>) -> Matrix3<f64> {
    let mut out = Matrix3::zeros();
    for i in 0..3 {
        for j in i..3 {
            let v = (0..3).map(|k| r[(i, k)] * d[k] * r[(j, k)]).sum::<f64>();
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Pre-activation anchor parameters; any finite values activate into a
/// valid [`GaussianAnchor`].
#[derive(Debug, Clone, PartialEq)]
pub struct UnconstrainedAnchor {
    pub raw_mean: [f64; 3],
    pub raw_scale: [f64; 3],
    pub raw_rotation: [f64; 4],
    pub raw_opacity: f64,
    pub raw_semantics: Vec<f64>,
}

impl UnconstrainedAnchor {
    pub fn num_params(&self) -> usize {
        GEOMETRY_PARAMS + self.raw_semantics.len()
    }

    /// Packs the parameters as `mean, scale, rotation, opacity, semantics`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(&self.raw_mean);
        v.extend_from_slice(&self.raw_scale);
        v.extend_from_slice(&self.raw_rotation);
        v.push(self.raw_opacity);
        v.extend_from_slice(&self.raw_semantics);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert!(v.len() > GEOMETRY_PARAMS, "parameter slice too short");
        UnconstrainedAnchor {
            raw_mean: [v[0], v[1], v[2]],
            raw_scale: [v[3], v[4], v[5]],
            raw_rotation: [v[6], v[7], v[8], v[9]],
            raw_opacity: v[10],
            raw_semantics: v[11..].to_vec(),
        }
    }

    /// Inverse of [`activate`] for anchors strictly inside the box and
    /// below the scale cap.
    pub fn from_anchor(anchor: &GaussianAnchor, bx: &SceneBox, scale_cap: f64) -> Self {
        let logit = |p: f64| {
            let p = p.clamp(1e-9, 1.0 - 1e-9);
            (p / (1.0 - p)).ln()
        };
        let mut raw_mean = [0.0; 3];
        let mut raw_scale = [0.0; 3];
        for k in 0..3 {
            raw_mean[k] = logit((anchor.mean[k] - bx.origin[k]) / bx.extent[k]);
            raw_scale[k] = logit(anchor.scale[k] / scale_cap);
        }
        UnconstrainedAnchor {
            raw_mean,
            raw_scale,
            raw_rotation: anchor.rotation.0,
            raw_opacity: logit(anchor.opacity),
            raw_semantics: anchor.semantics.clone(),
        }
    }
}

/// Maps unconstrained parameters to a valid anchor inside `bx`.
pub fn activate(raw: &UnconstrainedAnchor, bx: &SceneBox, scale_cap: f64) -> Result<GaussianAnchor> {
    if !(scale_cap > 0.0) {
        return Err(validation(format!("scale cap must be positive, got {scale_cap}")));
    }
    let rotation = Quat::normalized(raw.raw_rotation)?;
    let mean = Vector3::from_fn(|k, _| bx.origin[k] + sigmoid(raw.raw_mean[k]) * bx.extent[k]);
    let scale = Vector3::from_fn(|k, _| sigmoid_open(raw.raw_scale[k]) * scale_cap);
    Ok(GaussianAnchor {
        mean,
        scale,
        rotation,
        opacity: sigmoid_open(raw.raw_opacity),
        semantics: raw.raw_semantics.clone(),
    })
}

/// Chain rule through [`activate`]: turns a gradient with respect to the
/// activated anchor (packed like [`UnconstrainedAnchor::to_vec`]) into one
/// with respect to the raw parameters.
pub fn activation_backward(
    raw: &UnconstrainedAnchor,
    bx: &SceneBox,
    scale_cap: f64,
    grad_activated: &[f64],
) -> Result<Vec<f64>> {
    let g = grad_activated;
    let mut out = vec![0.0; raw.num_params()];
    for k in 0..3 {
        out[k] = g[k] * bx.extent[k] * sigmoid_grad(raw.raw_mean[k]);
        out[3 + k] = g[3 + k] * scale_cap * sigmoid_grad(raw.raw_scale[k]);
    }
    let n = Quat(raw.raw_rotation).norm();
    if !(n >= 1e-12) {
        return Err(Error::DegenerateRotation(n));
    }
    // d(q/|q|)/dq = (I - q̂q̂ᵀ)/|q|
    let qh: Vec<f64> = raw.raw_rotation.iter().map(|c| c / n).collect();
    let dot: f64 = (0..4).map(|i| qh[i] * g[6 + i]).sum();
    for i in 0..4 {
        out[6 + i] = (g[6 + i] - qh[i] * dot) / n;
    }
    out[10] = g[10] * sigmoid_grad(raw.raw_opacity);
    out[GEOMETRY_PARAMS..].copy_from_slice(&g[GEOMETRY_PARAMS..]);
    Ok(out)
}

/// On-disk Gaussian set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSet {
    pub count: usize,
    pub s_max: f64,
    #[serde(rename = "box")]
    pub scene_box: SceneBox,
    pub anchors: Vec<Vec<f64>>,
}

impl GaussianSet {
    pub fn new(anchors: &[GaussianAnchor], scene_box: SceneBox, s_max: f64) -> Self {
        GaussianSet {
            count: anchors.len(),
            s_max,
            scene_box,
            anchors: anchors.iter().map(GaussianAnchor::to_row).collect(),
        }
    }

    pub fn to_anchors(&self, num_classes: usize) -> Result<Vec<GaussianAnchor>> {
        if self.count != self.anchors.len() {
            return Err(Error::Format(format!(
                "count {} disagrees with {} anchor rows",
                self.count,
                self.anchors.len()
            )));
        }
        self.anchors
            .iter()
            .map(|r| GaussianAnchor::from_row(r, num_classes))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn room_box() -> SceneBox {
        SceneBox::new([0.0; 3], [4.8, 4.8, 2.88], 0.08).unwrap()
    }

    fn raw_zero() -> UnconstrainedAnchor {
        UnconstrainedAnchor {
            raw_mean: [0.0; 3],
            raw_scale: [0.0; 3],
            raw_rotation: [1.0, 0.0, 0.0, 0.0],
            raw_opacity: 0.0,
            raw_semantics: vec![0.0; NUM_CLASSES],
        }
    }

    fn random_raw(rng: &mut ChaCha8Rng, spread: f64) -> UnconstrainedAnchor {
        let mut g = || rng.random_range(-spread..spread);
        UnconstrainedAnchor {
            raw_mean: [g(), g(), g()],
            raw_scale: [g(), g(), g()],
            raw_rotation: [g(), g(), g(), g()],
            raw_opacity: g(),
            raw_semantics: (0..NUM_CLASSES).map(|_| g()).collect(),
        }
    }

    #[test]
    fn box_dims_follow_extent() {
        assert_eq!(room_box().dims(), [60, 60, 36]);
        assert!(SceneBox::new([0.0; 3], [1.0, 1.0, 0.0], 0.1).is_err());
        assert!(SceneBox::new([0.0; 3], [1.0, 1.0, 1.0], -0.1).is_err());
    }

    #[test]
    fn activate_midpoints() {
        let a = activate(&raw_zero(), &room_box(), 0.08).unwrap();
        assert_relative_eq!(a.mean, Vector3::new(2.4, 2.4, 1.44), epsilon = 1e-12);
        assert_relative_eq!(a.scale, Vector3::new(0.04, 0.04, 0.04), epsilon = 1e-15);
        assert_eq!(a.rotation, Quat::IDENTITY);
        assert_eq!(a.opacity, 0.5);
    }

    #[test]
    fn activate_rejects_zero_rotation() {
        let mut raw = raw_zero();
        raw.raw_rotation = [0.0; 4];
        assert!(matches!(
            activate(&raw, &room_box(), 0.08),
            Err(Error::DegenerateRotation(_))
        ));
        assert!(activate(&raw_zero(), &room_box(), 0.0).is_err());
    }

    #[test]
    fn activate_always_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bx = room_box();
        for i in 0..10_000 {
            let spread = if i % 2 == 0 { 5.0 } else { 800.0 };
            let raw = random_raw(&mut rng, spread);
            let a = activate(&raw, &bx, 0.08).unwrap();
            a.validate(0.08).unwrap();
            assert!(bx.contains(&a.mean));
        }
    }

    #[test]
    fn quaternion_examples() {
        assert_eq!(quaternion_to_matrix(&Quat::IDENTITY), Matrix3::identity());
        let h = 0.5f64.sqrt();
        let r = quaternion_to_matrix(&Quat([h, 0.0, 0.0, h]));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(r, expected, epsilon = 1e-15);
    }

    #[test]
    fn quaternion_matrix_is_orthonormal_and_double_covered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let raw: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let q = Quat::normalized(raw).unwrap();
            let r = quaternion_to_matrix(&q);
            assert_relative_eq!(r.transpose() * r, Matrix3::identity(), epsilon = 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-9);
            let neg = Quat(q.0.map(|c| -c));
            assert_eq!(quaternion_to_matrix(&neg), r);
        }
    }

    #[test]
    fn covariance_examples() {
        let mut a = activate(&raw_zero(), &room_box(), 0.08).unwrap();
        a.scale = Vector3::new(1.0, 2.0, 3.0);
        assert_relative_eq!(
            covariance(&a),
            Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)),
            epsilon = 1e-15
        );
        let h = 0.5f64.sqrt();
        a.rotation = Quat([h, 0.0, 0.0, h]);
        a.scale = Vector3::new(1.0, 2.0, 1.0);
        assert_relative_eq!(
            covariance(&a),
            Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)),
            epsilon = 1e-12
        );
    }

    /// Covariance by explicit index loops, no matrix library products.
    fn covariance_oracle(a: &GaussianAnchor) -> [[f64; 3]; 3] {
        let r = quaternion_to_matrix(&a.rotation);
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out[i][j] += r[(i, k)] * a.scale[k] * a.scale[k] * r[(j, k)];
                }
            }
        }
        out
    }

    #[test]
    fn covariance_matches_oracle_and_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bx = room_box();
        for _ in 0..1000 {
            let a = activate(&random_raw(&mut rng, 3.0), &bx, 0.08).unwrap();
            let sigma = covariance(&a);
            let oracle = covariance_oracle(&a);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((sigma[(i, j)] - oracle[i][j]).abs() < 1e-12);
                    assert_eq!(sigma[(i, j)], sigma[(j, i)]);
                }
            }
            let mut eig: Vec<f64> = sigma.symmetric_eigenvalues().iter().copied().collect();
            eig.sort_by(f64::total_cmp);
            let mut s2: Vec<f64> = a.scale.iter().map(|s| s * s).collect();
            s2.sort_by(f64::total_cmp);
            for (e, s) in eig.iter().zip(&s2) {
                assert!((e - s).abs() < 1e-9, "{e} vs {s}");
            }
            let p = a.precision() * sigma;
            assert_relative_eq!(p, Matrix3::identity(), epsilon = 1e-8);
        }
    }

    #[test]
    fn activation_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bx = room_box();
        let raw = random_raw(&mut rng, 2.0);
        let weights: Vec<f64> = (0..raw.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |r: &UnconstrainedAnchor| -> f64 {
            let a = activate(r, &bx, 0.08).unwrap();
            a.to_row().iter().zip(&weights).map(|(x, w)| x * w).sum()
        };
        let analytic = activation_backward(&raw, &bx, 0.08, &weights).unwrap();
        let base = raw.to_vec();
        for i in 0..base.len() {
            let mut p = base.clone();
            let mut m = base.clone();
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (f(&UnconstrainedAnchor::from_slice(&p)) - f(&UnconstrainedAnchor::from_slice(&m))) / 2e-6;
            assert!((fd - analytic[i]).abs() < 1e-6, "param {i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn from_anchor_inverts_activate() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let bx = room_box();
        let a = activate(&random_raw(&mut rng, 2.0), &bx, 0.08).unwrap();
        let back = activate(&UnconstrainedAnchor::from_anchor(&a, &bx, 0.08), &bx, 0.08).unwrap();
        assert_relative_eq!(a.mean, back.mean, epsilon = 1e-9);
        assert_relative_eq!(a.scale, back.scale, epsilon = 1e-12);
        assert!((a.opacity - back.opacity).abs() < 1e-12);
    }

    #[test]
    fn gaussian_set_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bx = room_box();
        let anchors: Vec<_> = (0..5)
            .map(|_| activate(&random_raw(&mut rng, 2.0), &bx, 0.08).unwrap())
            .collect();
        let set = GaussianSet::new(&anchors, bx, 0.08);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.json");
        set.save(&path).unwrap();
        let back = GaussianSet::load(&path).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.to_anchors(NUM_CLASSES).unwrap(), anchors);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"count\":5") && text.contains("\"s_max\"") && text.contains("\"box\""));
    }
}
