//! Gaussian-to-voxel splatting.
//!
//! Each voxel center `x` gathers `o · exp(-½ dᵀΣ⁻¹d) · softmax(c)` from every
//! Gaussian whose `cutoff_sigma` ellipsoid contains it, `d = x - m`.
//!
//! The forward pass bins Gaussians by the x-slabs their cutoff bounding box
//! overlaps, then fills slabs independently. Within a voxel, contributions
//! are always summed in ascending Gaussian order, so the result does not
//! depend on how many threads run the slabs.

use nalgebra::{Matrix3, Vector3};

use crate::error::{validation, Error, Result};
use crate::exec;
use crate::gaussian::{quaternion_matrix_partials, rotate_diagonal, softmax, GaussianAnchor, SceneBox, NUM_CLASSES};
use crate::grid::{OccupancyGrid, SemanticField};

pub const DEFAULT_CUTOFF_SIGMA: f64 = 3.0;

/// Per-Gaussian data the kernels need, precomputed once per call.
struct Prepared {
    mean: [f64; 3],
    /// Upper triangle of Σ⁻¹: xx, xy, xz, yy, yz, zz.
    prec: [f64; 6],
    /// Inclusive voxel index ranges of the cutoff bounding box.
    lo: [usize; 3],
    hi: [usize; 3],
    empty: bool,
}

impl Prepared {
    #[inline]
    fn quad(&self, d: [f64; 3]) -> f64 {
        // Same association as the forward kernel's inner loop.
        let [pxx, pxy, pxz, pyy, pyz, pzz] = self.prec;
        let q_xy = pxx * d[0] * d[0] + pyy * d[1] * d[1] + 2.0 * pxy * d[0] * d[1];
        let lin = 2.0 * (pxz * d[0] + pyz * d[1]);
        q_xy + d[2] * (lin + pzz * d[2])
    }
}

fn num_classes_of(anchors: &[GaussianAnchor]) -> Result<usize> {
    let Some(first) = anchors.first() else {
        return Ok(NUM_CLASSES);
    };
    let c = first.semantics.len();
    if c == 0 || anchors.iter().any(|a| a.semantics.len() != c) {
        return Err(validation("anchors disagree on the number of classes"));
    }
    Ok(c)
}

fn prepare(anchor: &GaussianAnchor, bx: &SceneBox, cutoff_sigma: f64) -> Result<Prepared> {
    let finite = anchor.mean.iter().all(|v| v.is_finite())
        && anchor.scale.iter().all(|v| v.is_finite() && *v > 0.0)
        && anchor.rotation.0.iter().all(|v| v.is_finite())
        && anchor.opacity.is_finite()
        && anchor.semantics.iter().all(|v| v.is_finite());
    if !finite {
        return Err(validation("anchor with non-finite or non-positive fields"));
    }
    let prec_m = anchor.precision();
    let cov = anchor.covariance();
    let dims = bx.dims();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut empty = false;
    for k in 0..3 {
        // Half-width of the cutoff ellipsoid's bounding box, padded so the
        // exact ellipsoid test below always decides membership.
        let half = cutoff_sigma * cov[(k, k)].sqrt() * (1.0 + 1e-9) + 1e-12;
        let m = anchor.mean[k];
        let first = ((m - half - bx.origin[k]) / bx.voxel_size - 0.5).ceil();
        let last = ((m + half - bx.origin[k]) / bx.voxel_size - 0.5).floor();
        let first = first.max(0.0);
        let last = last.min(dims[k] as f64 - 1.0);
        if first > last {
            empty = true;
        } else {
            lo[k] = first as usize;
            hi[k] = last as usize;
        }
    }
    Ok(Prepared {
        mean: [anchor.mean[0], anchor.mean[1], anchor.mean[2]],
        prec: [
            prec_m[(0, 0)],
            prec_m[(0, 1)],
            prec_m[(0, 2)],
            prec_m[(1, 1)],
            prec_m[(1, 2)],
            prec_m[(2, 2)],
        ],
        lo,
        hi,
        empty,
    })
}

fn check_cutoff(cutoff_sigma: f64) -> Result<()> {
    if !(cutoff_sigma > 0.0 && cutoff_sigma.is_finite()) {
        return Err(validation(format!("cutoff sigma must be positive, got {cutoff_sigma}")));
    }
    Ok(())
}

/// Accumulates the semantic field of `anchors` over `bx`.
pub fn splat_forward(
    anchors: &[GaussianAnchor],
    bx: &SceneBox,
    cutoff_sigma: f64,
) -> Result<SemanticField> {
    check_cutoff(cutoff_sigma)?;
    let nc = num_classes_of(anchors)?;
    let prepared = anchors
        .iter()
        .map(|a| prepare(a, bx, cutoff_sigma))
        .collect::<Result<Vec<_>>>()?;
    // Opacity-scaled class distributions, one row per Gaussian.
    let mut amp = Vec::with_capacity(anchors.len() * nc);
    for a in anchors {
        amp.extend(softmax(&a.semantics).into_iter().map(|p| a.opacity * p));
    }

    let [dx, dy, dz] = bx.dims();
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); dx];
    for (g, p) in prepared.iter().enumerate() {
        if !p.empty {
            for bin in &mut bins[p.lo[0]..=p.hi[0]] {
                bin.push(g as u32);
            }
        }
    }

    let mut field = SemanticField::zeros(*bx, nc);
    let cut2 = cutoff_sigma * cutoff_sigma;
    let v = bx.voxel_size;
    let origin = bx.origin;
    exec::for_each_chunk_mut(&mut field.values, dy * dz * nc, |ix, slab| {
        let cx = origin[0] + (ix as f64 + 0.5) * v;
        for &g in &bins[ix] {
            let g = g as usize;
            let p = &prepared[g];
            let w_row = &amp[g * nc..(g + 1) * nc];
            let ddx = cx - p.mean[0];
            let [pxx, pxy, pxz, pyy, pyz, pzz] = p.prec;
            for iy in p.lo[1]..=p.hi[1] {
                let ddy = origin[1] + (iy as f64 + 0.5) * v - p.mean[1];
                let q_xy = pxx * ddx * ddx + pyy * ddy * ddy + 2.0 * pxy * ddx * ddy;
                let lin = 2.0 * (pxz * ddx + pyz * ddy);
                let row = iy * dz;
                for iz in p.lo[2]..=p.hi[2] {
                    let ddz = origin[2] + (iz as f64 + 0.5) * v - p.mean[2];
                    let q = q_xy + ddz * (lin + pzz * ddz);
                    if q <= cut2 {
                        let w = (-0.5 * q).exp();
                        let out = &mut slab[(row + iz) * nc..(row + iz + 1) * nc];
                        for (o, a) in out.iter_mut().zip(w_row) {
                            *o += w * a;
                        }
                    }
                }
            }
        }
    });
    Ok(field)
}

/// Argmax labels with a free fallback for voxels whose total mass is below
/// `mass_floor`; confidence is the total mass.
pub fn field_to_grid(field: &SemanticField, mass_floor: f64) -> OccupancyGrid {
    let n = field.num_voxels();
    let mut labels = vec![0u8; n];
    let mut confidence = vec![0f32; n];
    for i in 0..n {
        let vals = field.voxel(i);
        let total: f64 = vals.iter().sum();
        confidence[i] = total as f32;
        if total < mass_floor {
            continue;
        }
        let mut best = 0;
        for (k, &v) in vals.iter().enumerate() {
            if v > vals[best] {
                best = k;
            }
        }
        labels[i] = best as u8;
    }
    OccupancyGrid {
        scene_box: field.scene_box,
        labels,
        confidence: Some(confidence),
    }
}

/// Gradient of a scalar loss with respect to one activated anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGradient {
    pub mean: Vector3<f64>,
    pub scale: Vector3<f64>,
    /// With respect to the unit quaternion's components.
    pub rotation: [f64; 4],
    pub opacity: f64,
    /// With respect to the semantic logits (through the softmax).
    pub semantics: Vec<f64>,
}

impl AnchorGradient {
    pub fn zeros(num_classes: usize) -> Self {
        AnchorGradient {
            mean: Vector3::zeros(),
            scale: Vector3::zeros(),
            rotation: [0.0; 4],
            opacity: 0.0,
            semantics: vec![0.0; num_classes],
        }
    }

    /// Packed like [`GaussianAnchor::to_row`].
    pub fn to_packed(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(11 + self.semantics.len());
        v.extend(self.mean.iter());
        v.extend(self.scale.iter());
        v.extend_from_slice(&self.rotation);
        v.push(self.opacity);
        v.extend_from_slice(&self.semantics);
        v
    }

    pub fn is_zero(&self) -> bool {
        self.to_packed().iter().all(|&g| g == 0.0)
    }
}

/// Analytic gradients of `Σ upstream ⊙ splat_forward(anchors)` with respect
/// to every anchor. The cutoff membership is held fixed.
pub fn splat_backward(
    anchors: &[GaussianAnchor],
    bx: &SceneBox,
    cutoff_sigma: f64,
    upstream: &SemanticField,
) -> Result<Vec<AnchorGradient>> {
    check_cutoff(cutoff_sigma)?;
    let nc = num_classes_of(anchors)?;
    if upstream.scene_box.dims() != bx.dims() || upstream.num_classes != nc {
        return Err(Error::DimMismatch("upstream gradient shape differs from the field".into()));
    }
    if upstream.values.iter().any(|v| !v.is_finite()) {
        return Err(validation("upstream gradient is not finite"));
    }
    let prepared = anchors
        .iter()
        .map(|a| prepare(a, bx, cutoff_sigma))
        .collect::<Result<Vec<_>>>()?;
    let cut2 = cutoff_sigma * cutoff_sigma;
    let grads = exec::map_indices(anchors.len(), |g| {
        gaussian_backward(&anchors[g], &prepared[g], bx, cut2, upstream)
    });
    Ok(grads)
}

fn gaussian_backward(
    anchor: &GaussianAnchor,
    p: &Prepared,
    bx: &SceneBox,
    cut2: f64,
    upstream: &SemanticField,
) -> AnchorGradient {
    let nc = upstream.num_classes;
    let mut grad = AnchorGradient::zeros(nc);
    if p.empty {
        return grad;
    }
    let probs = softmax(&anchor.semantics);
    let o = anchor.opacity;
    let r = anchor.rotation_matrix();
    let inv_s2 = anchor.scale.map(|s| 1.0 / (s * s));

    let mut g_probs = vec![0.0; nc];
    let mut sum_bd = Vector3::zeros();
    let mut g_rot_matrix = Matrix3::zeros();
    let mut g_scale_q = Vector3::zeros();
    for ix in p.lo[0]..=p.hi[0] {
        for iy in p.lo[1]..=p.hi[1] {
            for iz in p.lo[2]..=p.hi[2] {
                let c = bx.voxel_center(ix, iy, iz);
                let d = [c[0] - p.mean[0], c[1] - p.mean[1], c[2] - p.mean[2]];
                let q = p.quad(d);
                if q > cut2 {
                    continue;
                }
                let w = (-0.5 * q).exp();
                let u = upstream.voxel(bx.flat_index(ix, iy, iz));
                let up: f64 = u.iter().zip(&probs).map(|(a, b)| a * b).sum();
                grad.opacity += w * up;
                for (gp, uk) in g_probs.iter_mut().zip(u) {
                    *gp += o * w * uk;
                }
                // dL/dq for this voxel
                let b = -0.5 * o * up * w;
                let d = Vector3::new(d[0], d[1], d[2]);
                sum_bd += b * d;
                let y = r.transpose() * d;
                let ys = y.component_mul(&inv_s2);
                g_rot_matrix += (2.0 * b) * d * ys.transpose();
                for j in 0..3 {
                    g_scale_q[j] += b * (-2.0 * y[j] * y[j] * inv_s2[j] / anchor.scale[j]);
                }
            }
        }
    }
    let prec = rotate_diagonal(&r, &inv_s2);
    grad.mean = -2.0 * prec * sum_bd;
    grad.scale = g_scale_q;
    let partials = quaternion_matrix_partials(&anchor.rotation);
    for (c, dr) in partials.iter().enumerate() {
        grad.rotation[c] = g_rot_matrix.component_mul(dr).sum();
    }
    let dot: f64 = g_probs.iter().zip(&probs).map(|(g, p)| g * p).sum();
    for k in 0..nc {
        grad.semantics[k] = probs[k] * (g_probs[k] - dot);
    }
    grad
}
