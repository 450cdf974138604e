//! Independent reference implementations used only by tests. Nothing here
//! calls into the kernels it checks; shared helpers are limited to the data
//! types and `activate`.
#![allow(dead_code)]

use gaussocc::gaussian::{activate, quaternion_to_matrix, GaussianAnchor, SceneBox, UnconstrainedAnchor};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn softmax_oracle(c: &[f64]) -> Vec<f64> {
    let m = c.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = c.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Inverse covariance by explicit matrix product and general inversion.
fn precision_oracle(a: &GaussianAnchor) -> Matrix3<f64> {
    let r = quaternion_to_matrix(&a.rotation);
    let s = Matrix3::from_diagonal(&a.scale.component_mul(&a.scale));
    (r * s * r.transpose()).try_inverse().expect("covariance is invertible")
}

fn center(bx: &SceneBox, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
    Vector3::new(
        bx.origin[0] + (ix as f64 + 0.5) * bx.voxel_size,
        bx.origin[1] + (iy as f64 + 0.5) * bx.voxel_size,
        bx.origin[2] + (iz as f64 + 0.5) * bx.voxel_size,
    )
}

/// Double loop over every (voxel, Gaussian) pair. `cutoff = None` keeps the
/// untruncated kernel; `Some(k)` applies the exact `dᵀΣ⁻¹d ≤ k²` test.
pub fn brute_force_splat(anchors: &[GaussianAnchor], bx: &SceneBox, cutoff: Option<f64>, nc: usize) -> Vec<f64> {
    let [nx, ny, nz] = bx.dims();
    let precs: Vec<_> = anchors.iter().map(precision_oracle).collect();
    let probs: Vec<_> = anchors.iter().map(|a| softmax_oracle(&a.semantics)).collect();
    let mut out = vec![0.0; nx * ny * nz * nc];
    for ix in 0..nx {
        for iy in 0..ny {
            for iz in 0..nz {
                let v = (ix * ny + iy) * nz + iz;
                let x = center(bx, ix, iy, iz);
                for (g, a) in anchors.iter().enumerate() {
                    let d = x - a.mean;
                    let q = d.dot(&(precs[g] * d));
                    if let Some(k) = cutoff {
                        if q > k * k {
                            continue;
                        }
                    }
                    let w = a.opacity * (-0.5 * q).exp();
                    for k in 0..nc {
                        out[v * nc + k] += w * probs[g][k];
                    }
                }
            }
        }
    }
    out
}

/// `mask[g][v]`: whether voxel `v` lies inside Gaussian `g`'s cutoff ellipsoid.
pub fn membership(anchors: &[GaussianAnchor], bx: &SceneBox, cutoff: f64) -> Vec<Vec<bool>> {
    let [nx, ny, nz] = bx.dims();
    anchors
        .iter()
        .map(|a| {
            let p = precision_oracle(a);
            let mut m = vec![false; nx * ny * nz];
            for ix in 0..nx {
                for iy in 0..ny {
                    for iz in 0..nz {
                        let d = center(bx, ix, iy, iz) - a.mean;
                        m[(ix * ny + iy) * nz + iz] = d.dot(&(p * d)) <= cutoff * cutoff;
                    }
                }
            }
            m
        })
        .collect()
}

/// `Σ upstream ⊙ field` with the (voxel, Gaussian) membership held fixed.
pub fn masked_splat_objective(
    anchors: &[GaussianAnchor],
    bx: &SceneBox,
    mask: &[Vec<bool>],
    upstream: &[f64],
    nc: usize,
) -> f64 {
    let [nx, ny, nz] = bx.dims();
    let mut total = 0.0;
    for (g, a) in anchors.iter().enumerate() {
        let p = precision_oracle(a);
        let probs = softmax_oracle(&a.semantics);
        for ix in 0..nx {
            for iy in 0..ny {
                for iz in 0..nz {
                    let v = (ix * ny + iy) * nz + iz;
                    if !mask[g][v] {
                        continue;
                    }
                    let d = center(bx, ix, iy, iz) - a.mean;
                    let w = a.opacity * (-0.5 * d.dot(&(p * d))).exp();
                    for k in 0..nc {
                        total += upstream[v * nc + k] * w * probs[k];
                    }
                }
            }
        }
    }
    total
}

/// Central differences of `f` over every raw parameter of every anchor.
pub fn central_differences(
    raws: &[UnconstrainedAnchor],
    h: f64,
    f: impl Fn(&[UnconstrainedAnchor]) -> f64,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(raws.len());
    for g in 0..raws.len() {
        let base = raws[g].to_vec();
        let mut grads = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut plus = raws.to_vec();
            let mut minus = raws.to_vec();
            let mut p = base.clone();
            p[i] += h;
            plus[g] = UnconstrainedAnchor::from_slice(&p);
            let mut m = base.clone();
            m[i] -= h;
            minus[g] = UnconstrainedAnchor::from_slice(&m);
            grads[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out.push(grads);
    }
    out
}

pub fn random_raw(rng: &mut ChaCha8Rng, nc: usize) -> UnconstrainedAnchor {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let raw_mean = [u(-1.5, 1.5), u(-1.5, 1.5), u(-1.5, 1.5)];
    let raw_scale = [u(-1.0, 1.5), u(-1.0, 1.5), u(-1.0, 1.5)];
    let raw_rotation = [u(-1.0, 1.0), u(-1.0, 1.0), u(-1.0, 1.0), u(-1.0, 1.0)];
    let raw_opacity = u(-2.0, 2.0);
    let raw_semantics = (0..nc).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    UnconstrainedAnchor {
        raw_mean,
        raw_scale,
        raw_rotation,
        raw_opacity,
        raw_semantics,
    }
}

/// Random valid anchors spread over `bx`.
pub fn random_anchors(seed: u64, n: usize, bx: &SceneBox, s_max: f64, nc: usize) -> Vec<GaussianAnchor> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| activate(&random_raw(&mut r, nc), bx, s_max).unwrap())
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Group-wise relative error `max|a−f| / max|f|`.
pub fn group_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max);
    max_abs_diff(analytic, numeric) / scale.max(1e-12)
}
