//! Geometry-aware cross-encoder.
//!
//! Each Gaussian spawns reference points on its ellipsoid, projects them into
//! the image, samples a feature pyramid there, and mixes the samples first
//! across channels with query-conditioned weights and then across points with
//! shape-conditioned weights.

use nalgebra::Vector3;
use rand::Rng;

use crate::camera::{project, CameraModel, Projection};
use crate::error::{validation, Result};
use crate::exec;
use crate::gaussian::GaussianAnchor;
use crate::nn::{relu_in_place, LayerNorm, Linear, Queries, WeightFile};

/// Length of the shape descriptor: scale (3) and rotation matrix (9).
pub const GEOMETRY_DESCRIPTOR: usize = 12;

/// Reference-point directions in the Gaussian's local frame, scaled by its
/// semi-axes before rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetTemplate {
    pub offsets: Vec<Vector3<f64>>,
}

impl OffsetTemplate {
    pub fn new(offsets: Vec<Vector3<f64>>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(validation("offset template needs at least one point"));
        }
        if offsets.iter().any(|o| !(o.norm() <= 1.0 + 1e-12)) {
            return Err(validation("template offsets must have norm at most 1"));
        }
        Ok(OffsetTemplate { offsets })
    }

    /// The six principal-axis endpoints, optionally with the center first.
    pub fn axes(with_center: bool) -> Self {
        let mut offsets = Vec::with_capacity(7);
        if with_center {
            offsets.push(Vector3::zeros());
        }
        for k in 0..3 {
            for s in [1.0, -1.0] {
                let mut v = Vector3::zeros();
                v[k] = s;
                offsets.push(v);
            }
        }
        OffsetTemplate { offsets }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

impl Default for OffsetTemplate {
    fn default() -> Self {
        Self::axes(true)
    }
}

/// `P_j = m + R (Δm₀_j ⊙ s)`.
pub fn reference_points(anchor: &GaussianAnchor, tmpl: &OffsetTemplate) -> Vec<Vector3<f64>> {
    let r = anchor.rotation_matrix();
    tmpl.offsets
        .iter()
        .map(|o| anchor.mean + r * o.component_mul(&anchor.scale))
        .collect()
}

/// One `H × W × C` map, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureMap {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let i = (row * self.width + col) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// 2× average pooling; edge blocks average the pixels they contain.
    pub fn pool2(&self) -> FeatureMap {
        let h = self.height.div_ceil(2);
        let w = self.width.div_ceil(2);
        let mut out = FeatureMap::zeros(h, w, self.channels);
        for i in 0..h {
            for j in 0..w {
                let mut n = 0.0;
                let acc = out.pixel_mut(i, j);
                for di in 0..2 {
                    for dj in 0..2 {
                        let (r, c) = (2 * i + di, 2 * j + dj);
                        if r < self.height && c < self.width {
                            let start = (r * self.width + c) * self.channels;
                            for (a, v) in acc.iter_mut().zip(&self.data[start..start + self.channels]) {
                                *a += v;
                            }
                            n += 1.0;
                        }
                    }
                }
                acc.iter_mut().for_each(|a| *a /= n);
            }
        }
        out
    }

    /// Bilinear lookup at continuous pixel position `(x, y)` where integer
    /// coordinates are pixel centers; positions clamp to the border.
    pub fn bilinear(&self, x: f64, y: f64, out: &mut [f64], weight: f64) {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let taps = [
            (y0, x0, (1.0 - fx) * (1.0 - fy)),
            (y0, x1, fx * (1.0 - fy)),
            (y1, x0, (1.0 - fx) * fy),
            (y1, x1, fx * fy),
        ];
        for (r, c, w) in taps {
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.pixel(r, c)) {
                *o += weight * w * v;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
    /// Pixel stride of each level relative to the full image.
    pub strides: Vec<usize>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<FeatureMap>, strides: Vec<usize>) -> Result<Self> {
        if levels.is_empty() || levels.len() != strides.len() {
            return Err(validation("pyramid needs one stride per level"));
        }
        if strides.windows(2).any(|w| w[0] >= w[1]) || strides[0] == 0 {
            return Err(validation("pyramid strides must be positive and increasing"));
        }
        let c = levels[0].channels;
        if levels.iter().any(|l| l.channels != c || l.height == 0 || l.width == 0) {
            return Err(validation("pyramid levels must share the channel count"));
        }
        if levels.iter().any(|l| l.data.iter().any(|v| !v.is_finite())) {
            return Err(validation("pyramid has non-finite values"));
        }
        Ok(FeaturePyramid { levels, strides })
    }

    /// Level 0 plus `levels - 1` successive 2× poolings.
    pub fn from_base(base: FeatureMap, levels: usize) -> Result<Self> {
        let mut maps = vec![base];
        for _ in 1..levels.max(1) {
            let next = maps.last().expect("nonempty").pool2();
            maps.push(next);
        }
        let strides = (0..maps.len()).map(|l| 1usize << l).collect();
        Self::new(maps, strides)
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

/// Learned maps of the cross-encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct MixWeights {
    /// query → per-point, per-level logits (`R · L`).
    pub attention: Linear,
    /// query → `C × C` channel-mixing matrix.
    pub semantic_proj: Linear,
    /// shape descriptor → `R × R` point-mixing matrix.
    pub geometric_proj: Linear,
    /// pyramid channels → query channels, applied to each sample.
    pub value_proj: Option<Linear>,
    pub semantic_norm: LayerNorm,
    pub geometric_norm: LayerNorm,
}

impl MixWeights {
    pub fn zeros(width: usize, points: usize, levels: usize, feat_channels: usize) -> Self {
        MixWeights {
            attention: Linear::zeros(width, points * levels),
            semantic_proj: Linear::zeros(width, width * width),
            geometric_proj: Linear::zeros(GEOMETRY_DESCRIPTOR, points * points),
            value_proj: (feat_channels != width).then(|| Linear::zeros(feat_channels, width)),
            semantic_norm: LayerNorm::identity(width),
            geometric_norm: LayerNorm::identity(width),
        }
    }

    pub fn random<R: Rng>(rng: &mut R, width: usize, points: usize, levels: usize, feat_channels: usize, gain: f64) -> Self {
        MixWeights {
            attention: Linear::random(rng, width, points * levels, gain),
            semantic_proj: Linear::random(rng, width, width * width, gain),
            geometric_proj: Linear::random(rng, GEOMETRY_DESCRIPTOR, points * points, gain),
            value_proj: (feat_channels != width).then(|| Linear::random(rng, feat_channels, width, gain)),
            semantic_norm: LayerNorm::identity(width),
            geometric_norm: LayerNorm::identity(width),
        }
    }

    pub fn width(&self) -> usize {
        self.semantic_norm.gain.len()
    }

    pub fn points(&self) -> usize {
        (self.geometric_proj.out_dim as f64).sqrt().round() as usize
    }

    pub fn store(&self, w: &mut WeightFile, prefix: &str) {
        self.attention.store(w, &format!("{prefix}.attention_proj"));
        self.semantic_proj.store(w, &format!("{prefix}.semantic_proj"));
        self.geometric_proj.store(w, &format!("{prefix}.geometric_proj"));
        if let Some(v) = &self.value_proj {
            v.store(w, &format!("{prefix}.value_proj"));
        }
        self.semantic_norm.store(w, &format!("{prefix}.semantic_norm"));
        self.geometric_norm.store(w, &format!("{prefix}.geometric_norm"));
    }

    pub fn load(w: &WeightFile, prefix: &str, width: usize, points: usize, levels: usize, feat_channels: usize) -> Result<Self> {
        Ok(MixWeights {
            attention: Linear::load(w, &format!("{prefix}.attention_proj"), width, points * levels)?,
            semantic_proj: Linear::load(w, &format!("{prefix}.semantic_proj"), width, width * width)?,
            geometric_proj: Linear::load(w, &format!("{prefix}.geometric_proj"), GEOMETRY_DESCRIPTOR, points * points)?,
            value_proj: if feat_channels != width {
                Some(Linear::load(w, &format!("{prefix}.value_proj"), feat_channels, width)?)
            } else {
                None
            },
            semantic_norm: LayerNorm::load(w, &format!("{prefix}.semantic_norm"), width)?,
            geometric_norm: LayerNorm::load(w, &format!("{prefix}.geometric_norm"), width)?,
        })
    }
}

/// Per-Gaussian point samples, `N × R × C` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatures {
    pub points: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl PointFeatures {
    pub fn zeros(n: usize, points: usize, width: usize) -> Self {
        PointFeatures {
            points,
            width,
            data: vec![0.0; n * points * width],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len() / (self.points * self.width).max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn gaussian(&self, i: usize) -> &[f64] {
        let s = self.points * self.width;
        &self.data[i * s..(i + 1) * s]
    }

    pub fn point(&self, i: usize, j: usize) -> &[f64] {
        let s = (i * self.points + j) * self.width;
        &self.data[s..s + self.width]
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    v.iter_mut().for_each(|x| *x /= z);
}

/// Samples every pyramid level at each projected reference point and blends
/// the levels with a per-point softmax of the query's attention logits.
/// Points that failed projection yield zero rows.
pub fn deformable_sample(
    queries: &Queries,
    projections: &[Vec<Projection>],
    pyramid: &FeaturePyramid,
    weights: &MixWeights,
) -> Result<PointFeatures> {
    let n = queries.len();
    let levels = pyramid.num_levels();
    let r = projections.first().map_or(weights.points(), Vec::len);
    if projections.len() != n || projections.iter().any(|p| p.len() != r) {
        return Err(validation("one projection list of equal length per Gaussian is required"));
    }
    if weights.attention.out_dim != r * levels || weights.attention.in_dim != queries.width {
        return Err(validation("attention weights do not match points × levels"));
    }
    let fc = pyramid.channels();
    let width = weights.width();
    if weights.value_proj.is_none() && fc != width {
        return Err(validation("pyramid channels differ from query width"));
    }
    let rows = exec::map_indices(n, |i| {
        let mut out = vec![0.0; r * width];
        let proj = &projections[i];
        if proj.iter().all(|p| !p.valid) {
            return out;
        }
        let logits = weights.attention.forward(queries.row(i));
        let mut sample = vec![0.0; fc];
        for (j, p) in proj.iter().enumerate() {
            if !p.valid {
                continue;
            }
            let mut a = logits[j * levels..(j + 1) * levels].to_vec();
            softmax_in_place(&mut a);
            sample.iter_mut().for_each(|s| *s = 0.0);
            for (l, map) in pyramid.levels.iter().enumerate() {
                let s = pyramid.strides[l] as f64;
                map.bilinear(p.pixel[0] / s - 0.5, p.pixel[1] / s - 0.5, &mut sample, a[l]);
            }
            let dst = &mut out[j * width..(j + 1) * width];
            match &weights.value_proj {
                Some(v) => dst.copy_from_slice(&v.forward(&sample)),
                None => dst.copy_from_slice(&sample),
            }
        }
        out
    });
    Ok(PointFeatures {
        points: r,
        width,
        data: rows.concat(),
    })
}

/// `Q_s = ReLU(LN(Q_p · W_s))` with `W_s` generated from each query.
pub fn semantic_mix(qp: &PointFeatures, queries: &Queries, weights: &MixWeights) -> Result<PointFeatures> {
    let c = qp.width;
    if queries.len() != qp.len() || queries.width != c || weights.semantic_proj.out_dim != c * c {
        return Err(validation("semantic mixing shapes disagree"));
    }
    let rows = exec::map_indices(qp.len(), |i| {
        let ws = weights.semantic_proj.forward(queries.row(i));
        let mut out = vec![0.0; qp.points * c];
        for j in 0..qp.points {
            let x = qp.point(i, j);
            let y = &mut out[j * c..(j + 1) * c];
            for (a, xa) in x.iter().enumerate() {
                if *xa == 0.0 {
                    continue;
                }
                for (b, yb) in y.iter_mut().enumerate() {
                    *yb += xa * ws[a * c + b];
                }
            }
            weights.semantic_norm.apply(y);
            relu_in_place(y);
        }
        out
    });
    Ok(PointFeatures {
        points: qp.points,
        width: c,
        data: rows.concat(),
    })
}

/// Scale followed by the row-major rotation matrix.
pub fn geometry_descriptor(anchor: &GaussianAnchor) -> [f64; GEOMETRY_DESCRIPTOR] {
    let mut g = [0.0; GEOMETRY_DESCRIPTOR];
    g[..3].copy_from_slice(anchor.scale.as_slice());
    let r = anchor.rotation_matrix();
    for i in 0..3 {
        for j in 0..3 {
            g[3 + 3 * i + j] = r[(i, j)];
        }
    }
    g
}

/// `Q_g = ReLU(LN(W_g · Q_s))`, mixing along the point axis with `W_g`
/// generated from each Gaussian's shape.
pub fn geometric_mix(qs: &PointFeatures, anchors: &[GaussianAnchor], weights: &MixWeights) -> Result<PointFeatures> {
    let (r, c) = (qs.points, qs.width);
    if anchors.len() != qs.len() || weights.geometric_proj.out_dim != r * r {
        return Err(validation("geometric mixing shapes disagree"));
    }
    let rows = exec::map_indices(qs.len(), |i| {
        let wg = weights.geometric_proj.forward(&geometry_descriptor(&anchors[i]));
        let mut out = vec![0.0; r * c];
        for j in 0..r {
            let y = &mut out[j * c..(j + 1) * c];
            for k in 0..r {
                let w = wg[j * r + k];
                for (yv, xv) in y.iter_mut().zip(qs.point(i, k)) {
                    *yv += w * xv;
                }
            }
            weights.geometric_norm.apply(y);
            relu_in_place(y);
        }
        out
    });
    Ok(PointFeatures {
        points: r,
        width: c,
        data: rows.concat(),
    })
}

/// Full cross-encoder pass: returns `q + mean_j Q_g[j]` per Gaussian.
pub fn cross_encode(
    anchors: &[GaussianAnchor],
    queries: &Queries,
    cam: &CameraModel,
    pyramid: &FeaturePyramid,
    tmpl: &OffsetTemplate,
    weights: &MixWeights,
) -> Result<Queries> {
    let projections: Vec<Vec<Projection>> =
        exec::map_indices(anchors.len(), |i| project(&reference_points(&anchors[i], tmpl), cam));
    let qp = deformable_sample(queries, &projections, pyramid, weights)?;
    let qs = semantic_mix(&qp, queries, weights)?;
    let qg = geometric_mix(&qs, anchors, weights)?;
    let mut out = queries.clone();
    let inv = 1.0 / qg.points as f64;
    for i in 0..anchors.len() {
        let g = qg.gaussian(i);
        let row = out.row_mut(i);
        for j in 0..qg.points {
            for (q, v) in row.iter_mut().zip(&g[j * qg.width..(j + 1) * qg.width]) {
                *q += inv * v;
            }
        }
    }
    Ok(out)
}
