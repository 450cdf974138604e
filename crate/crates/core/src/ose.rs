//! Opacity-gated sparse self-encoder over voxelized Gaussian means.
//!
//! Gaussians are bucketed into cells of `se_voxel_size`; each cell carries
//! the mean query of its Gaussians and the largest opacity logit among them.
//! Submanifold convolutions keep the occupied cell set fixed, and a pyramid
//! of stride-2 poolings widens the receptive field.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{validation, Result};
use crate::exec;
use crate::gaussian::{sigmoid, GaussianAnchor, SceneBox};
use crate::nn::{Queries, WeightFile};

pub const DEFAULT_SE_VOXEL_SIZE: f64 = 0.16;
pub const DEFAULT_NUM_SCALES: usize = 2;

pub type Cell = [i64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct SparseGaussianTensor {
    /// Occupied cells in lexicographic order.
    pub coords: Vec<Cell>,
    /// Row per cell.
    pub feats: Queries,
    /// Gaussian indices per cell, ascending.
    pub owners: Vec<Vec<usize>>,
    /// Largest opacity logit per cell.
    pub gate_opacity: Vec<f64>,
    /// Gaussians whose mean fell outside the box and were clamped.
    pub clamped: usize,
}

impl SparseGaussianTensor {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn width(&self) -> usize {
        self.feats.width
    }

    fn with_feats(&self, feats: Queries) -> Self {
        SparseGaussianTensor {
            coords: self.coords.clone(),
            feats,
            owners: self.owners.clone(),
            gate_opacity: self.gate_opacity.clone(),
            clamped: self.clamped,
        }
    }
}

/// Logit of an activated opacity.
pub fn opacity_logit(o: f64) -> f64 {
    let o = o.clamp(1e-12, 1.0 - 1e-12);
    (o / (1.0 - o)).ln()
}

/// Buckets Gaussian means into cells of `se_voxel_size` measured from the box
/// origin. Means outside the box are clamped to the boundary cell.
pub fn voxelize_queries(
    anchors: &[GaussianAnchor],
    queries: &Queries,
    bx: &SceneBox,
    se_voxel_size: f64,
) -> Result<SparseGaussianTensor> {
    if !(se_voxel_size > 0.0) {
        return Err(validation("self-encoder voxel size must be positive"));
    }
    if queries.len() != anchors.len() {
        return Err(validation(format!(
            "{} queries for {} Gaussians",
            queries.len(),
            anchors.len()
        )));
    }
    let max_cell: Vec<i64> = (0..3)
        .map(|k| ((bx.extent[k] / se_voxel_size).ceil() as i64 - 1).max(0))
        .collect();
    let mut clamped = 0;
    let mut cells: BTreeMap<Cell, Vec<usize>> = BTreeMap::new();
    for (i, a) in anchors.iter().enumerate() {
        let mut c = [0i64; 3];
        let mut out = false;
        for k in 0..3 {
            let f = ((a.mean[k] - bx.origin[k]) / se_voxel_size).floor();
            let v = if f.is_finite() { f as i64 } else { 0 };
            c[k] = v.clamp(0, max_cell[k]);
            out |= c[k] != v;
        }
        if out {
            clamped += 1;
        }
        cells.entry(c).or_default().push(i);
    }
    if clamped > 0 {
        log::warn!("{clamped} Gaussian means outside the box were clamped to boundary cells");
    }
    let width = queries.width;
    let mut coords = Vec::with_capacity(cells.len());
    let mut owners = Vec::with_capacity(cells.len());
    let mut feats = Queries::zeros(cells.len(), width);
    let mut gate = Vec::with_capacity(cells.len());
    for (ci, (c, own)) in cells.into_iter().enumerate() {
        let row = feats.row_mut(ci);
        for &g in &own {
            for (r, q) in row.iter_mut().zip(queries.row(g)) {
                *r += q;
            }
        }
        let inv = 1.0 / own.len() as f64;
        row.iter_mut().for_each(|r| *r *= inv);
        gate.push(
            own.iter()
                .map(|&g| opacity_logit(anchors[g].opacity))
                .fold(f64::NEG_INFINITY, f64::max),
        );
        coords.push(c);
        owners.push(own);
    }
    Ok(SparseGaussianTensor {
        coords,
        feats,
        owners,
        gate_opacity: gate,
        clamped,
    })
}

/// Index of offset `(dx, dy, dz)` in a 3×3×3 kernel.
pub fn offset_index(d: [i64; 3]) -> usize {
    ((d[0] + 1) * 9 + (d[1] + 1) * 3 + (d[2] + 1)) as usize
}

fn offset_of(k: usize) -> [i64; 3] {
    let k = k as i64;
    [k / 9 - 1, (k / 3) % 3 - 1, k % 3 - 1]
}

/// Submanifold convolution: one `out × in` matrix per kernel offset.
/// Output at a cell is `bias + Σ W[δ] · f(cell + δ)` over occupied neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseConvLayer {
    pub kernel: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    /// `kernel³` matrices, each `out × in` row-major.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl SparseConvLayer {
    pub fn zeros(kernel: usize, in_dim: usize, out_dim: usize) -> Result<Self> {
        if kernel != 1 && kernel != 3 {
            return Err(validation(format!("kernel size must be 1 or 3, got {kernel}")));
        }
        Ok(SparseConvLayer {
            kernel,
            in_dim,
            out_dim,
            weights: vec![vec![0.0; in_dim * out_dim]; kernel.pow(3)],
            bias: vec![0.0; out_dim],
        })
    }

    /// Identity at the center tap, zero elsewhere.
    pub fn identity(kernel: usize, width: usize) -> Result<Self> {
        let mut l = Self::zeros(kernel, width, width)?;
        let c = l.center();
        for i in 0..width {
            l.weights[c][i * width + i] = 1.0;
        }
        Ok(l)
    }

    pub fn random<R: Rng>(rng: &mut R, kernel: usize, in_dim: usize, out_dim: usize, gain: f64) -> Result<Self> {
        let mut l = Self::zeros(kernel, in_dim, out_dim)?;
        let a = gain / ((in_dim * kernel.pow(3)).max(1) as f64).sqrt();
        for w in l.weights.iter_mut().flatten().chain(l.bias.iter_mut()) {
            *w = rng.random_range(-a..=a);
        }
        Ok(l)
    }

    fn center(&self) -> usize {
        if self.kernel == 3 {
            13
        } else {
            0
        }
    }

    pub fn store(&self, w: &mut WeightFile, name: &str) {
        for (i, m) in self.weights.iter().enumerate() {
            w.insert(format!("{name}.offset_{i}.weight"), vec![self.out_dim, self.in_dim], m.clone());
        }
        w.insert(format!("{name}.bias"), vec![self.out_dim], self.bias.clone());
    }

    pub fn load(w: &WeightFile, name: &str, kernel: usize, in_dim: usize, out_dim: usize) -> Result<Self> {
        let mut l = Self::zeros(kernel, in_dim, out_dim)?;
        for (i, m) in l.weights.iter_mut().enumerate() {
            *m = w.get(&format!("{name}.offset_{i}.weight"), &[out_dim, in_dim])?.to_vec();
        }
        l.bias = w.get(&format!("{name}.bias"), &[out_dim])?.to_vec();
        Ok(l)
    }
}

/// Neighbor table: for each cell and kernel tap, the neighbor's row.
struct NeighborMap {
    taps: usize,
    nbrs: Vec<Option<usize>>,
}

impl NeighborMap {
    fn build(coords: &[Cell], kernel: usize) -> Self {
        let taps = kernel.pow(3);
        if kernel == 1 {
            return NeighborMap {
                taps,
                nbrs: (0..coords.len()).map(Some).collect(),
            };
        }
        let index: HashMap<Cell, usize> = coords.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        let mut nbrs = Vec::with_capacity(coords.len() * taps);
        for c in coords {
            for k in 0..taps {
                let d = offset_of(k);
                nbrs.push(index.get(&[c[0] + d[0], c[1] + d[1], c[2] + d[2]]).copied());
            }
        }
        NeighborMap { taps, nbrs }
    }
}

fn conv_with(t: &SparseGaussianTensor, layer: &SparseConvLayer, map: &NeighborMap) -> Queries {
    let (ind, outd) = (layer.in_dim, layer.out_dim);
    let rows = exec::map_indices(t.len(), |i| {
        let mut y = layer.bias.clone();
        for k in 0..map.taps {
            let Some(j) = map.nbrs[i * map.taps + k] else { continue };
            let x = t.feats.row(j);
            let w = &layer.weights[k];
            for (o, yo) in y.iter_mut().enumerate() {
                *yo += w[o * ind..(o + 1) * ind].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        y
    });
    Queries {
        width: outd,
        data: rows.concat(),
    }
}

pub fn submanifold_conv(t: &SparseGaussianTensor, layer: &SparseConvLayer) -> Result<SparseGaussianTensor> {
    if layer.in_dim != t.width() {
        return Err(validation(format!(
            "layer expects width {}, tensor has {}",
            layer.in_dim,
            t.width()
        )));
    }
    let map = NeighborMap::build(&t.coords, layer.kernel);
    Ok(t.with_feats(conv_with(t, layer, &map)))
}

/// `conv3(t) ⊙ (σ(o) + σ(conv1(t)))`, with the cell opacity logit `o`
/// broadcast over channels.
pub fn ogspconv(t: &SparseGaussianTensor, conv3: &SparseConvLayer, conv1: &SparseConvLayer) -> Result<SparseGaussianTensor> {
    if conv3.kernel != 3 || conv1.kernel != 1 {
        return Err(validation("gated convolution needs a 3×3×3 and a 1×1×1 kernel"));
    }
    if conv3.out_dim != conv1.out_dim {
        return Err(validation(format!(
            "gate width {} differs from feature width {}",
            conv1.out_dim, conv3.out_dim
        )));
    }
    let a = submanifold_conv(t, conv3)?;
    let g = submanifold_conv(t, conv1)?;
    let mut out = a.feats;
    for i in 0..t.len() {
        let so = sigmoid(t.gate_opacity[i]);
        for (v, gv) in out.row_mut(i).iter_mut().zip(g.feats.row(i)) {
            *v *= so + sigmoid(*gv);
        }
    }
    Ok(t.with_feats(out))
}

/// Stride-2 mean pooling of occupied cells. Returns the coarse tensor and,
/// per fine cell, the index of its parent.
pub fn pool_stride2(t: &SparseGaussianTensor) -> (SparseGaussianTensor, Vec<usize>) {
    let mut groups: BTreeMap<Cell, Vec<usize>> = BTreeMap::new();
    for (i, c) in t.coords.iter().enumerate() {
        groups.entry(c.map(|v| v.div_euclid(2))).or_default().push(i);
    }
    let mut parent = vec![0usize; t.len()];
    let mut coords = Vec::with_capacity(groups.len());
    let mut owners = Vec::with_capacity(groups.len());
    let mut gate = Vec::with_capacity(groups.len());
    let mut feats = Queries::zeros(groups.len(), t.width());
    for (pi, (c, kids)) in groups.into_iter().enumerate() {
        let row = feats.row_mut(pi);
        for &k in &kids {
            parent[k] = pi;
            for (r, v) in row.iter_mut().zip(t.feats.row(k)) {
                *r += v;
            }
        }
        let inv = 1.0 / kids.len() as f64;
        row.iter_mut().for_each(|r| *r *= inv);
        gate.push(kids.iter().map(|&k| t.gate_opacity[k]).fold(f64::NEG_INFINITY, f64::max));
        let mut own: Vec<usize> = kids.iter().flat_map(|&k| t.owners[k].iter().copied()).collect();
        own.sort_unstable();
        owners.push(own);
        coords.push(c);
    }
    (
        SparseGaussianTensor {
            coords,
            feats,
            owners,
            gate_opacity: gate,
            clamped: t.clamped,
        },
        parent,
    )
}

/// Gated convolution pair for one pyramid scale.
#[derive(Debug, Clone, PartialEq)]
pub struct OseScale {
    pub conv3: SparseConvLayer,
    pub conv1: SparseConvLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OseWeights {
    pub scales: Vec<OseScale>,
}

impl OseWeights {
    pub fn zeros(width: usize, num_scales: usize) -> Self {
        OseWeights {
            scales: (0..num_scales)
                .map(|_| OseScale {
                    conv3: SparseConvLayer::zeros(3, width, width).expect("kernel 3"),
                    conv1: SparseConvLayer::zeros(1, width, width).expect("kernel 1"),
                })
                .collect(),
        }
    }

    pub fn random<R: Rng>(rng: &mut R, width: usize, num_scales: usize, gain: f64) -> Self {
        OseWeights {
            scales: (0..num_scales)
                .map(|_| OseScale {
                    conv3: SparseConvLayer::random(rng, 3, width, width, gain).expect("kernel 3"),
                    conv1: SparseConvLayer::random(rng, 1, width, width, gain).expect("kernel 1"),
                })
                .collect(),
        }
    }

    pub fn store(&self, w: &mut WeightFile, prefix: &str) {
        for (k, s) in self.scales.iter().enumerate() {
            s.conv3.store(w, &format!("{prefix}.scale{k}.conv3"));
            s.conv1.store(w, &format!("{prefix}.scale{k}.conv1"));
        }
    }

    pub fn load(w: &WeightFile, prefix: &str, width: usize, num_scales: usize) -> Result<Self> {
        let scales = (0..num_scales)
            .map(|k| {
                Ok(OseScale {
                    conv3: SparseConvLayer::load(w, &format!("{prefix}.scale{k}.conv3"), 3, width, width)?,
                    conv1: SparseConvLayer::load(w, &format!("{prefix}.scale{k}.conv1"), 1, width, width)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(OseWeights { scales })
    }
}

/// Runs the gated convolution at `num_scales` pyramid levels, broadcasts the
/// coarse outputs back to the finest cells, sums them, and adds each cell's
/// result to the queries of its Gaussians: `q' = q + cell_out`.
pub fn multiscale_self_encode(
    t: &SparseGaussianTensor,
    queries: &Queries,
    weights: &OseWeights,
    num_scales: usize,
) -> Result<Queries> {
    if num_scales == 0 {
        return Err(validation("need at least one self-encoder scale"));
    }
    if weights.scales.len() < num_scales {
        return Err(validation(format!(
            "{} scales requested but weights hold {}",
            num_scales,
            weights.scales.len()
        )));
    }
    let mut total = ogspconv(t, &weights.scales[0].conv3, &weights.scales[0].conv1)?.feats;
    let mut level = t.clone();
    // fine cell -> cell at the current coarse level
    let mut lineage: Vec<usize> = (0..t.len()).collect();
    for s in 1..num_scales {
        let (coarse, parent) = pool_stride2(&level);
        for l in lineage.iter_mut() {
            *l = parent[*l];
        }
        let out = ogspconv(&coarse, &weights.scales[s].conv3, &weights.scales[s].conv1)?;
        for (i, &p) in lineage.iter().enumerate() {
            for (a, b) in total.row_mut(i).iter_mut().zip(out.feats.row(p)) {
                *a += b;
            }
        }
        level = coarse;
    }
    let mut updated = queries.clone();
    for (ci, own) in t.owners.iter().enumerate() {
        for &g in own {
            for (q, v) in updated.row_mut(g).iter_mut().zip(total.row(ci)) {
                *q += v;
            }
        }
    }
    Ok(updated)
}
