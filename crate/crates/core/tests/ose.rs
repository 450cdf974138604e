#![allow(clippy::needless_range_loop)]

mod common;

use common::oracles::rng;
use gaussocc::gaussian::{sigmoid, GaussianAnchor, Quat, SceneBox};
use gaussocc::nn::Queries;
use gaussocc::ose::{
    multiscale_self_encode, ogspconv, submanifold_conv, voxelize_queries, OseWeights, SparseConvLayer,
    SparseGaussianTensor,
};
use nalgebra::Vector3;
use rand::Rng;

fn anchor_at(p: [f64; 3], opacity: f64) -> GaussianAnchor {
    GaussianAnchor {
        mean: Vector3::from(p),
        scale: Vector3::repeat(0.04),
        rotation: Quat::IDENTITY,
        opacity,
        semantics: vec![0.0; 12],
    }
}

/// Random tensor on a `side³` lattice with cell size 1.
fn random_tensor(seed: u64, side: usize, count: usize, width: usize) -> SparseGaussianTensor {
    let mut r = rng(seed);
    let bx = SceneBox::from_dims([0.0; 3], [side; 3], 1.0).unwrap();
    let anchors: Vec<_> = (0..count)
        .map(|_| {
            anchor_at(
                [r.random_range(0.0..side as f64), r.random_range(0.0..side as f64), r.random_range(0.0..side as f64)],
                r.random_range(0.05..0.95),
            )
        })
        .collect();
    let q = Queries::random(&mut r, count, width, 1.0);
    voxelize_queries(&anchors, &q, &bx, 1.0).unwrap()
}

/// Dense correlation over a `side³` array, read back at occupied cells.
fn dense_conv_oracle(t: &SparseGaussianTensor, layer: &SparseConvLayer, side: usize) -> Vec<Vec<f64>> {
    let w = t.width();
    let idx = |x: i64, y: i64, z: i64| ((x * side as i64 + y) * side as i64 + z) as usize;
    let mut dense = vec![vec![0.0; w]; side * side * side];
    for (i, c) in t.coords.iter().enumerate() {
        dense[idx(c[0], c[1], c[2])] = t.feats.row(i).to_vec();
    }
    let half = (layer.kernel / 2) as i64;
    t.coords
        .iter()
        .map(|c| {
            let mut y = layer.bias.clone();
            for dx in -half..=half {
                for dy in -half..=half {
                    for dz in -half..=half {
                        let n = [c[0] + dx, c[1] + dy, c[2] + dz];
                        if n.iter().any(|&v| v < 0 || v >= side as i64) {
                            continue;
                        }
                        let k = if layer.kernel == 3 { ((dx + 1) * 9 + (dy + 1) * 3 + (dz + 1)) as usize } else { 0 };
                        let x = &dense[idx(n[0], n[1], n[2])];
                        for o in 0..layer.out_dim {
                            for i in 0..layer.in_dim {
                                y[o] += layer.weights[k][o * layer.in_dim + i] * x[i];
                            }
                        }
                    }
                }
            }
            y
        })
        .collect()
}

#[test]
fn sparse_conv_matches_dense_oracle() {
    for seed in 0..5 {
        let t = random_tensor(seed, 6, 60, 4);
        let mut r = rng(seed + 10);
        let layer = SparseConvLayer::random(&mut r, 3, 4, 5, 1.0).unwrap();
        let out = submanifold_conv(&t, &layer).unwrap();
        assert_eq!(out.coords, t.coords);
        let want = dense_conv_oracle(&t, &layer, 6);
        for (i, w) in want.iter().enumerate() {
            for (a, b) in out.feats.row(i).iter().zip(w) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn zero_gate_conv_gives_half_plus_opacity() {
    let t = random_tensor(1, 6, 40, 3);
    let mut r = rng(2);
    let c3 = SparseConvLayer::random(&mut r, 3, 3, 3, 1.0).unwrap();
    let c1 = SparseConvLayer::zeros(1, 3, 3).unwrap();
    let a = submanifold_conv(&t, &c3).unwrap();
    let out = ogspconv(&t, &c3, &c1).unwrap();
    for i in 0..t.len() {
        let g = sigmoid(t.gate_opacity[i]) + 0.5;
        for (o, v) in out.feats.row(i).iter().zip(a.feats.row(i)) {
            assert_eq!(*o, v * g);
        }
    }
    // opacity logit 0 gives a unit gate
    let mut zero = t.clone();
    zero.gate_opacity.iter_mut().for_each(|o| *o = 0.0);
    assert_eq!(ogspconv(&zero, &c3, &c1).unwrap().feats, a.feats);
}

#[test]
fn saturated_opacities_differ_by_the_conv_output() {
    let t = random_tensor(3, 5, 30, 3);
    let mut r = rng(4);
    let c3 = SparseConvLayer::random(&mut r, 3, 3, 3, 1.0).unwrap();
    let c1 = SparseConvLayer::zeros(1, 3, 3).unwrap();
    let a = submanifold_conv(&t, &c3).unwrap();
    let mut lo = t.clone();
    lo.gate_opacity.iter_mut().for_each(|o| *o = -20.0);
    let mut hi = t.clone();
    hi.gate_opacity.iter_mut().for_each(|o| *o = 20.0);
    let lo = ogspconv(&lo, &c3, &c1).unwrap();
    let hi = ogspconv(&hi, &c3, &c1).unwrap();
    for i in 0..t.len() {
        for k in 0..3 {
            let d = hi.feats.row(i)[k] - lo.feats.row(i)[k];
            assert!((d - a.feats.row(i)[k]).abs() < 1e-8 * (1.0 + a.feats.row(i)[k].abs()));
        }
    }
}

#[test]
fn gate_stays_within_bounds_and_grows_with_opacity() {
    for seed in 0..5 {
        let t = random_tensor(seed, 6, 50, 4);
        let mut r = rng(seed + 20);
        let c3 = SparseConvLayer::random(&mut r, 3, 4, 4, 1.0).unwrap();
        let c1 = SparseConvLayer::random(&mut r, 1, 4, 4, 3.0).unwrap();
        let a = submanifold_conv(&t, &c3).unwrap();
        let out = ogspconv(&t, &c3, &c1).unwrap();
        let mut bumped = t.clone();
        bumped.gate_opacity.iter_mut().for_each(|o| *o += 0.5);
        let up = ogspconv(&bumped, &c3, &c1).unwrap();
        for i in 0..t.len() {
            let so = sigmoid(t.gate_opacity[i]);
            for k in 0..4 {
                let (o, base) = (out.feats.row(i)[k], a.feats.row(i)[k]);
                assert!(o.abs() <= base.abs() * (so + 1.0) + 1e-12);
                if base != 0.0 {
                    let gate = o / base;
                    assert!(gate > so - 1e-12 && gate < so + 1.0 + 1e-12);
                }
                assert!(up.feats.row(i)[k].abs() >= o.abs());
            }
        }
    }
}

#[test]
fn coordinates_survive_every_layer() {
    let t = random_tensor(8, 8, 80, 3);
    let mut r = rng(9);
    let w = OseWeights::random(&mut r, 3, 2, 1.0);
    let a = ogspconv(&t, &w.scales[0].conv3, &w.scales[0].conv1).unwrap();
    let b = ogspconv(&a, &w.scales[1].conv3, &w.scales[1].conv1).unwrap();
    assert_eq!(a.coords, t.coords);
    assert_eq!(b.coords, t.coords);
    assert_eq!(b.owners, t.owners);
}

#[test]
fn identity_single_scale_adds_cell_features() {
    let bx = SceneBox::from_dims([0.0; 3], [10, 10, 10], 0.1).unwrap();
    let anchors = [anchor_at([0.05, 0.05, 0.05], 0.5), anchor_at([0.55, 0.55, 0.55], 0.5)];
    let q = Queries::from_rows(&[vec![1.0, -2.0], vec![0.5, 4.0]]).unwrap();
    let t = voxelize_queries(&anchors, &q, &bx, 0.16).unwrap();
    let mut w = OseWeights::zeros(2, 1);
    w.scales[0].conv3 = SparseConvLayer::identity(3, 2).unwrap();
    let out = multiscale_self_encode(&t, &q, &w, 1).unwrap();
    // opacity 0.5 → logit 0 → gate 1; q' = q + q
    assert_eq!(out.row(0), &[2.0, -4.0]);
    assert_eq!(out.row(1), &[1.0, 8.0]);
}

fn cross_influence(anchors: &[GaussianAnchor], scales: usize) -> f64 {
    let bx = SceneBox::from_dims([0.0; 3], [20, 20, 20], 0.1).unwrap();
    let mut r = rng(11);
    let w = OseWeights::random(&mut r, 3, scales, 1.0);
    let q = Queries::random(&mut r, 2, 3, 1.0);
    let run = |q: &Queries| {
        let t = voxelize_queries(anchors, q, &bx, 0.1).unwrap();
        multiscale_self_encode(&t, q, &w, scales).unwrap()
    };
    let base = run(&q);
    let mut q2 = q.clone();
    q2.row_mut(1)[0] += 1.0;
    let moved = run(&q2);
    base.row(0).iter().zip(moved.row(0)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

#[test]
fn distant_gaussians_do_not_interact_at_one_scale() {
    let a = [anchor_at([0.05, 0.05, 0.05], 0.5), anchor_at([1.55, 1.55, 1.55], 0.5)];
    assert_eq!(cross_influence(&a, 1), 0.0);
}

#[test]
fn coarse_scale_couples_three_cells_apart() {
    // cells 2 and 5 along x pool to adjacent cells 1 and 2
    let a = [anchor_at([0.25, 0.05, 0.05], 0.5), anchor_at([0.55, 0.05, 0.05], 0.5)];
    assert_eq!(cross_influence(&a, 1), 0.0);
    assert!(cross_influence(&a, 2) > 1e-6);
}

#[test]
fn permuting_gaussians_permutes_outputs() {
    let mut r = rng(21);
    let bx = SceneBox::from_dims([0.0; 3], [10, 10, 10], 0.1).unwrap();
    let n = 30;
    let anchors: Vec<_> = (0..n)
        .map(|_| anchor_at([r.random_range(0.0..1.0), r.random_range(0.0..1.0), r.random_range(0.0..1.0)], r.random_range(0.1..0.9)))
        .collect();
    let q = Queries::random(&mut r, n, 3, 1.0);
    let w = OseWeights::random(&mut r, 3, 2, 1.0);
    let run = |a: &[GaussianAnchor], q: &Queries| {
        let t = voxelize_queries(a, q, &bx, 0.16).unwrap();
        multiscale_self_encode(&t, q, &w, 2).unwrap()
    };
    let base = run(&anchors, &q);
    let perm: Vec<usize> = (0..n).rev().collect();
    let pa: Vec<_> = perm.iter().map(|&i| anchors[i].clone()).collect();
    let pq = Queries::from_rows(&perm.iter().map(|&i| q.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let out = run(&pa, &pq);
    for (k, &i) in perm.iter().enumerate() {
        for (a, b) in out.row(k).iter().zip(base.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn full_room_cell_count_is_bounded() {
    let mut r = rng(31);
    let bx = SceneBox::from_dims([0.0; 3], [60, 60, 36], 0.08).unwrap();
    let n = 16_200;
    let anchors: Vec<_> = (0..n)
        .map(|_| anchor_at([r.random_range(0.0..4.8), r.random_range(0.0..4.8), r.random_range(0.0..2.88)], 0.5))
        .collect();
    let t = voxelize_queries(&anchors, &Queries::zeros(n, 1), &bx, 0.16).unwrap();
    assert!(t.len() <= 30 * 30 * 18);
    assert_eq!(t.owners.iter().map(Vec::len).sum::<usize>(), n);
    // counting oracle: distinct floor((m − origin)/0.16)
    let mut cells: Vec<[i64; 3]> = anchors
        .iter()
        .map(|a| [0, 1, 2].map(|k| (a.mean[k] / 0.16).floor() as i64))
        .collect();
    cells.sort();
    cells.dedup();
    assert_eq!(cells.len(), t.len());
}
