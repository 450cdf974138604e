mod common;

use common::oracles::rng;
use gaussocc::gaussian::SceneBox;
use gaussocc::grid::OccupancyGrid;
use gaussocc::objectives::fit::{fit_gaussians, loss_ema, FitConfig};
use gaussocc::objectives::loss::{cross_entropy, focal_loss, lovasz_softmax, scene_class_affinity, AffinityMode};
use gaussocc::objectives::metrics::iou_miou;
use gaussocc::worldgen::{generate_scene, SceneSpec};
use rand::Rng;

fn random_simplex(seed: u64, n: usize, nc: usize) -> Vec<f64> {
    let mut r = rng(seed);
    let mut p = Vec::with_capacity(n * nc);
    for _ in 0..n {
        let row: Vec<f64> = (0..nc).map(|_| r.random_range(0.01..1.0f64)).collect();
        let s: f64 = row.iter().sum();
        p.extend(row.iter().map(|v| v / s));
    }
    p
}

fn random_labels(seed: u64, n: usize, nc: usize) -> Vec<u8> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(0..nc) as u8).collect()
}

/// Jaccard loss of a misprediction set against the class's true set.
fn jaccard_loss(err_set: &[bool], truth: &[bool]) -> f64 {
    let m = err_set.iter().filter(|&&b| b).count() as f64;
    let union = err_set.iter().zip(truth).filter(|(e, t)| **e || **t).count() as f64;
    if union == 0.0 {
        0.0
    } else {
        m / union
    }
}

/// Lovász extension as the level-set integral ∫₀¹ Δ({i : eᵢ > t}) dt.
fn lovasz_level_set(probs: &[f64], labels: &[u8], nc: usize) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    let mut present = 0;
    for c in 0..nc {
        let truth: Vec<bool> = labels.iter().map(|&l| l as usize == c).collect();
        if !truth.iter().any(|&t| t) {
            continue;
        }
        present += 1;
        let e: Vec<f64> = (0..n).map(|v| ((truth[v] as u8 as f64) - probs[v * nc + c]).abs()).collect();
        let mut levels: Vec<f64> = e.clone();
        levels.push(0.0);
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        levels.dedup();
        let mut integral = 0.0;
        for w in levels.windows(2) {
            let set: Vec<bool> = e.iter().map(|&x| x > w[0]).collect();
            integral += (w[1] - w[0]) * jaccard_loss(&set, &truth);
        }
        total += integral;
    }
    total / present as f64
}

#[test]
fn lovasz_matches_level_set_integral() {
    for seed in 0..20 {
        let p = random_simplex(seed, 5, 4);
        let l = random_labels(seed + 100, 5, 4);
        let got = lovasz_softmax(&p, &l, 4).unwrap().value;
        let want = lovasz_level_set(&p, &l, 4);
        assert!((got - want).abs() < 1e-12, "seed {seed}: {got} vs {want}");
        assert!((0.0..=1.0).contains(&got));
    }
}

#[test]
fn lovasz_bounds_and_perfection() {
    let l = random_labels(3, 40, 5);
    let mut one_hot = vec![0.0; 40 * 5];
    for (v, &c) in l.iter().enumerate() {
        one_hot[v * 5 + c as usize] = 1.0;
    }
    assert_eq!(lovasz_softmax(&one_hot, &l, 5).unwrap().value, 0.0);
    let wrong = vec![0.0, 1.0];
    assert_eq!(lovasz_softmax(&wrong, &[0], 2).unwrap().value, 1.0);
}

/// −log of soft precision, recall, specificity from plain sums.
fn affinity_terms(p: &[f64], t: &[bool]) -> Option<f64> {
    let mut tp = 0.0;
    let mut psum = 0.0;
    let mut pos = 0.0;
    let mut tn = 0.0;
    let mut neg = 0.0;
    for (pv, tv) in p.iter().zip(t) {
        psum += pv;
        if *tv {
            tp += pv;
            pos += 1.0;
        } else {
            tn += 1.0 - pv;
            neg += 1.0;
        }
    }
    let nlog = |x: f64| -x.max(1e-12).ln();
    let mut terms = Vec::new();
    if pos > 0.0 && psum > 0.0 {
        terms.push(nlog(tp / psum));
    }
    if pos > 0.0 {
        terms.push(nlog(tp / pos));
    }
    if neg > 0.0 {
        terms.push(nlog(tn / neg));
    }
    (!terms.is_empty()).then(|| terms.iter().sum::<f64>() / terms.len() as f64)
}

#[test]
fn affinity_matches_mass_accounting() {
    let nc = 5;
    for seed in 0..10 {
        let n = 64; // 4³ grid
        let p = random_simplex(seed, n, nc);
        let l = random_labels(seed + 50, n, nc);
        let occ: Vec<f64> = (0..n).map(|v| 1.0 - p[v * nc]).collect();
        let t: Vec<bool> = l.iter().map(|&x| x != 0).collect();
        let geo = scene_class_affinity(&p, &l, nc, AffinityMode::Geometry).unwrap().value;
        assert!((geo - affinity_terms(&occ, &t).unwrap()).abs() < 1e-9);
        let mut sem = Vec::new();
        for c in 1..nc {
            let tc: Vec<bool> = l.iter().map(|&x| x as usize == c).collect();
            if tc.iter().any(|&b| b) {
                let pc: Vec<f64> = (0..n).map(|v| p[v * nc + c]).collect();
                sem.push(affinity_terms(&pc, &tc).unwrap());
            }
        }
        let want = sem.iter().sum::<f64>() / sem.len() as f64;
        let got = scene_class_affinity(&p, &l, nc, AffinityMode::Semantic).unwrap().value;
        assert!((got - want).abs() < 1e-9);
    }
}

#[test]
fn uniform_on_free_grid_is_specificity_only() {
    // occupied probability 1 − 1/C everywhere, no positives: −log(1/C)
    let nc = 4;
    let p = vec![0.25; 10 * nc];
    let l = vec![0u8; 10];
    let v = scene_class_affinity(&p, &l, nc, AffinityMode::Geometry).unwrap().value;
    assert!((v - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn focal_with_zero_gamma_is_cross_entropy() {
    for seed in 0..10 {
        let p = random_simplex(seed, 200, 12);
        let l = random_labels(seed, 200, 12);
        let f = focal_loss(&p, &l, 12, 0.0, 1.0).unwrap().value;
        assert!((f - cross_entropy(&p, &l, 12).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn two_by_two_by_two_hand_counts() {
    let bx = SceneBox::from_dims([0.0; 3], [2, 2, 2], 0.5).unwrap();
    let gt = OccupancyGrid {
        scene_box: bx,
        labels: vec![3, 3, 0, 0, 5, 0, 0, 0],
        confidence: None,
    };
    let pred = OccupancyGrid {
        scene_box: bx,
        labels: vec![0, 3, 3, 0, 5, 5, 0, 0],
        confidence: None,
    };
    let m = iou_miou(&pred, &gt, None, 12).unwrap();
    // occupied: gt {0,1,4}, pred {1,2,4,5} → I = 2, U = 5
    assert_eq!(m.iou, 2.0 / 5.0);
    // class 3: I = 1, U = 3; class 5: I = 1, U = 2
    assert_eq!(m.per_class[2], 1.0 / 3.0);
    assert_eq!(m.per_class[4], 1.0 / 2.0);
    assert_eq!(m.miou, (1.0 / 3.0 + 1.0 / 2.0) / 2.0);
}

#[test]
fn all_free_target_empties_the_prediction() {
    let bx = SceneBox::from_dims([0.0; 3], [8, 8, 8], 0.1).unwrap();
    let gt = OccupancyGrid::empty(bx);
    let cfg = FitConfig {
        num_gaussians: 8,
        scale_cap: 0.2,
        steps: 150,
        init: gaussocc::objectives::FitInit::Uniform,
        ..FitConfig::default()
    };
    let r = fit_gaussians(&gt, 12, &cfg).unwrap();
    assert_eq!(r.prediction.occupied_count(), 0);
    let first = r.anchors.iter().map(|a| a.opacity).sum::<f64>();
    assert!(first < 8.0 * 0.5, "opacities should fall from their initial 0.5");
}

#[test]
fn single_voxel_target_is_recovered() {
    let bx = SceneBox::from_dims([0.0; 3], [8, 8, 8], 0.1).unwrap();
    let mut gt = OccupancyGrid::empty(bx);
    gt.set(3, 4, 5, 6);
    let cfg = FitConfig {
        num_gaussians: 1,
        scale_cap: 0.1,
        steps: 300,
        ..FitConfig::default()
    };
    let r = fit_gaussians(&gt, 12, &cfg).unwrap();
    assert_eq!(r.prediction.label_at(3, 4, 5), 6);
    let c = gt.scene_box.voxel_center(3, 4, 5);
    assert!((r.anchors[0].mean - c).norm() < 0.1);
}

#[test]
fn loss_trend_descends() {
    let spec = SceneSpec::new(5, [16, 16, 12], 0.08).unwrap();
    let gt = generate_scene(&spec).unwrap();
    let cfg = FitConfig {
        num_gaussians: 160,
        scale_cap: 0.16,
        steps: 600,
        ..FitConfig::default()
    };
    let r = fit_gaussians(&gt, 12, &cfg).unwrap();
    let ema = loss_ema(&r.curve, 0.9);
    let windows: Vec<bool> = (0..ema.len().saturating_sub(100)).step_by(10).map(|s| ema[s + 100] < ema[s]).collect();
    let bad = windows.iter().filter(|ok| !**ok).count();
    assert!(bad as f64 <= 0.05 * windows.len() as f64, "{bad} of {} windows rose", windows.len());
}
