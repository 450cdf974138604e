//! Per-voxel classification losses over class-probability volumes.
//!
//! Probabilities are stored voxel-major (`probs[v * C + k]`). Every loss
//! returns its value together with the gradient with respect to `probs`, so
//! the fit loop can chain them into the splatting backward pass.

use crate::error::{validation, Result};
use crate::exec::pairwise_sum;

const LOG_CLAMP: f64 = 1e-12;

/// Which mass the scene-class affinity loss scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffinityMode {
    /// Occupied vs. free.
    Geometry,
    /// One-vs-rest per nonfree class present in the target.
    Semantic,
}

#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_inputs(probs: &[f64], labels: &[u8], nc: usize) -> Result<()> {
    if nc == 0 || probs.len() != labels.len() * nc {
        return Err(validation(format!(
            "{} probabilities for {} voxels of {nc} classes",
            probs.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l as usize >= nc) {
        return Err(validation(format!("label {l} out of range for {nc} classes")));
    }
    Ok(())
}

/// Mean over voxels of `−α (1−p_t)^γ log p_t`.
pub fn focal_loss(probs: &[f64], labels: &[u8], nc: usize, gamma: f64, alpha: f64) -> Result<LossValue> {
    check_inputs(probs, labels, nc)?;
    if !(gamma >= 0.0) {
        return Err(validation(format!("focal gamma must be >= 0, got {gamma}")));
    }
    let n = labels.len().max(1) as f64;
    let mut grad = vec![0.0; probs.len()];
    let mut terms = Vec::with_capacity(labels.len());
    for (v, &l) in labels.iter().enumerate() {
        let idx = v * nc + l as usize;
        let raw = probs[idx];
        let pt = raw.max(LOG_CLAMP);
        let one_minus = (1.0 - pt).max(0.0);
        let log_pt = pt.ln();
        let modulator = if gamma == 0.0 { 1.0 } else { one_minus.powf(gamma) };
        terms.push(-alpha * modulator * log_pt);
        if raw > LOG_CLAMP {
            let dmod = if gamma == 0.0 || one_minus == 0.0 {
                0.0
            } else {
                -gamma * one_minus.powf(gamma - 1.0)
            };
            grad[idx] = -alpha * (dmod * log_pt + modulator / pt) / n;
        }
    }
    Ok(LossValue {
        value: pairwise_sum(&terms) / n,
        grad,
    })
}

/// Gradient of the Lovász extension of the Jaccard loss for a ground-truth
/// indicator already sorted by descending error.
fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let gts: f64 = gt_sorted.iter().filter(|&&g| g).count() as f64;
    let mut jaccard = Vec::with_capacity(gt_sorted.len());
    let mut cum_fg = 0.0;
    let mut cum_bg = 0.0;
    for &g in gt_sorted {
        if g {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let inter = gts - cum_fg;
        let union = gts + cum_bg;
        jaccard.push(1.0 - inter / union);
    }
    for i in (1..jaccard.len()).rev() {
        jaccard[i] -= jaccard[i - 1];
    }
    jaccard
}

/// Lovász-softmax averaged over classes present in the target.
pub fn lovasz_softmax(probs: &[f64], labels: &[u8], nc: usize) -> Result<LossValue> {
    check_inputs(probs, labels, nc)?;
    let n = labels.len();
    let mut grad = vec![0.0; probs.len()];
    let mut present = 0usize;
    let mut total = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut errors = vec![0.0; n];
    for c in 0..nc {
        if !labels.iter().any(|&l| l as usize == c) {
            continue;
        }
        present += 1;
        for v in 0..n {
            let fg = labels[v] as usize == c;
            let p = probs[v * nc + c];
            errors[v] = if fg { 1.0 - p } else { p }.abs();
        }
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
        let gt_sorted: Vec<bool> = order.iter().map(|&v| labels[v] as usize == c).collect();
        let g = lovasz_grad(&gt_sorted);
        let mut loss_c = 0.0;
        for (rank, &v) in order.iter().enumerate() {
            loss_c += errors[v] * g[rank];
            let fg = labels[v] as usize == c;
            // d|fg - p|/dp for p within [0,1]
            let de = if fg { -1.0 } else { 1.0 };
            grad[v * nc + c] += de * g[rank];
        }
        total += loss_c;
    }
    if present == 0 {
        return Ok(LossValue { value: 0.0, grad });
    }
    let inv = 1.0 / present as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(LossValue {
        value: total * inv,
        grad,
    })
}

/// Accumulates `−log(x)` for a ratio `num/den` into `value`, and its
/// gradient with respect to the numerator and denominator sums.
struct RatioTerm {
    num: f64,
    den: f64,
}

impl RatioTerm {
    fn value(&self) -> f64 {
        -(self.num / self.den).max(LOG_CLAMP).ln()
    }

    /// (d/dnum, d/dden) of −log(num/den).
    fn partials(&self) -> (f64, f64) {
        if self.num / self.den <= LOG_CLAMP {
            return (0.0, 0.0);
        }
        (-1.0 / self.num, 1.0 / self.den)
    }
}

/// Soft precision, recall and specificity of a probability volume `p`
/// against a binary target `t`; terms with an empty denominator or nothing
/// positive to score are skipped. Returns the mean of `−log` over the terms
/// kept, plus `d/dp`.
fn precision_recall_specificity(p: &[f64], t: &[bool]) -> Option<(f64, Vec<f64>)> {
    let pos: f64 = t.iter().filter(|&&x| x).count() as f64;
    let neg = t.len() as f64 - pos;
    let psum = pairwise_sum(p);
    let inter = pairwise_sum(&p.iter().zip(t).map(|(&pv, &tv)| if tv { pv } else { 0.0 }).collect::<Vec<_>>());
    let spec_num = pairwise_sum(&p.iter().zip(t).map(|(&pv, &tv)| if tv { 0.0 } else { 1.0 - pv }).collect::<Vec<_>>());
    let mut value = 0.0;
    let mut terms = 0usize;
    let mut grad = vec![0.0; p.len()];
    if pos > 0.0 && psum > 0.0 {
        let r = RatioTerm { num: inter, den: psum };
        value += r.value();
        let (dn, dd) = r.partials();
        for (g, &tv) in grad.iter_mut().zip(t) {
            *g += dd + if tv { dn } else { 0.0 };
        }
        terms += 1;
    }
    if pos > 0.0 {
        let r = RatioTerm { num: inter, den: pos };
        value += r.value();
        let (dn, _) = r.partials();
        for (g, &tv) in grad.iter_mut().zip(t) {
            if tv {
                *g += dn;
            }
        }
        terms += 1;
    }
    if neg > 0.0 {
        let r = RatioTerm { num: spec_num, den: neg };
        value += r.value();
        let (dn, _) = r.partials();
        for (g, &tv) in grad.iter_mut().zip(t) {
            if !tv {
                *g -= dn;
            }
        }
        terms += 1;
    }
    if terms == 0 {
        return None;
    }
    let inv = 1.0 / terms as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Some((value * inv, grad))
}

/// Scene-class affinity: soft precision/recall/specificity, scored as the
/// mean of their negative logs.
pub fn scene_class_affinity(probs: &[f64], labels: &[u8], nc: usize, mode: AffinityMode) -> Result<LossValue> {
    check_inputs(probs, labels, nc)?;
    let n = labels.len();
    let mut grad = vec![0.0; probs.len()];
    match mode {
        AffinityMode::Geometry => {
            let occupied: Vec<f64> = (0..n).map(|v| 1.0 - probs[v * nc]).collect();
            let target: Vec<bool> = labels.iter().map(|&l| l != 0).collect();
            let Some((value, g)) = precision_recall_specificity(&occupied, &target) else {
                return Ok(LossValue { value: 0.0, grad });
            };
            for v in 0..n {
                grad[v * nc] = -g[v];
            }
            Ok(LossValue { value, grad })
        }
        AffinityMode::Semantic => {
            let mut total = 0.0;
            let mut count = 0usize;
            for c in 1..nc {
                let target: Vec<bool> = labels.iter().map(|&l| l as usize == c).collect();
                if !target.iter().any(|&t| t) {
                    continue;
                }
                let p: Vec<f64> = (0..n).map(|v| probs[v * nc + c]).collect();
                if let Some((value, g)) = precision_recall_specificity(&p, &target) {
                    total += value;
                    count += 1;
                    for v in 0..n {
                        grad[v * nc + c] += g[v];
                    }
                }
            }
            if count == 0 {
                return Ok(LossValue { value: 0.0, grad });
            }
            let inv = 1.0 / count as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            Ok(LossValue {
                value: total * inv,
                grad,
            })
        }
    }
}

/// Mean cross-entropy; the focal loss with γ = 0, α = 1 must agree with it.
pub fn cross_entropy(probs: &[f64], labels: &[u8], nc: usize) -> Result<f64> {
    check_inputs(probs, labels, nc)?;
    let terms: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(v, &l)| -probs[v * nc + l as usize].max(LOG_CLAMP).ln())
        .collect();
    Ok(pairwise_sum(&terms) / labels.len().max(1) as f64)
}
