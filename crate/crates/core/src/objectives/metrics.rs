//! Occupancy IoU and per-class semantic IoU.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::OccupancyGrid;

pub const CLASS_NAMES: [&str; 12] = [
    "free", "ceiling", "floor", "wall", "window", "chair", "bed", "sofa", "table", "tvs",
    "furniture", "objects",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Occupied-vs-free IoU; NaN when undefined.
    pub iou: f64,
    /// IoU per semantic class `1..C`; NaN for classes absent from both grids.
    pub per_class: Vec<f64>,
    /// Mean over classes present in either grid; NaN when none are.
    pub miou: f64,
    /// Number of voxels evaluated.
    pub evaluated: usize,
    /// False when the mask selected no voxels or nothing was occupied.
    pub defined: bool,
}

/// IoU, per-class IoU and mIoU of `pred` against `gt`, optionally within
/// `mask`.
pub fn iou_miou(pred: &OccupancyGrid, gt: &OccupancyGrid, mask: Option<&[bool]>, nc: usize) -> Result<Metrics> {
    if pred.dims() != gt.dims() || pred.labels.len() != gt.labels.len() {
        return Err(Error::DimMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    if let Some(m) = mask {
        if m.len() != gt.labels.len() {
            return Err(Error::DimMismatch("mask length differs from grids".into()));
        }
    }
    let mut inter = vec![0usize; nc];
    let mut union = vec![0usize; nc];
    let mut occ_inter = 0usize;
    let mut occ_union = 0usize;
    let mut evaluated = 0usize;
    for i in 0..gt.labels.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        evaluated += 1;
        let p = pred.labels[i] as usize;
        let g = gt.labels[i] as usize;
        if p != 0 || g != 0 {
            occ_union += 1;
            if p != 0 && g != 0 {
                occ_inter += 1;
            }
        }
        if p < nc && p != 0 {
            union[p] += 1;
        }
        if g < nc && g != 0 && g != p {
            union[g] += 1;
        }
        if p == g && p != 0 && p < nc {
            inter[p] += 1;
        }
    }
    let per_class: Vec<f64> = (1..nc)
        .map(|c| {
            if union[c] == 0 {
                f64::NAN
            } else {
                inter[c] as f64 / union[c] as f64
            }
        })
        .collect();
    let present: Vec<f64> = per_class.iter().copied().filter(|v| !v.is_nan()).collect();
    let miou = if present.is_empty() {
        f64::NAN
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    let iou = if occ_union == 0 {
        f64::NAN
    } else {
        occ_inter as f64 / occ_union as f64
    };
    Ok(Metrics {
        iou,
        per_class,
        miou,
        evaluated,
        defined: evaluated > 0 && occ_union > 0,
    })
}

impl Metrics {
    /// `metric,class,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,class,value\n");
        let _ = writeln!(s, "iou,,{}", fmt_value(self.iou));
        for (i, v) in self.per_class.iter().enumerate() {
            let name = CLASS_NAMES.get(i + 1).copied().unwrap_or("class");
            let _ = writeln!(s, "class_iou,{name},{}", fmt_value(*v));
        }
        let _ = writeln!(s, "miou,,{}", fmt_value(self.miou));
        let _ = writeln!(s, "evaluated_voxels,,{}", self.evaluated);
        let _ = writeln!(s, "defined,,{}", u8::from(self.defined));
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.6}")
    }
}
