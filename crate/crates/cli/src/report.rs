use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use gaussocc::objectives::fit::LossRecord;
use gaussocc::Metrics;

/// `metric,value` rows; undefined scores print as NaN with `defined,false`.
pub fn metrics_csv(m: &Metrics) -> String {
    let mut s = String::from("metric,value\n");
    writeln!(s, "iou,{}", m.iou).unwrap();
    writeln!(s, "miou,{}", m.miou).unwrap();
    for (k, v) in m.per_class.iter().enumerate() {
        writeln!(s, "class_{},{}", k + 1, v).unwrap();
    }
    writeln!(s, "evaluated,{}", m.evaluated).unwrap();
    writeln!(s, "defined,{}", m.defined).unwrap();
    s
}

pub fn losses_csv(curve: &[LossRecord]) -> String {
    let mut s = String::from("step,total,focal,lovasz,geo,sem\n");
    for r in curve {
        writeln!(s, "{},{},{},{},{},{}", r.step, r.total, r.focal, r.lovasz, r.geo, r.sem).unwrap();
    }
    s
}

/// One row of an exploration run.
pub struct FrameRow {
    pub frame: usize,
    pub region: usize,
    pub explored: usize,
    pub local: Metrics,
    pub global: Metrics,
}

pub fn explore_csv(rows: &[FrameRow]) -> String {
    let mut s = String::from("frame,region_voxels,explored_voxels,local_iou,local_miou,global_iou,global_miou,defined\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.frame, r.region, r.explored, r.local.iou, r.local.miou, r.global.iou, r.global.miou, r.global.defined
        )
        .unwrap();
    }
    s
}

pub fn write(path: impl AsRef<Path>, text: &str) -> gaussocc::Result<()> {
    fs::write(path, text)?;
    Ok(())
}

pub fn summary(m: &Metrics) -> String {
    let flag = if m.defined { "" } else { " (undefined)" };
    format!("IoU {:.4}  mIoU {:.4}  over {} voxels{flag}", m.iou, m.miou, m.evaluated)
}
