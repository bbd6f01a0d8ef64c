//! Confusion counting, IoU / mIoU and range-restricted evaluation.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::voxel::{SceneSpec, INVALID};

/// Per-class voxel counts over valid ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub tn: Vec<u64>,
    /// Binary occupied-vs-empty counts: `[tp, fp, fn, tn]`.
    pub occ: [u64; 4],
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
            tn: vec![0; classes],
            occ: [0; 4],
        }
    }

    pub fn classes(&self) -> usize {
        self.tp.len()
    }

    /// Adds one voxel; ground truth [`INVALID`] is ignored.
    pub fn add(&mut self, pred: u8, gt: u8) {
        if gt == INVALID {
            return;
        }
        for c in 0..self.classes() {
            let (p, g) = (pred as usize == c, gt as usize == c);
            match (p, g) {
                (true, true) => self.tp[c] += 1,
                (true, false) => self.fp[c] += 1,
                (false, true) => self.fn_[c] += 1,
                (false, false) => self.tn[c] += 1,
            }
        }
        let k = match (pred != 0, gt != 0) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        self.occ[k] += 1;
    }

    pub fn merge(&mut self, other: &Confusion) {
        for c in 0..self.classes() {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
            self.tn[c] += other.tn[c];
        }
        for k in 0..4 {
            self.occ[k] += other.occ[k];
        }
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class appears in neither
    /// prediction nor ground truth.
    pub fn class_iou(&self, c: usize) -> Option<f64> {
        let d = self.tp[c] + self.fp[c] + self.fn_[c];
        (d > 0).then(|| self.tp[c] as f64 / d as f64)
    }

    pub fn metrics(&self) -> Metrics {
        let per_class: Vec<Option<f64>> = (0..self.classes()).map(|c| self.class_iou(c)).collect();
        let present: Vec<f64> = per_class.iter().skip(1).flatten().copied().collect();
        let miou = if present.is_empty() {
            1.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let [tp, fp, fn_, _] = self.occ;
        let d = tp + fp + fn_;
        let iou = if d == 0 { 1.0 } else { tp as f64 / d as f64 };
        Metrics {
            iou,
            miou,
            per_class,
        }
    }
}

/// Scene completion IoU, semantic mIoU (classes `1..C`) and per-class IoU.
/// When nothing is occupied in prediction or ground truth the IoU is 1; an
/// mIoU with no participating classes is likewise 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub iou: f64,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

pub fn confusion(pred: &[u8], gt: &[u8], classes: usize) -> Result<Confusion> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "confusion",
            format!("{} predictions for {} labels", pred.len(), gt.len()),
        ));
    }
    let mut c = Confusion::new(classes);
    for (&p, &g) in pred.iter().zip(gt) {
        c.add(p, g);
    }
    Ok(c)
}

pub fn iou_miou(pred: &[u8], gt: &[u8], classes: usize) -> Result<Metrics> {
    Ok(confusion(pred, gt, classes)?.metrics())
}

/// Number of leading x-slabs whose centroids lie within `range` metres of
/// the grid's near face.
pub fn range_slabs(spec: &SceneSpec, range: f64) -> usize {
    let mut n = 0;
    while n < spec.dims[0] && (n as f64 + 0.5) * spec.voxel_size < range {
        n += 1;
    }
    n
}

/// Confusion restricted to the first `range_slabs(spec, r)` x-slabs.
pub fn range_confusion(pred: &[u8], gt: &[u8], spec: &SceneSpec, classes: usize, range: f64) -> Result<Confusion> {
    let n = spec.n_voxels();
    if pred.len() != n || gt.len() != n {
        return Err(Error::shape(
            "range_metrics",
            format!("{} / {} values for grid {:?}", pred.len(), gt.len(), spec.dims),
        ));
    }
    let keep = range_slabs(spec, range) * spec.dims[1] * spec.dims[2];
    confusion(&pred[..keep], &gt[..keep], classes)
}

pub fn range_metrics(pred: &[u8], gt: &[u8], spec: &SceneSpec, classes: usize, ranges: &[f64]) -> Result<Vec<(f64, Metrics)>> {
    ranges
        .iter()
        .map(|&r| Ok((r, range_confusion(pred, gt, spec, classes, r)?.metrics())))
        .collect()
}

/// Default evaluation ranges in metres.
pub const RANGES: [f64; 3] = [12.8, 25.6, 51.2];

/// Line-oriented report: one `name iou` line per class, then `IoU` and `mIoU`.
pub fn format_report(m: &Metrics, class_names: &[String]) -> String {
    let mut s = String::new();
    for (c, iou) in m.per_class.iter().enumerate().skip(1) {
        let name = class_names.get(c).map(String::as_str).unwrap_or("?");
        match iou {
            Some(v) => writeln!(s, "{name} {v:.6}").unwrap(),
            None => writeln!(s, "{name} n/a").unwrap(),
        }
    }
    writeln!(s, "IoU {:.6}", m.iou).unwrap();
    writeln!(s, "mIoU {:.6}", m.miou).unwrap();
    s
}

/// `key=value` records, one per line, tagged with the evaluation range.
pub fn format_records(range: f64, m: &Metrics, class_names: &[String]) -> String {
    let mut s = String::new();
    for (c, iou) in m.per_class.iter().enumerate().skip(1) {
        let name = class_names.get(c).map(String::as_str).unwrap_or("?");
        let v = iou.map_or("nan".to_string(), |v| format!("{v:.6}"));
        writeln!(s, "range={range} class={name} iou={v}").unwrap();
    }
    writeln!(s, "range={range} metric=IoU value={:.6}", m.iou).unwrap();
    writeln!(s, "range={range} metric=mIoU value={:.6}", m.miou).unwrap();
    s
}
