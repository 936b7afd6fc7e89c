//! Scoring detections against annotated boxes: greedy IoU matching,
//! precision/recall sweeps, all-points average precision and max-F1
//! threshold selection.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{corner_iou, BoundingBox};

/// Overlap a detection needs to count as a hit (strictly greater).
pub const DEFAULT_IOU_MIN: f64 = 0.5;
/// Threshold assigned to a class no threshold can make useful.
pub const DISABLED_THRESHOLD: f64 = 1.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("class {0} has no ground truth boxes")]
    NoGroundTruth(usize),
}

/// Center-based axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.x - self.w / 2.0,
            self.y - self.h / 2.0,
            self.x + self.w / 2.0,
            self.y + self.h / 2.0,
        )
    }
}

impl From<&BoundingBox> for Rect {
    fn from(b: &BoundingBox) -> Self {
        Rect {
            x: b.x,
            y: b.y,
            w: b.w,
            h: b.h,
        }
    }
}

pub fn iou(a: &Rect, b: &Rect) -> f64 {
    corner_iou(a.corners(), b.corners())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image: String,
    pub rect: Rect,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetection {
    pub image: String,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// True positive flag per detection, in input order.
    pub true_positive: Vec<bool>,
    /// Index of the claimed ground-truth box per detection.
    pub claimed: Vec<Option<usize>>,
    /// Ground-truth count per class index.
    pub gt_counts: Vec<usize>,
}

/// Score descending, then image id, then x, y, w, h.
fn detection_order(a: &ImageDetection, b: &ImageDetection) -> Ordering {
    b.bbox
        .score
        .total_cmp(&a.bbox.score)
        .then_with(|| a.image.cmp(&b.image))
        .then(a.bbox.x.total_cmp(&b.bbox.x))
        .then(a.bbox.y.total_cmp(&b.bbox.y))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
}

/// Greedy matching: detections in descending score each claim the unclaimed
/// ground-truth box of the same image and class with the highest IoU, if
/// that IoU exceeds `iou_min`.
pub fn match_detections(dets: &[ImageDetection], gts: &[GroundTruthBox], iou_min: f64) -> Matching {
    let n_classes = dets
        .iter()
        .map(|d| d.bbox.class + 1)
        .chain(gts.iter().map(|g| g.class + 1))
        .max()
        .unwrap_or(0);
    let mut gt_counts = vec![0; n_classes];
    for g in gts {
        gt_counts[g.class] += 1;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| detection_order(&dets[a], &dets[b]).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut claimed = vec![None; dets.len()];
    for i in order {
        let d = &dets[i];
        let r = Rect::from(&d.bbox);
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.class != d.bbox.class || g.image != d.image {
                continue;
            }
            let o = iou(&r, &g.rect);
            if o > iou_min && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            claimed[i] = Some(j);
        }
    }
    Matching {
        true_positive: claimed.iter().map(Option::is_some).collect(),
        claimed,
        gt_counts,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    /// Detections scoring at least this much are accepted.
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class: usize,
    pub n_gt: usize,
    /// One point per distinct score, highest threshold first.
    pub points: Vec<PrPoint>,
}

/// Precision/recall at every distinct score and the all-points average
/// precision: the area under the curve after replacing each precision by the
/// best precision at any equal or higher recall.
pub fn pr_and_ap(class: usize, labeled: &[(f64, bool)], n_gt: usize) -> Result<(PrCurve, f64), EvalError> {
    if n_gt == 0 {
        return Err(EvalError::NoGroundTruth(class));
    }
    let mut sorted = labeled.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            threshold,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / n_gt as f64,
            tp,
            fp,
        });
    }
    let envelope = precision_envelope(&points);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, e) in points.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * e;
        prev_recall = p.recall;
    }
    Ok((PrCurve { class, n_gt, points }, ap))
}

/// Running maximum of precision from the lowest threshold upwards.
pub fn precision_envelope(points: &[PrPoint]) -> Vec<f64> {
    let mut env = vec![0.0; points.len()];
    let mut best: f64 = 0.0;
    for (i, p) in points.iter().enumerate().rev() {
        best = best.max(p.precision);
        env[i] = best;
    }
    env
}

/// Unweighted mean over the classes that have an AP.
pub fn mean_ap(aps: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = aps.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    /// Lowest accepted score at the best F1.
    pub threshold: f64,
    /// Midpoint between `threshold` and the next lower score. Every cut in
    /// that gap gives the same F1 on the tuning data; the middle one leaves
    /// room on both sides for unseen scores.
    pub cut: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// No threshold gives a positive F1.
    pub disabled: bool,
}

/// `F1 = 2TP / (TP + FP + n_gt)` as an exact fraction.
fn f1_fraction(p: &PrPoint, n_gt: usize) -> (u64, u64) {
    (2 * p.tp as u64, (p.tp + p.fp + n_gt) as u64)
}

/// Threshold with the highest F1; equal F1 prefers the higher threshold.
pub fn select_threshold(curve: &PrCurve) -> ThresholdChoice {
    let mut best: Option<(usize, (u64, u64))> = None;
    for (i, p) in curve.points.iter().enumerate() {
        let f = f1_fraction(p, curve.n_gt);
        // Points run from high to low threshold, so only a strict gain moves on.
        if best.is_none_or(|(_, b)| f.0 * b.1 > b.0 * f.1) {
            best = Some((i, f));
        }
    }
    match best {
        Some((i, (num, den))) if num > 0 => ThresholdChoice {
            threshold: curve.points[i].threshold,
            cut: curve.points.get(i + 1).map_or(curve.points[i].threshold, |next| {
                (curve.points[i].threshold + next.threshold) / 2.0
            }),
            f1: num as f64 / den as f64,
            precision: curve.points[i].precision,
            recall: curve.points[i].recall,
            disabled: false,
        },
        _ => ThresholdChoice {
            threshold: DISABLED_THRESHOLD,
            cut: DISABLED_THRESHOLD,
            f1: 0.0,
            precision: 0.0,
            recall: 0.0,
            disabled: true,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub name: String,
    pub n_gt: usize,
    pub n_detections: usize,
    /// Absent when the class has no ground truth.
    pub ap: Option<f64>,
    pub threshold: Option<ThresholdChoice>,
    pub curve: Option<PrCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub matching: String,
    pub iou_min: f64,
    pub classes: Vec<ClassReport>,
    pub mean_ap: Option<f64>,
    /// Classes left out of the mean for lack of ground truth.
    pub excluded: Vec<String>,
}

impl EvalReport {
    /// Chosen cut per class index; unreported classes are disabled.
    pub fn thresholds(&self, n_classes: usize) -> Vec<f64> {
        let mut t = vec![DISABLED_THRESHOLD; n_classes];
        for c in &self.classes {
            if let (Some(choice), Some(slot)) = (c.threshold, t.get_mut(c.class)) {
                *slot = choice.cut;
            }
        }
        t
    }
}

/// Matches, sweeps and selects thresholds for every named class; classes
/// listed in `skip` (typically background) are not reported.
pub fn evaluate(
    dets: &[ImageDetection],
    gts: &[GroundTruthBox],
    class_names: &[String],
    skip: &[usize],
    iou_min: f64,
) -> EvalReport {
    let m = match_detections(dets, gts, iou_min);
    let mut classes = Vec::new();
    let mut excluded = Vec::new();
    for (c, name) in class_names.iter().enumerate() {
        if skip.contains(&c) {
            continue;
        }
        let labeled: Vec<(f64, bool)> = dets
            .iter()
            .zip(&m.true_positive)
            .filter(|(d, _)| d.bbox.class == c)
            .map(|(d, &tp)| (d.bbox.score, tp))
            .collect();
        let n_gt = m.gt_counts.get(c).copied().unwrap_or(0);
        let (ap, threshold, curve) = match pr_and_ap(c, &labeled, n_gt) {
            Ok((curve, ap)) => (Some(ap), Some(select_threshold(&curve)), Some(curve)),
            Err(_) => {
                excluded.push(name.clone());
                (None, None, None)
            }
        };
        classes.push(ClassReport {
            class: c,
            name: name.clone(),
            n_gt,
            n_detections: labeled.len(),
            ap,
            threshold,
            curve,
        });
    }
    let aps: Vec<Option<f64>> = classes.iter().map(|c| c.ap).collect();
    EvalReport {
        matching: "greedy".into(),
        iou_min,
        mean_ap: mean_ap(&aps),
        classes,
        excluded,
    }
}
