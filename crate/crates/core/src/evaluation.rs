//! Non-maximum suppression, VOC-style average precision and mAP reports.
//!
//! AP is the all-points interpolated area under the precision/recall curve
//! at IoU 0.5. Detections are matched greedily in descending score order to
//! the unmatched ground truth of highest IoU; a ground truth is never
//! matched twice.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const AP_METHOD: &str = "voc-all-points@iou0.5";

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Greedy suppression in descending score order; equal scores keep the
/// lower index first. Returns kept indices in that order.
pub fn nms(boxes: &[BBox], scores: &[f64], threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| boxes[k].iou(&boxes[i]) <= threshold) {
            keep.push(i);
        }
    }
    keep
}

/// One scored detection of a single class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Ground truth of one class in one image; `difficult` boxes neither count
/// as positives nor penalize detections matched to them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub image: usize,
    pub bbox: BBox,
    pub difficult: bool,
}

/// True/false-positive flags of `detections` (sorted by descending score).
pub fn match_detections(detections: &[ScoredBox], gts: &[GroundTruth], iou_threshold: f64) -> Vec<Option<bool>> {
    let mut used = vec![false; gts.len()];
    detections
        .iter()
        .map(|d| {
            let mut best = None;
            let mut best_iou = iou_threshold;
            for (j, g) in gts.iter().enumerate() {
                if g.image != d.image || used[j] {
                    continue;
                }
                let v = d.bbox.iou(&g.bbox);
                if v >= best_iou && best.is_none_or(|_| v > best_iou) {
                    best_iou = v;
                    best = Some(j);
                }
            }
            match best {
                Some(j) if gts[j].difficult => {
                    used[j] = true;
                    None
                }
                Some(j) => {
                    used[j] = true;
                    Some(true)
                }
                None => Some(false),
            }
        })
        .collect()
}

/// All-points interpolated AP from TP flags in score order and the number
/// of positives.
pub fn ap_from_flags(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &f in flags {
        if f {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // precision envelope, then sum rectangles where recall changes
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_r {
            ap += (r - prev_r) * p;
            prev_r = *r;
        }
    }
    ap
}

/// AP of one class; `None` when the class has no (non-difficult) ground
/// truth.
pub fn average_precision(detections: &[ScoredBox], gts: &[GroundTruth], iou_threshold: f64) -> Option<f64> {
    let num_gt = gts.iter().filter(|g| !g.difficult).count();
    if num_gt == 0 {
        return None;
    }
    let mut dets = detections.to_vec();
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let flags: Vec<bool> = match_detections(&dets, gts, iou_threshold).into_iter().flatten().collect();
    Some(ap_from_flags(&flags, num_gt))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassRole {
    Base,
    Novel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: String,
    pub role: ClassRole,
    /// `None` when the evaluation set holds no ground truth of the class.
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_detections: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub images: usize,
    pub ground_truths: usize,
    pub detections: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub ap_method: String,
    pub iou_threshold: f64,
    pub split: String,
    pub shots: Option<usize>,
    pub seed: u64,
    pub classes: Vec<ClassAp>,
    pub novel_map: Option<f64>,
    pub base_map: Option<f64>,
    pub counts: EvalCounts,
    pub notes: Vec<String>,
    /// Resolved configuration of the run that produced the report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

/// Per-image inputs to [`build_report`].
#[derive(Clone, Debug, Default)]
pub struct ImageResult {
    /// `(class id, box, score)`.
    pub detections: Vec<(usize, BBox, f64)>,
    /// `(class id, box)`.
    pub ground_truth: Vec<(usize, BBox)>,
}

/// Scores `images` for the catalogue `class_names`, assigning each class
/// index the given role. Classes absent from `roles` are not scored.
pub fn build_report(
    images: &[ImageResult],
    class_names: &[String],
    roles: &BTreeMap<usize, ClassRole>,
    split: &str,
    shots: Option<usize>,
    seed: u64,
) -> Result<EvalReport> {
    let mut classes = Vec::new();
    let mut notes = Vec::new();
    let mut counts = EvalCounts {
        images: images.len(),
        ground_truths: 0,
        detections: 0,
    };
    for img in images {
        for &(c, _, s) in &img.detections {
            if c >= class_names.len() || !(s.is_finite()) {
                return Err(Error::invalid("evaluate", format!("detection with class {c} / score {s}")));
            }
        }
        for &(c, _) in &img.ground_truth {
            if c >= class_names.len() {
                return Err(Error::invalid("evaluate", format!("ground truth with unknown class {c}")));
            }
        }
    }
    for (&cls, &role) in roles {
        let name = class_names
            .get(cls)
            .ok_or_else(|| Error::invalid("evaluate", format!("role assigned to unknown class {cls}")))?;
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for (i, img) in images.iter().enumerate() {
            dets.extend(img.detections.iter().filter(|d| d.0 == cls).map(|d| ScoredBox {
                image: i,
                bbox: d.1,
                score: d.2,
            }));
            gts.extend(img.ground_truth.iter().filter(|g| g.0 == cls).map(|g| GroundTruth {
                image: i,
                bbox: g.1,
                difficult: false,
            }));
        }
        counts.ground_truths += gts.len();
        counts.detections += dets.len();
        let ap = average_precision(&dets, &gts, 0.5);
        if ap.is_none() {
            notes.push(format!("class '{name}' has no ground truth; excluded from mAP"));
        }
        classes.push(ClassAp {
            class: name.clone(),
            role,
            ap,
            num_gt: gts.len(),
            num_detections: dets.len(),
        });
    }
    let mean = |role: ClassRole| {
        let aps: Vec<f64> = classes.iter().filter(|c| c.role == role).filter_map(|c| c.ap).collect();
        (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
    };
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        ap_method: AP_METHOD.into(),
        iou_threshold: 0.5,
        split: split.into(),
        shots,
        seed,
        novel_map: mean(ClassRole::Novel),
        base_map: mean(ClassRole::Base),
        classes,
        counts,
        notes,
        config: None,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
