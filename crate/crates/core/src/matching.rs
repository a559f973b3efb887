//! Box geometry, greedy detection-to-ground-truth assignment and
//! COCO-style 101-point average precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Axis-aligned box in pixel corner coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let all_finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !all_finite || x1 >= x2 || y1 >= y2 {
            return Err(Error::Geometry(format!(
                "invalid box [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// From COCO `[x, y, width, height]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class: usize,
}

/// Greedy COCO matching within one image. Returns a TP flag per detection,
/// in input order.
///
/// Detections are visited by descending confidence (input order on ties).
/// Each takes the unmatched same-class ground truth with the highest IoU at
/// or above `iou_threshold`; on equal IoU the later ground truth wins, as in
/// pycocotools.
pub fn assign_detections(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));

    let mut gt_taken = vec![false; gts.len()];
    let mut is_tp = vec![false; dets.len()];
    for d in order {
        let det = &dets[d];
        let mut best_iou = iou_threshold;
        let mut best = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_taken[g] || gt.class != det.class {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if v < best_iou {
                continue;
            }
            best_iou = v;
            best = Some(g);
        }
        if let Some(g) = best {
            gt_taken[g] = true;
            is_tp[d] = true;
        }
    }
    is_tp
}

/// A labelled detection as seen by the AP accumulator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedHit {
    pub confidence: f64,
    pub is_tp: bool,
}

/// Recall sample points `0.00, 0.01, ..., 1.00`, computed like `numpy.linspace`.
pub fn recall_thresholds() -> [f64; 101] {
    std::array::from_fn(|i| i as f64 * 0.01)
}

/// 101-point interpolated AP for one class.
///
/// `hits` must be ordered images-first; they are stably re-sorted by
/// descending confidence.
pub fn average_precision(hits: &[RankedHit], gt_count: usize) -> Result<f64> {
    if gt_count == 0 {
        return Err(Error::InsufficientData("AP is undefined without ground truth".into()));
    }
    let tp_total = hits.iter().filter(|h| h.is_tp).count();
    if tp_total > gt_count {
        return Err(Error::Consistency(format!(
            "{tp_total} true positives for {gt_count} ground-truth boxes"
        )));
    }
    let mut sorted = hits.to_vec();
    sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));

    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall = Vec::with_capacity(sorted.len());
    let mut precision = Vec::with_capacity(sorted.len());
    for h in &sorted {
        if h.is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / gt_count as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }

    let mut sum = 0.0;
    let mut ptr = 0;
    for r in recall_thresholds() {
        while ptr < recall.len() && recall[ptr] < r {
            ptr += 1;
        }
        if ptr < recall.len() {
            sum += precision[ptr];
        }
    }
    Ok(sum / 101.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map: f64,
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// Mean of per-class AP over classes with at least one ground-truth box.
pub fn mean_average_precision(per_class: &[Vec<RankedHit>], gt_counts: &[usize]) -> Result<MapResult> {
    if per_class.len() != gt_counts.len() {
        return Err(Error::Shape(format!(
            "{} hit lists for {} classes",
            per_class.len(),
            gt_counts.len()
        )));
    }
    let mut aps = Vec::with_capacity(per_class.len());
    for (c, (hits, &n)) in per_class.iter().zip(gt_counts).enumerate() {
        if n == 0 {
            log::info!("class {c} has no ground truth; excluded from mAP");
            aps.push(None);
        } else {
            aps.push(Some(average_precision(hits, n)?));
        }
    }
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::InsufficientData("no class has ground truth".into()));
    }
    Ok(MapResult {
        map: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class: aps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn hit(confidence: f64, is_tp: bool) -> RankedHit {
        RankedHit { confidence, is_tp }
    }

    /// Counts unit cells covered by integer-aligned boxes.
    fn grid_iou(a: &BBox, bb: &BBox) -> f64 {
        let cells = |x: &BBox| {
            let mut v = Vec::new();
            for i in x.x1 as i32..x.x2 as i32 {
                for j in x.y1 as i32..x.y2 as i32 {
                    v.push((i, j));
                }
            }
            v
        };
        let ca = cells(a);
        let cb = cells(bb);
        let inter = ca.iter().filter(|c| cb.contains(c)).count();
        inter as f64 / (ca.len() + cb.len() - inter) as f64
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert_eq!(iou(&a, &b(2.0, 0.0, 3.0, 2.0)), 0.0);
        let c = b(1.0, 0.0, 3.0, 2.0);
        assert!((iou(&a, &c) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &c), grid_iou(&a, &c));
        let d = b(1.0, 1.0, 4.0, 5.0);
        assert!((iou(&a, &d) - grid_iou(&a, &d)).abs() < 1e-15);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 3.0, 1.0, 2.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 2.0).is_err());
        assert_eq!(BBox::from_xywh(1.0, 2.0, 3.0, 4.0).unwrap(), b(1.0, 2.0, 4.0, 6.0));
        let json = serde_json::to_string(&b(0.0, 1.0, 2.0, 3.0)).unwrap();
        assert_eq!(json, "[0.0,1.0,2.0,3.0]");
        assert!(serde_json::from_str::<BBox>("[2.0,1.0,0.0,3.0]").is_err());
    }

    #[test]
    fn duplicate_detection_is_fp() {
        let gt = [GroundTruth { bbox: b(0.0, 0.0, 10.0, 10.0), class: 0 }];
        let dets = [
            Detection { bbox: b(0.0, 0.0, 10.0, 9.0), class: 0, confidence: 0.8 },
            Detection { bbox: b(0.0, 0.0, 10.0, 10.0), class: 0, confidence: 0.9 },
        ];
        assert_eq!(assign_detections(&dets, &gt, 0.5), vec![false, true]);
    }

    #[test]
    fn class_mismatch_is_fp() {
        let gt = [GroundTruth { bbox: b(0.0, 0.0, 10.0, 10.0), class: 1 }];
        let dets = [Detection { bbox: b(0.0, 0.0, 10.0, 9.0), class: 0, confidence: 0.9 }];
        assert_eq!(assign_detections(&dets, &gt, 0.5), vec![false]);
    }

    #[test]
    fn threshold_is_inclusive() {
        let gt = [GroundTruth { bbox: b(0.0, 0.0, 2.0, 2.0), class: 0 }];
        // IoU exactly 0.5
        let dets = [Detection { bbox: b(0.0, 0.0, 2.0, 1.0), class: 0, confidence: 0.9 }];
        assert_eq!(assign_detections(&dets, &gt, 0.5), vec![true]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[hit(0.9, true)], 1).unwrap(), 1.0);
        assert_eq!(average_precision(&[], 1).unwrap(), 0.0);
        assert!(average_precision(&[], 0).is_err());
        // TP, FP, TP with 2 GT: recall 0.5 at P=1, recall 1.0 at P=2/3
        let ap = average_precision(&[hit(0.9, true), hit(0.8, false), hit(0.7, true)], 2).unwrap();
        let expected = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((ap - expected).abs() < 1e-12);
    }

    #[test]
    fn map_skips_classes_without_gt() {
        let r = mean_average_precision(
            &[vec![hit(0.9, true)], vec![hit(0.5, false)], vec![]],
            &[1, 0, 2],
        )
        .unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), None, Some(0.0)]);
        assert_eq!(r.map, 0.5);
        assert!(mean_average_precision(&[vec![]], &[0]).is_err());
    }

    #[test]
    fn low_confidence_fp_never_raises_ap() {
        let base = vec![hit(0.9, true), hit(0.6, false), hit(0.5, true)];
        let mut more = base.clone();
        more.push(hit(0.1, false));
        let a = average_precision(&base, 3).unwrap();
        assert!(average_precision(&more, 3).unwrap() <= a);
        let mut tp = base.clone();
        tp.push(hit(0.2, true));
        assert!(average_precision(&tp, 3).unwrap() >= a);
    }
}
