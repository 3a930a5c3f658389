//! Greedy decoding, per-class NMS and AP at IoU 0.5.

use crate::disw::{BBox, ObjectAnnotation};
use crate::nn::sigmoid;

use super::loss::{cell_center, REG_NORM};
use super::model::Prediction;

pub const SCORE_THRESHOLD: f64 = 0.3;
pub const NMS_IOU: f64 = 0.5;
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Per-cell argmax class, box from the regressed distances, score
/// threshold, then per-class NMS.
pub fn decode(predictions: &[Prediction], strides: &[usize], score_threshold: f64, nms_iou: f64) -> Vec<Detection> {
    let mut candidates = Vec::new();
    for (pred, &stride) in predictions.iter().zip(strides) {
        let (h, w) = pred.grid();
        let plane = h * w;
        let k = pred.cls.shape()[0];
        let logits = pred.cls.data();
        let reg = pred.reg.data();
        for row in 0..h {
            for col in 0..w {
                let cell = row * w + col;
                let (best, logit) = (0..k)
                    .map(|c| (c, logits[c * plane + cell]))
                    .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
                let score = sigmoid(logit);
                if score < score_threshold {
                    continue;
                }
                let scale = stride as f64 * REG_NORM;
                let d = |i: usize| reg[i * plane + cell].max(0.0) * scale;
                let (cx, cy) = cell_center(row, col, stride);
                candidates.push(Detection {
                    class_id: best,
                    score,
                    bbox: BBox::new(cx - d(0), cy - d(1), cx + d(2), cy + d(3)),
                });
            }
        }
    }
    nms(candidates, nms_iou)
}

/// Keeps the highest-scoring box of each overlapping same-class group.
pub fn nms(mut detections: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    detections.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for det in detections {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == det.class_id && k.bbox.iou(&det.bbox) > iou_threshold);
        if !suppressed {
            kept.push(det);
        }
    }
    kept
}

/// Mean over classes with ground truth of the all-point interpolated AP at
/// IoU ≥ 0.5. Detections are matched highest score first, each to the
/// best-overlapping unmatched ground truth of its class in its image.
pub fn evaluate_ap50(detections: &[Vec<Detection>], ground_truth: &[Vec<ObjectAnnotation>]) -> f64 {
    assert_eq!(detections.len(), ground_truth.len(), "one detection list per image");
    let num_classes = ground_truth.iter().flatten().map(|a| a.class_id + 1).max().unwrap_or(0);
    let mut aps = Vec::new();
    for class in 0..num_classes {
        let num_gt = ground_truth.iter().flatten().filter(|a| a.class_id == class).count();
        if num_gt == 0 {
            continue;
        }
        aps.push(class_ap(detections, ground_truth, class, num_gt));
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

pub fn class_ap(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<ObjectAnnotation>],
    class: usize,
    num_gt: usize,
) -> f64 {
    let mut dets: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| ds.iter().filter(|d| d.class_id == class).map(move |d| (img, d)))
        .collect();
    dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut matched: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(dets.len());
    for (img, det) in dets {
        let best = ground_truth[img]
            .iter()
            .enumerate()
            .filter(|(j, g)| g.class_id == class && !matched[img][*j])
            .map(|(j, g)| (j, det.bbox.iou(&g.bbox)))
            .fold(None, |acc: Option<(usize, f64)>, x| match acc {
                Some(a) if a.1 >= x.1 => Some(a),
                _ => Some(x),
            });
        match best {
            Some((j, iou)) if iou >= MATCH_IOU => {
                matched[img][j] = true;
                tp.push(true);
            }
            _ => tp.push(false),
        }
    }
    // Precision/recall curve, then the area under its monotone envelope.
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}
