//! Anchor-free detection loss.
//!
//! A cell is positive when its center falls inside a ground-truth box (the
//! smallest box wins when several contain it). Classification is per-class
//! binary cross-entropy over every cell, with positive cells up-weighted by
//! the negative/positive count ratio. Regression is smooth-L1 on the
//! normalised (l, t, r, b) distances over positive cells only.

use crate::disw::ObjectAnnotation;
use crate::error::{Error, Result};
use crate::nn::{bce_with_logits, sigmoid, smooth_l1};
use crate::tensor::Tensor;

use super::model::Prediction;

/// Distances are regressed in units of `REG_NORM × stride` pixels.
pub const REG_NORM: f64 = 0.25;
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellTarget {
    pub class_id: usize,
    /// Normalised (l, t, r, b).
    pub distances: [f64; 4],
}

/// Per-level, row-major cell assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub levels: Vec<Vec<Option<CellTarget>>>,
    pub num_positive: usize,
    pub num_cells: usize,
}

pub fn cell_center(row: usize, col: usize, stride: usize) -> (f64, f64) {
    ((col as f64 + 0.5) * stride as f64, (row as f64 + 0.5) * stride as f64)
}

pub fn assign_targets(annotations: &[ObjectAnnotation], grids: &[(usize, usize)], strides: &[usize]) -> Targets {
    let mut levels = Vec::with_capacity(grids.len());
    let mut num_positive = 0;
    let mut num_cells = 0;
    for (&(h, w), &stride) in grids.iter().zip(strides) {
        let mut cells = vec![None; h * w];
        for (row, col) in (0..h).flat_map(|r| (0..w).map(move |c| (r, c))) {
            let (cx, cy) = cell_center(row, col, stride);
            let best = annotations
                .iter()
                .filter(|a| a.bbox.contains(cx, cy))
                .min_by(|a, b| a.bbox.area().total_cmp(&b.bbox.area()));
            if let Some(a) = best {
                let scale = stride as f64 * REG_NORM;
                cells[row * w + col] = Some(CellTarget {
                    class_id: a.class_id,
                    distances: [
                        (cx - a.bbox.x1) / scale,
                        (cy - a.bbox.y1) / scale,
                        (a.bbox.x2 - cx) / scale,
                        (a.bbox.y2 - cy) / scale,
                    ],
                });
                num_positive += 1;
            }
        }
        num_cells += h * w;
        levels.push(cells);
    }
    Targets {
        levels,
        num_positive,
        num_cells,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DetectionLoss {
    pub cls: f64,
    pub reg: f64,
}

impl DetectionLoss {
    pub fn total(&self) -> f64 {
        self.cls + self.reg
    }
}

/// Loss value and its gradient with respect to every prediction.
pub fn detection_loss(
    predictions: &[Prediction],
    annotations: &[ObjectAnnotation],
    strides: &[usize],
) -> Result<(DetectionLoss, Vec<Prediction>)> {
    if predictions.len() != strides.len() {
        return Err(Error::shape(
            "detection loss",
            format!("{} levels but {} strides", predictions.len(), strides.len()),
        ));
    }
    let grids: Vec<(usize, usize)> = predictions.iter().map(Prediction::grid).collect();
    for (pred, &(h, w)) in predictions.iter().zip(&grids) {
        if pred.reg.shape() != [4, h, w] {
            return Err(Error::shape(
                "detection loss",
                format!("regression {:?} vs grid {h}×{w}", pred.reg.shape()),
            ));
        }
    }
    let num_classes = predictions[0].cls.shape()[0];
    if let Some(a) = annotations.iter().find(|a| a.class_id >= num_classes) {
        return Err(Error::Annotation(format!(
            "class {} outside 0..{num_classes}",
            a.class_id
        )));
    }
    let targets = assign_targets(annotations, &grids, strides);
    let num_neg = targets.num_cells - targets.num_positive;
    let pos_weight = if targets.num_positive > 0 && num_neg > 0 {
        num_neg as f64 / targets.num_positive as f64
    } else {
        1.0
    };
    let cls_norm = num_neg as f64 + targets.num_positive as f64 * pos_weight;
    let reg_norm = (4 * targets.num_positive.max(1)) as f64;

    let mut loss = DetectionLoss::default();
    let mut grads = Vec::with_capacity(predictions.len());
    for (pred, cells) in predictions.iter().zip(&targets.levels) {
        let (h, w) = pred.grid();
        let plane = h * w;
        let mut gcls = vec![0.0; num_classes * plane];
        let mut greg = vec![0.0; 4 * plane];
        let logits = pred.cls.data();
        let reg = pred.reg.data();
        for (cell, target) in cells.iter().enumerate() {
            let weight = if target.is_some() { pos_weight } else { 1.0 };
            for k in 0..num_classes {
                let y = match target {
                    Some(t) if t.class_id == k => 1.0,
                    _ => 0.0,
                };
                let x = logits[k * plane + cell];
                loss.cls += weight * bce_with_logits(x, y) / cls_norm;
                gcls[k * plane + cell] = weight * (sigmoid(x) - y) / cls_norm;
            }
            if let Some(t) = target {
                for (d, &goal) in t.distances.iter().enumerate() {
                    let (v, g) = smooth_l1(reg[d * plane + cell] - goal, SMOOTH_L1_BETA);
                    loss.reg += v / reg_norm;
                    greg[d * plane + cell] = g / reg_norm;
                }
            }
        }
        grads.push(Prediction {
            cls: Tensor::from_raw(vec![num_classes, h, w], gcls),
            reg: Tensor::from_raw(vec![4, h, w], greg),
        });
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disw::BBox;

    fn empty_pred(k: usize, h: usize, w: usize) -> Prediction {
        Prediction {
            cls: Tensor::zeros(&[k, h, w]),
            reg: Tensor::zeros(&[4, h, w]),
        }
    }

    #[test]
    fn empty_annotations_zero_regression() {
        let preds = vec![empty_pred(2, 4, 4), empty_pred(2, 2, 2)];
        let (loss, grads) = detection_loss(&preds, &[], &[4, 8]).unwrap();
        assert_eq!(loss.reg, 0.0);
        assert!((loss.cls - 2.0_f64.ln() * 2.0).abs() < 1e-12);
        assert!(grads.iter().all(|g| g.reg.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn smallest_box_wins() {
        let big = ObjectAnnotation::new(0, BBox::new(0., 0., 16., 16.));
        let small = ObjectAnnotation::new(1, BBox::new(4., 4., 8., 8.));
        let t = assign_targets(&[big, small], &[(4, 4)], &[4]);
        // Cell (1,1) has center (6,6), inside both.
        assert_eq!(t.levels[0][5].unwrap().class_id, 1);
        assert_eq!(t.levels[0][0].unwrap().class_id, 0);
        assert_eq!(t.num_positive, 16);
    }

    #[test]
    fn perfect_predictions_near_zero_loss() {
        let ann = ObjectAnnotation::new(1, BBox::new(2., 2., 14., 10.));
        let grids = [(4usize, 4usize)];
        let targets = assign_targets(&[ann], &grids, &[4]);
        let mut pred = empty_pred(2, 4, 4);
        let plane = 16;
        for (cell, t) in targets.levels[0].iter().enumerate() {
            for k in 0..2 {
                let on = matches!(t, Some(t) if t.class_id == k);
                pred.cls.data_mut()[k * plane + cell] = if on { 30.0 } else { -30.0 };
            }
            if let Some(t) = t {
                for d in 0..4 {
                    pred.reg.data_mut()[d * plane + cell] = t.distances[d];
                }
            }
        }
        let (loss, _) = detection_loss(&[pred], &[ann], &[4]).unwrap();
        assert!(loss.total() <= 1e-3, "{loss:?}");
    }

    #[test]
    fn rejects_unknown_class() {
        let ann = ObjectAnnotation::new(5, BBox::new(2., 2., 14., 10.));
        assert!(detection_loss(&[empty_pred(2, 4, 4)], &[ann], &[4]).is_err());
    }
}
