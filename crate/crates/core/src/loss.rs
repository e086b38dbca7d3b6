//! Single-scale YOLO sum-squared loss, its analytic gradient, and the multi-label
//! binary cross-entropy used for three-scale class targets.
//!
//! Predictions are raw grid values in the [`TargetGridV1`] layout. Within an object
//! cell the predicted slot with the highest IoU against the truth box is responsible
//! for it (lowest slot index on ties); every other slot is penalized as "no object".

use serde::Serialize;
use thiserror::Error;

use crate::encoding::{sigmoid, GridDims, TargetGridV1};
use crate::geometry::{iou_center, BBoxCenter};

/// Responsible-slot sizes at or below this are treated as the `√` singularity.
pub const SQRT_SINGULARITY: f64 = 1e-12;
/// Lower bound applied to predicted sizes after every descent step.
pub const MIN_PROJECTED_SIZE: f64 = 1e-6;
/// A descent run is abandoned once the total loss exceeds this.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("prediction has {actual} values, target grid expects {expected}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("cell {cell} slot {slot}: predicted width/height must be nonnegative, got ({w}, {h})")]
    NegativeSize { cell: usize, slot: usize, w: f64, h: f64 },
    #[error("cell {cell} slot {slot}: gradient of sqrt term is singular for size ({w}, {h})")]
    Singular { cell: usize, slot: usize, w: f64, h: f64 },
    #[error("descent diverged at step {step} (total loss {total}); try a smaller learning rate")]
    Diverged { step: usize, total: f64 },
    #[error("descent needs steps >= 1 and a positive learning rate")]
    BadSchedule,
    #[error("logit and target vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

/// What the responsible slot's confidence is regressed towards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum ConfidenceTarget {
    #[default]
    ConstantOne,
    /// IoU between the predicted box and the truth box.
    IouWithTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossWeights {
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
    pub confidence_target: ConfidenceTarget,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_coord: 5.0,
            lambda_noobj: 0.5,
            confidence_target: ConfidenceTarget::ConstantOne,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub coord_xy: f64,
    pub coord_wh: f64,
    pub obj_conf: f64,
    pub noobj_conf: f64,
    pub classification: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn from_terms(coord_xy: f64, coord_wh: f64, obj_conf: f64, noobj_conf: f64, classification: f64) -> Self {
        Self {
            coord_xy,
            coord_wh,
            obj_conf,
            noobj_conf,
            classification,
            total: coord_xy + coord_wh + obj_conf + noobj_conf + classification,
        }
    }

    pub fn terms(&self) -> [f64; 5] {
        [
            self.coord_xy,
            self.coord_wh,
            self.obj_conf,
            self.noobj_conf,
            self.classification,
        ]
    }
}

fn slot_box(values: &[f64], o: usize) -> BBoxCenter {
    BBoxCenter::new(values[o], values[o + 1], values[o + 2], values[o + 3])
}

/// Responsible predicted slot of an object cell.
fn responsible_slot(pred: &[f64], dims: &GridDims, cell: usize, truth: &BBoxCenter) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for j in 0..dims.b {
        let v = iou_center(&slot_box(pred, dims.slot_offset(cell, j)), truth);
        if v > best.1 {
            best = (j, v);
        }
    }
    best.0
}

fn check_shape(pred: &[f64], target: &TargetGridV1) -> Result<(), LossError> {
    if pred.len() != target.values.len() || target.values.len() != target.dims.len() {
        return Err(LossError::ShapeMismatch {
            expected: target.dims.len(),
            actual: pred.len(),
        });
    }
    Ok(())
}

/// Object cell context shared by the loss and its gradient.
struct ObjectCell {
    cell: usize,
    slot: usize,
    truth: BBoxCenter,
    pred: BBoxCenter,
}

fn object_cells(pred: &[f64], target: &TargetGridV1) -> Result<Vec<Option<ObjectCell>>, LossError> {
    let dims = target.dims;
    (0..dims.num_cells())
        .map(|cell| {
            let Some(truth) = target.truth_box(cell) else {
                return Ok(None);
            };
            let slot = responsible_slot(pred, &dims, cell, &truth);
            let pbox = slot_box(pred, dims.slot_offset(cell, slot));
            if pbox.w < 0.0 || pbox.h < 0.0 {
                return Err(LossError::NegativeSize {
                    cell,
                    slot,
                    w: pbox.w,
                    h: pbox.h,
                });
            }
            Ok(Some(ObjectCell {
                cell,
                slot,
                truth,
                pred: pbox,
            }))
        })
        .collect()
}

/// Evaluates the five-term loss.
pub fn yolo_v1_loss(pred: &[f64], target: &TargetGridV1, weights: &LossWeights) -> Result<LossBreakdown, LossError> {
    check_shape(pred, target)?;
    let dims = target.dims;
    let tv = &target.values;
    let cells = object_cells(pred, target)?;

    let (mut xy, mut wh, mut obj, mut noobj, mut cls) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (cell, oc) in cells.iter().enumerate() {
        let responsible = oc.as_ref().map(|o| o.slot);
        for j in 0..dims.b {
            if Some(j) != responsible {
                let c_hat = pred[dims.slot_offset(cell, j) + 4];
                noobj += c_hat * c_hat;
            }
        }
        let Some(oc) = oc else {
            continue;
        };
        let (t, p) = (&oc.truth, &oc.pred);
        xy += (t.cx - p.cx).powi(2) + (t.cy - p.cy).powi(2);
        wh += (t.w.sqrt() - p.w.sqrt()).powi(2) + (t.h.sqrt() - p.h.sqrt()).powi(2);
        let c_target = match weights.confidence_target {
            ConfidenceTarget::ConstantOne => 1.0,
            ConfidenceTarget::IouWithTruth => iou_center(p, t),
        };
        let c_hat = pred[dims.slot_offset(oc.cell, oc.slot) + 4];
        obj += (c_target - c_hat).powi(2);
        let co = dims.class_offset(cell);
        cls += (0..dims.c).map(|c| (tv[co + c] - pred[co + c]).powi(2)).sum::<f64>();
    }
    Ok(LossBreakdown::from_terms(
        weights.lambda_coord * xy,
        weights.lambda_coord * wh,
        obj,
        weights.lambda_noobj * noobj,
        cls,
    ))
}

/// IoU of `pred` against `truth` and its partial derivatives with respect to
/// the predicted `(cx, cy, w, h)`. Zero gradient when the boxes do not overlap.
fn iou_with_grad(pred: &BBoxCenter, truth: &BBoxCenter) -> (f64, [f64; 4]) {
    let p = pred.to_corner();
    let t = truth.to_corner();
    let iw = p.x2.min(t.x2) - p.x1.max(t.x1);
    let ih = p.y2.min(t.y2) - p.y1.max(t.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let area_p = pred.w * pred.h;
    let union = area_p + t.area() - inter;
    if union <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    // which edge of the overlap belongs to the prediction
    let dx1 = if p.x1 > t.x1 { -1.0 } else { 0.0 };
    let dx2 = if p.x2 < t.x2 { 1.0 } else { 0.0 };
    let dy1 = if p.y1 > t.y1 { -1.0 } else { 0.0 };
    let dy2 = if p.y2 < t.y2 { 1.0 } else { 0.0 };
    // d(iw)/d(cx) etc.; x1 = cx - w/2, x2 = cx + w/2
    let diw_dcx = dx1 + dx2;
    let diw_dw = 0.5 * (dx2 - dx1);
    let dih_dcy = dy1 + dy2;
    let dih_dh = 0.5 * (dy2 - dy1);
    let d_inter = [diw_dcx * ih, dih_dcy * iw, diw_dw * ih, dih_dh * iw];
    let d_area = [0.0, 0.0, pred.h, pred.w];
    let iou = inter / union;
    let u2 = union * union;
    let grad = std::array::from_fn(|k| (d_inter[k] * (union + inter) - inter * d_area[k]) / u2);
    (iou, grad)
}

/// Gradient of [`yolo_v1_loss`]'s total with respect to every prediction value.
///
/// The choice of responsible slot is piecewise constant in the prediction and is
/// treated as fixed. Components no term references get zero.
pub fn yolo_v1_loss_grad(pred: &[f64], target: &TargetGridV1, weights: &LossWeights) -> Result<Vec<f64>, LossError> {
    check_shape(pred, target)?;
    let dims = target.dims;
    let tv = &target.values;
    let cells = object_cells(pred, target)?;
    let mut grad = vec![0.0; pred.len()];
    let lc = weights.lambda_coord;

    for (cell, oc) in cells.iter().enumerate() {
        let responsible = oc.as_ref().map(|o| o.slot);
        for j in 0..dims.b {
            if Some(j) != responsible {
                let o = dims.slot_offset(cell, j) + 4;
                grad[o] = 2.0 * weights.lambda_noobj * pred[o];
            }
        }
        let Some(oc) = oc else {
            continue;
        };
        let (t, p) = (&oc.truth, &oc.pred);
        if p.w <= SQRT_SINGULARITY || p.h <= SQRT_SINGULARITY {
            return Err(LossError::Singular {
                cell,
                slot: oc.slot,
                w: p.w,
                h: p.h,
            });
        }
        let o = dims.slot_offset(cell, oc.slot);
        grad[o] = 2.0 * lc * (p.cx - t.cx);
        grad[o + 1] = 2.0 * lc * (p.cy - t.cy);
        grad[o + 2] = -lc * (t.w.sqrt() - p.w.sqrt()) / p.w.sqrt();
        grad[o + 3] = -lc * (t.h.sqrt() - p.h.sqrt()) / p.h.sqrt();

        let c_hat = pred[o + 4];
        match weights.confidence_target {
            ConfidenceTarget::ConstantOne => grad[o + 4] = 2.0 * (c_hat - 1.0),
            ConfidenceTarget::IouWithTruth => {
                let (iou, d_iou) = iou_with_grad(p, t);
                grad[o + 4] = 2.0 * (c_hat - iou);
                for k in 0..4 {
                    grad[o + k] += 2.0 * (iou - c_hat) * d_iou[k];
                }
            }
        }
        let co = dims.class_offset(cell);
        for c in 0..dims.c {
            grad[co + c] = 2.0 * (pred[co + c] - tv[co + c]);
        }
    }
    Ok(grad)
}

/// `Σ_c BCE(σ(logit_c), target_c)` in the log-sum-exp stable form.
pub fn multilabel_class_loss(logits: &[f64], targets: &[f64]) -> Result<f64, LossError> {
    if logits.len() != targets.len() {
        return Err(LossError::LengthMismatch(logits.len(), targets.len()));
    }
    Ok(logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
        .sum())
}

/// Gradient of [`multilabel_class_loss`]: `σ(z) − t` per class.
pub fn multilabel_class_loss_grad(logits: &[f64], targets: &[f64]) -> Result<Vec<f64>, LossError> {
    if logits.len() != targets.len() {
        return Err(LossError::LengthMismatch(logits.len(), targets.len()));
    }
    Ok(logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| sigmoid(z) - t)
        .collect())
}

fn project_sizes(pred: &mut [f64], dims: &GridDims) {
    for cell in 0..dims.num_cells() {
        for j in 0..dims.b {
            let o = dims.slot_offset(cell, j);
            for k in [2, 3] {
                pred[o + k] = pred[o + k].max(MIN_PROJECTED_SIZE);
            }
        }
    }
}

/// Plain gradient descent on the prediction values.
///
/// Returns `steps + 1` breakdowns: the starting loss followed by the loss after
/// every step. Predicted sizes are kept at or above [`MIN_PROJECTED_SIZE`].
pub fn toy_fit(
    target: &TargetGridV1,
    initial: &[f64],
    steps: usize,
    learning_rate: f64,
    weights: &LossWeights,
) -> Result<Vec<LossBreakdown>, LossError> {
    if steps == 0 || !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(LossError::BadSchedule);
    }
    let mut pred = initial.to_vec();
    check_shape(&pred, target)?;
    project_sizes(&mut pred, &target.dims);
    let mut trajectory = Vec::with_capacity(steps + 1);
    trajectory.push(yolo_v1_loss(&pred, target, weights)?);
    for step in 1..=steps {
        let grad = yolo_v1_loss_grad(&pred, target, weights)?;
        for (p, g) in pred.iter_mut().zip(&grad) {
            *p -= learning_rate * g;
        }
        project_sizes(&mut pred, &target.dims);
        let loss = yolo_v1_loss(&pred, target, weights)?;
        if loss.total.is_nan() || loss.total > DIVERGENCE_LIMIT {
            return Err(LossError::Diverged {
                step,
                total: loss.total,
            });
        }
        trajectory.push(loss);
    }
    Ok(trajectory)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ImageAnnotation, Label};
    use crate::encoding::{encode_v1, CollisionPolicy};

    /// Target and prediction of the single-cell worked example (S=1, B=1, C=2).
    pub(crate) fn worked_example() -> (TargetGridV1, Vec<f64>) {
        let dims = GridDims::new(1, 1, 2).unwrap();
        let ann = ImageAnnotation::new("x", vec![Label::new(0, BBoxCenter::new(0.5, 0.5, 0.25, 0.25))]);
        let target = encode_v1(&ann, dims, CollisionPolicy::Strict).unwrap().grid;
        assert_eq!(target.values, vec![0.5, 0.5, 0.25, 0.25, 1.0, 1.0, 0.0]);
        (target, vec![0.6, 0.5, 0.25, 0.16, 0.8, 0.9, 0.1])
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn worked_example_terms() {
        let (target, pred) = worked_example();
        let l = yolo_v1_loss(&pred, &target, &LossWeights::default()).unwrap();
        assert!(close(l.coord_xy, 0.05));
        assert!(close(l.coord_wh, 0.05));
        assert!(close(l.obj_conf, 0.04));
        assert_eq!(l.noobj_conf, 0.0);
        assert!(close(l.classification, 0.02));
        assert!(close(l.total, 0.16));
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let dims = GridDims::new(3, 2, 4).unwrap();
        let ann = ImageAnnotation::new(
            "x",
            vec![
                Label::new(1, BBoxCenter::new(0.2, 0.2, 0.1, 0.3)),
                Label::new(3, BBoxCenter::new(0.9, 0.5, 0.4, 0.2)),
            ],
        );
        let target = encode_v1(&ann, dims, CollisionPolicy::Strict).unwrap().grid;
        let l = yolo_v1_loss(&target.values, &target, &LossWeights::default()).unwrap();
        assert_eq!(l, LossBreakdown::default());
        let g = yolo_v1_loss_grad(&target.values, &target, &LossWeights::default()).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_target_noobj_only() {
        let dims = GridDims::new(2, 2, 4).unwrap();
        let target = TargetGridV1::empty(dims);
        let mut pred = vec![0.0; dims.len()];
        for cell in 0..4 {
            for j in 0..2 {
                pred[dims.slot_offset(cell, j) + 4] = 0.1;
            }
        }
        let l = yolo_v1_loss(&pred, &target, &LossWeights::default()).unwrap();
        assert!(close(l.total, 0.04));
        assert!(close(l.noobj_conf, 0.04));
        assert_eq!(l.coord_xy + l.coord_wh + l.obj_conf + l.classification, 0.0);
    }

    #[test]
    fn hand_derivative_of_x() {
        let (target, pred) = worked_example();
        let g = yolo_v1_loss_grad(&pred, &target, &LossWeights::default()).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-12);
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn errors() {
        let (target, mut pred) = worked_example();
        assert!(matches!(
            yolo_v1_loss(&pred[..6], &target, &LossWeights::default()),
            Err(LossError::ShapeMismatch { .. })
        ));
        pred[3] = -0.1;
        assert!(matches!(
            yolo_v1_loss(&pred, &target, &LossWeights::default()),
            Err(LossError::NegativeSize { .. })
        ));
        pred[3] = 0.0;
        assert!(matches!(
            yolo_v1_loss_grad(&pred, &target, &LossWeights::default()),
            Err(LossError::Singular { .. })
        ));
    }

    #[test]
    fn responsible_slot_is_best_iou() {
        let dims = GridDims::new(1, 2, 1).unwrap();
        let ann = ImageAnnotation::new("x", vec![Label::new(0, BBoxCenter::new(0.5, 0.5, 0.4, 0.4))]);
        let target = encode_v1(&ann, dims, CollisionPolicy::Strict).unwrap().grid;
        // slot 1 overlaps the truth better, so slot 0 is penalized as no-object
        let pred = vec![0.1, 0.1, 0.1, 0.1, 0.3, 0.5, 0.5, 0.4, 0.4, 1.0, 1.0];
        let l = yolo_v1_loss(&pred, &target, &LossWeights::default()).unwrap();
        assert!(close(l.noobj_conf, 0.5 * 0.09));
        assert_eq!(l.coord_xy + l.coord_wh + l.obj_conf + l.classification, 0.0);
    }

    #[test]
    fn iou_confidence_mode() {
        let (target, pred) = worked_example();
        let w = LossWeights {
            confidence_target: ConfidenceTarget::IouWithTruth,
            ..LossWeights::default()
        };
        let l = yolo_v1_loss(&pred, &target, &w).unwrap();
        let iou = iou_center(&BBoxCenter::new(0.6, 0.5, 0.25, 0.16), &BBoxCenter::new(0.5, 0.5, 0.25, 0.25));
        assert!(close(l.obj_conf, (iou - 0.8).powi(2)));
    }

    #[test]
    fn bce_cases() {
        assert!(multilabel_class_loss(&[50.0, -50.0], &[1.0, 0.0]).unwrap() < 1e-9);
        let v = multilabel_class_loss(&[0.0], &[1.0]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((multilabel_class_loss(&[0.0, 0.0], &[1.0, 0.0]).unwrap() - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        // saturated wrong prediction stays finite
        assert!((multilabel_class_loss(&[-800.0], &[1.0]).unwrap() - 800.0).abs() < 1e-9);
        assert!(multilabel_class_loss(&[0.0], &[]).is_err());
    }

    #[test]
    fn bce_gradient_matches_central_differences() {
        let logits = [-3.2, -0.4, 0.0, 0.7, 2.5, 9.0];
        let targets = [1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let g = multilabel_class_loss_grad(&logits, &targets).unwrap();
        let eps = 1e-5;
        for k in 0..logits.len() {
            let mut up = logits;
            let mut dn = logits;
            up[k] += eps;
            dn[k] -= eps;
            let fd = (multilabel_class_loss(&up, &targets).unwrap() - multilabel_class_loss(&dn, &targets).unwrap()) / (2.0 * eps);
            let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-8);
            assert!(rel < 1e-6, "k={k} fd={fd} g={}", g[k]);
        }
    }

    #[test]
    fn toy_fit_cases() {
        let (target, pred) = worked_example();
        let w = LossWeights::default();
        let traj = toy_fit(&target, &target.values, 10, 0.01, &w).unwrap();
        assert_eq!(traj.len(), 11);
        assert!(traj.iter().all(|l| l.total == 0.0));

        let traj = toy_fit(&target, &pred, 5000, 0.01, &w).unwrap();
        assert!(traj.last().unwrap().total <= 0.1 * traj[0].total);

        assert!(matches!(toy_fit(&target, &pred, 10, 1e9, &w), Err(LossError::Diverged { .. })));
        assert_eq!(toy_fit(&target, &pred, 0, 0.01, &w), Err(LossError::BadSchedule));
    }
}
