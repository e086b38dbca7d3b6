//! Embedded verification battery: fast paths against reference values and oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::{ImageAnnotation, Label};
use crate::encoding::{
    decode_v1, encode_v1, encode_v3_targets, AnchorScales, CollisionPolicy, GridDims, Objectness, TargetGridV1,
    DEFAULT_IGNORE_IOU,
};
use crate::eval::{average_precision, match_detections, Interpolation, MatchMode, Verdict};
use crate::geometry::BBoxCenter;
use crate::loss::{yolo_v1_loss, yolo_v1_loss_grad, LossWeights};
use crate::oracle;
use crate::postprocess::nms;

const SEED: u64 = 0x5a1a7;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed,
            detail: detail.into(),
        }
    }
}

/// Single-cell, one-slot, two-class instance with a hand-computed loss:
/// truth box (0.5, 0.5, 0.25, 0.25) of class 0, prediction
/// (0.6, 0.5, 0.25, 0.16, conf 0.8, classes 0.9 / 0.1).
pub fn worked_example() -> (TargetGridV1, Vec<f64>) {
    let dims = GridDims::new(1, 1, 2).expect("valid dims");
    let ann = ImageAnnotation::new("worked", vec![Label::new(0, BBoxCenter::new(0.5, 0.5, 0.25, 0.25))]);
    let target = encode_v1(&ann, dims, CollisionPolicy::Strict).expect("single object").grid;
    (target, vec![0.6, 0.5, 0.25, 0.16, 0.8, 0.9, 0.1])
}

/// Expected `(coord_xy, coord_wh, obj, noobj, class, total)` for [`worked_example`]
/// under the default weights.
pub const WORKED_BREAKDOWN: [f64; 6] = [0.05, 0.05, 0.04, 0.0, 0.02, 0.16];

/// Runs every check with the given loss weights. The reference values assume the
/// default weights, so anything else is expected to fail the loss checks.
pub fn run(weights: &LossWeights) -> Vec<CheckResult> {
    vec![
        check_worked_loss(weights),
        check_gradient_reference(weights),
        check_gradient_fd(weights),
        check_roundtrip(),
        check_v3_positives(),
        check_nms(),
        check_ap(),
    ]
}

fn check_worked_loss(weights: &LossWeights) -> CheckResult {
    let (target, pred) = worked_example();
    match yolo_v1_loss(&pred, &target, weights) {
        Ok(l) => {
            let got = [l.coord_xy, l.coord_wh, l.obj_conf, l.noobj_conf, l.classification, l.total];
            let ok = got.iter().zip(WORKED_BREAKDOWN).all(|(a, b)| (a - b).abs() < 1e-12);
            CheckResult::new("loss_worked_example", ok, format!("breakdown {got:?}"))
        }
        Err(e) => CheckResult::new("loss_worked_example", false, e.to_string()),
    }
}

fn check_gradient_reference(weights: &LossWeights) -> CheckResult {
    // d/dx of 5 * (x - 0.5)^2 at x = 0.6
    let (target, pred) = worked_example();
    match yolo_v1_loss_grad(&pred, &target, weights) {
        Ok(g) => CheckResult::new("gradient_reference", (g[0] - 1.0).abs() < 1e-12, format!("dL/dx = {}", g[0])),
        Err(e) => CheckResult::new("gradient_reference", false, e.to_string()),
    }
}

/// Random single-scale problem with strictly positive predicted sizes.
pub fn random_loss_instance<R: Rng>(rng: &mut R, c: usize) -> (TargetGridV1, Vec<f64>) {
    let s = rng.gen_range(1..=4);
    let b = rng.gen_range(1..=2);
    let dims = GridDims::new(s, b, c).expect("valid dims");
    let ann = oracle::random_collision_free_annotation(rng, s, c, s * s);
    let target = encode_v1(&ann, dims, CollisionPolicy::Strict).expect("collision free").grid;
    let mut pred: Vec<f64> = (0..dims.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    for cell in 0..dims.num_cells() {
        for j in 0..b {
            let o = dims.slot_offset(cell, j);
            pred[o + 2] = rng.gen_range(0.05..1.0);
            pred[o + 3] = rng.gen_range(0.05..1.0);
        }
    }
    (target, pred)
}

/// Largest relative error between the analytic gradient and central differences.
pub fn gradient_fd_error(target: &TargetGridV1, pred: &[f64], weights: &LossWeights, eps: f64) -> f64 {
    let analytic = match yolo_v1_loss_grad(pred, target, weights) {
        Ok(g) => g,
        Err(_) => return f64::INFINITY,
    };
    let numeric = oracle::central_difference(
        |x| yolo_v1_loss(x, target, weights).map_or(f64::NAN, |l| l.total),
        pred,
        eps,
    );
    analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| oracle::relative_error(a, n))
        .fold(0.0, |m, e| if e.is_nan() { f64::INFINITY } else { m.max(e) })
}

fn check_gradient_fd(weights: &LossWeights) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let worst = (0..25)
        .map(|_| {
            let (t, p) = random_loss_instance(&mut rng, 4);
            gradient_fd_error(&t, &p, weights, 1e-5)
        })
        .fold(0.0, f64::max);
    CheckResult::new("gradient_finite_difference", worst < 1e-4, format!("max relative error {worst:.3e}"))
}

/// Encodes then decodes one collision-free annotation; returns whether boxes
/// agree within `tol` and classes exactly.
pub fn roundtrip_ok(ann: &ImageAnnotation, dims: GridDims, tol: f64) -> bool {
    let grid = match encode_v1(ann, dims, CollisionPolicy::Strict) {
        Ok(e) => e.grid,
        Err(_) => return false,
    };
    let dets = match decode_v1(&grid.values, dims, &ann.image_id, 0.5) {
        Ok(d) => d,
        Err(_) => return false,
    };
    if dets.len() != ann.boxes.len() {
        return false;
    }
    ann.boxes.iter().all(|l| {
        dets.iter().any(|d| {
            d.class_id == l.class_id
                && (d.bbox.cx - l.bbox.cx).abs() <= tol
                && (d.bbox.cy - l.bbox.cy).abs() <= tol
                && (d.bbox.w - l.bbox.w).abs() <= tol
                && (d.bbox.h - l.bbox.h).abs() <= tol
        })
    })
}

fn check_roundtrip() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 1);
    let failures = (0..100)
        .filter(|_| {
            let s = rng.gen_range(1..=7);
            let dims = GridDims::new(s, rng.gen_range(1..=3), 4).expect("valid dims");
            let ann = oracle::random_collision_free_annotation(&mut rng, s, 4, 6);
            !roundtrip_ok(&ann, dims, 1e-9)
        })
        .count();
    CheckResult::new("encode_decode_roundtrip", failures == 0, format!("{failures} of 100 instances failed"))
}

/// Nine random anchors in the unit square.
pub fn random_anchors<R: Rng>(rng: &mut R) -> Vec<(f64, f64)> {
    (0..9).map(|_| (rng.gen_range(0.01..0.9), rng.gen_range(0.01..0.9))).collect()
}

/// Whether v3 encoding gives every object exactly one positive slot.
pub fn v3_positives_ok<R: Rng>(rng: &mut R) -> bool {
    let scales = match AnchorScales::from_area_tertiles(&random_anchors(rng), [13, 26, 52]) {
        Ok(s) => s,
        Err(_) => return false,
    };
    let ann = oracle::random_annotation(rng, 4, 12);
    match encode_v3_targets(&ann, &scales, 4, DEFAULT_IGNORE_IOU) {
        Ok(g) => g.count(Objectness::Positive) == ann.boxes.len(),
        Err(_) => false,
    }
}

fn check_v3_positives() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let failures = (0..50).filter(|_| !v3_positives_ok(&mut rng)).count();
    CheckResult::new("v3_one_positive_per_object", failures == 0, format!("{failures} of 50 instances failed"))
}

fn check_nms() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
    let failures = (0..200)
        .filter(|_| {
            let n = rng.gen_range(0..=10);
            let dets = oracle::random_detections(&mut rng, "img", 3, n);
            let thr = rng.gen_range(0.05..1.0);
            let agnostic = rng.gen_bool(0.3);
            nms(&dets, thr, agnostic).ok() != Some(oracle::brute_force_nms(&dets, thr, agnostic))
        })
        .count();
    CheckResult::new("nms_bruteforce_equivalence", failures == 0, format!("{failures} of 200 instances differ"))
}

/// All-point AP of one random instance against the enumeration oracle; returns
/// the absolute difference, or `None` if the instance has no ground truth.
pub fn ap_oracle_gap<R: Rng>(rng: &mut R, max_dets: usize, max_gt: usize) -> Option<f64> {
    let gt = oracle::random_annotation(rng, 1, max_gt);
    let dets = oracle::perturbed_detections(rng, &gt, 1, max_dets);
    let outcome = match_detections(&dets, &gt, 0.5, MatchMode::VocStandard).ok()?;
    let records: Vec<(f64, bool)> = outcome
        .detections
        .iter()
        .map(|d| (d.score, d.verdict == Verdict::TruePositive))
        .collect();
    let ap = average_precision(&records, gt.boxes.len(), Interpolation::AllPoint)?;
    Some((ap - oracle::ap_by_threshold_enumeration(&records, gt.boxes.len())).abs())
}

fn check_ap() -> CheckResult {
    let worked = [(0.9, true), (0.8, false), (0.7, true)];
    let ap = average_precision(&worked, 2, Interpolation::AllPoint).unwrap_or(f64::NAN);
    let worked_ok = (ap - 5.0 / 6.0).abs() < 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 4);
    let worst = (0..200)
        .filter_map(|_| ap_oracle_gap(&mut rng, 6, 4))
        .fold(0.0, f64::max);
    CheckResult::new(
        "ap_oracle",
        worked_ok && worst <= 1e-9,
        format!("worked case {ap:.6}, max oracle gap {worst:.3e}"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn battery_passes_with_defaults() {
        let results = run(&LossWeights::default());
        assert!(results.len() >= 4);
        for r in &results {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn misread_lambda_is_caught() {
        let weights = LossWeights {
            lambda_coord: 4.0,
            ..LossWeights::default()
        };
        let results = run(&weights);
        let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
        assert!(failed.contains(&"loss_worked_example"));
        assert!(failed.contains(&"gradient_reference"));
    }
}
