//! Slow reference implementations used to cross-check the fast paths, plus the
//! seeded random instance generators the checks run on.

use rand::Rng;

use crate::dataset::{ImageAnnotation, Label};
use crate::geometry::{iou, BBoxCenter, BBoxCorner};
use crate::postprocess::Detection;

/// IoU estimated by jittered stratified sampling on an `n × n` grid laid over the
/// bounding rectangle of both boxes. Returns 0 for a degenerate union.
pub fn monte_carlo_iou<R: Rng>(a: &BBoxCorner, b: &BBoxCorner, n: usize, rng: &mut R) -> f64 {
    let x0 = a.x1.min(b.x1);
    let y0 = a.y1.min(b.y1);
    let (dx, dy) = ((a.x2.max(b.x2) - x0) / n as f64, (a.y2.max(b.y2) - y0) / n as f64);
    if !(dx > 0.0 && dy > 0.0) {
        return 0.0;
    }
    let (mut both, mut any) = (0u64, 0u64);
    for i in 0..n {
        for j in 0..n {
            let x = x0 + (i as f64 + rng.gen::<f64>()) * dx;
            let y = y0 + (j as f64 + rng.gen::<f64>()) * dy;
            let (ia, ib) = (a.contains_point(x, y), b.contains_point(x, y));
            both += (ia && ib) as u64;
            any += (ia || ib) as u64;
        }
    }
    if any == 0 {
        0.0
    } else {
        both as f64 / any as f64
    }
}

/// Quadratic NMS reference: in score order (stable), a detection survives iff no
/// already-surviving detection of a compatible class overlaps it at `thr` or more.
pub fn brute_force_nms(dets: &[Detection], thr: f64, class_agnostic: bool) -> Vec<Detection> {
    let n = dets.len();
    let mut overlap = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            overlap[i][j] = iou(&dets[i].bbox.to_corner(), &dets[j].bbox.to_corner());
        }
    }
    // insertion sort keeps equal scores in input order
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        let pos = order.iter().position(|&k| dets[k].score < dets[i].score).unwrap_or(order.len());
        order.insert(pos, i);
    }
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let blocked = kept.iter().any(|&k| {
            (class_agnostic || dets[k].class_id == dets[i].class_id) && overlap[k][i] >= thr
        });
        if !blocked {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

/// All-point AP by enumeration: every distinct score is tried as a cut-off, the
/// resulting (recall, precision) points define the envelope
/// `p(r) = max { precision : recall ≥ r }`, and that step function is integrated
/// over `[0, 1]` exactly by probing the midpoint of each recall interval.
pub fn ap_by_threshold_enumeration(records: &[(f64, bool)], num_gt: usize) -> f64 {
    let mut cuts: Vec<f64> = records.iter().map(|r| r.0).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let points: Vec<(f64, f64)> = cuts
        .iter()
        .map(|&t| {
            let kept = records.iter().filter(|r| r.0 >= t);
            let (tp, all) = kept.fold((0usize, 0usize), |(tp, all), r| (tp + r.1 as usize, all + 1));
            (tp as f64 / num_gt as f64, tp as f64 / all as f64)
        })
        .collect();
    let mut edges: Vec<f64> = points.iter().map(|p| p.0).chain([0.0, 1.0]).collect();
    edges.sort_by(f64::total_cmp);
    edges.dedup();
    edges
        .windows(2)
        .map(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            let p = points.iter().filter(|p| p.0 >= mid).map(|p| p.1).fold(0.0, f64::max);
            (w[1] - w[0]) * p
        })
        .sum()
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Relative error with a small floor so that two near-zero values compare as equal.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// A random corner box with the given size range, entirely inside `[0, 1]²`.
pub fn random_box<R: Rng>(rng: &mut R, min: f64, max: f64) -> BBoxCorner {
    let w = rng.gen_range(min..max);
    let h = rng.gen_range(min..max);
    let x = rng.gen_range(0.0..1.0 - w);
    let y = rng.gen_range(0.0..1.0 - h);
    BBoxCorner::new(x, y, x + w, y + h)
}

/// Random annotation with at most one object per cell of an `s × s` grid.
/// Centers sit strictly inside their cell.
pub fn random_collision_free_annotation<R: Rng>(
    rng: &mut R,
    s: usize,
    num_classes: usize,
    max_objects: usize,
) -> ImageAnnotation {
    let mut cells: Vec<usize> = (0..s * s).collect();
    let n = rng.gen_range(0..=max_objects.min(cells.len()));
    let mut boxes = Vec::with_capacity(n);
    for _ in 0..n {
        let cell = cells.swap_remove(rng.gen_range(0..cells.len()));
        let (row, col) = (cell / s, cell % s);
        let cx = (col as f64 + rng.gen_range(0.05..0.95)) / s as f64;
        let cy = (row as f64 + rng.gen_range(0.05..0.95)) / s as f64;
        let w = rng.gen_range(0.02..1.0);
        let h = rng.gen_range(0.02..1.0);
        boxes.push(Label::new(rng.gen_range(0..num_classes), BBoxCenter::new(cx, cy, w, h)));
    }
    ImageAnnotation::new("random", boxes)
}

/// Random annotation with boxes anywhere, collisions allowed.
pub fn random_annotation<R: Rng>(rng: &mut R, num_classes: usize, max_objects: usize) -> ImageAnnotation {
    let n = rng.gen_range(1..=max_objects);
    let boxes = (0..n)
        .map(|_| Label::new(rng.gen_range(0..num_classes), random_box(rng, 0.02, 0.9).to_center()))
        .collect();
    ImageAnnotation::new("random", boxes)
}

/// Random detections on image `image_id`; scores are continuous so ties have
/// probability zero.
pub fn random_detections<R: Rng>(rng: &mut R, image_id: &str, num_classes: usize, n: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| Detection {
            image_id: image_id.to_owned(),
            class_id: rng.gen_range(0..num_classes),
            score: rng.gen_range(0.0..1.0),
            bbox: random_box(rng, 0.05, 0.5).to_center(),
        })
        .collect()
}

/// Detections that jitter around ground-truth boxes, with some strays, so that
/// matching produces a mix of hits and misses.
pub fn perturbed_detections<R: Rng>(rng: &mut R, gt: &ImageAnnotation, num_classes: usize, max: usize) -> Vec<Detection> {
    let n = rng.gen_range(0..=max);
    (0..n)
        .map(|_| {
            let (bbox, class_id) = if !gt.boxes.is_empty() && rng.gen_bool(0.75) {
                let g = gt.boxes[rng.gen_range(0..gt.boxes.len())];
                let b = g.bbox;
                let j = |rng: &mut R, v: f64, span: f64| (v + rng.gen_range(-0.2..0.2) * span).clamp(0.0, 1.0);
                let bbox = BBoxCenter::new(
                    j(rng, b.cx, b.w),
                    j(rng, b.cy, b.h),
                    b.w * rng.gen_range(0.7..1.3),
                    b.h * rng.gen_range(0.7..1.3),
                );
                let class_id = if rng.gen_bool(0.8) { g.class_id } else { rng.gen_range(0..num_classes) };
                (bbox, class_id)
            } else {
                (random_box(rng, 0.05, 0.5).to_center(), rng.gen_range(0..num_classes))
            };
            Detection {
                image_id: gt.image_id.clone(),
                class_id,
                score: rng.gen_range(0.0..1.0),
                bbox,
            }
        })
        .collect()
}
