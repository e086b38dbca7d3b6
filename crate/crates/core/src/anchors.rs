//! Anchor selection by k-means over box shapes, with `1 − IoU` as the distance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::wh_iou;

/// Cluster count used when none is given (three anchors for each of three scales).
pub const DEFAULT_K: usize = 9;

#[derive(Debug, Error, PartialEq)]
pub enum AnchorError {
    #[error("need at least k = {k} boxes, got {n}")]
    TooFewBoxes { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("box {index} has nonpositive dimension ({w}, {h})")]
    NonPositive { index: usize, w: f64, h: f64 },
    #[error("mean best IoU needs at least one box and one anchor")]
    Empty,
}

/// Anchor shapes sorted by area, smallest first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnchorSet {
    pub anchors: Vec<(f64, f64)>,
    pub mean_best_iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub anchors: AnchorSet,
    pub iterations: usize,
    /// Mean best IoU after the first update and after every later iteration.
    pub trace: Vec<f64>,
}

fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    1.0 - wh_iou(a, b)
}

/// Average over boxes of the best shape IoU any anchor achieves.
pub fn mean_best_iou(boxes: &[(f64, f64)], anchors: &[(f64, f64)]) -> Result<f64, AnchorError> {
    if boxes.is_empty() || anchors.is_empty() {
        return Err(AnchorError::Empty);
    }
    let total: f64 = boxes
        .iter()
        .map(|&b| anchors.iter().map(|&a| wh_iou(b, a)).fold(0.0, f64::max))
        .sum();
    Ok(total / boxes.len() as f64)
}

/// Index of the closest centroid; ties go to the lowest index.
fn nearest(b: (f64, f64), centroids: &[(f64, f64)]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, &c) in centroids.iter().enumerate() {
        let d = distance(b, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// k-means++ seeding under the IoU distance.
fn seed_centroids(boxes: &[(f64, f64)], k: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let n = boxes.len();
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![boxes[first]];
    let mut d2: Vec<f64> = boxes.iter().map(|&b| distance(b, boxes[first]).powi(2)).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().enumerate().filter(|(i, _)| !chosen[*i]).map(|(_, d)| d).sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if chosen[i] || d <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if r < d {
                    break;
                }
                r -= d;
            }
            pick.expect("positive total implies a candidate")
        } else {
            // every remaining box coincides with a centroid
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.push(boxes[pick]);
        for (i, &b) in boxes.iter().enumerate() {
            d2[i] = d2[i].min(distance(b, boxes[pick]).powi(2));
        }
    }
    centroids
}

fn member_iou_sum(boxes: &[(f64, f64)], assign: &[usize], cluster: usize, c: (f64, f64)) -> f64 {
    boxes
        .iter()
        .zip(assign)
        .filter(|(_, &a)| a == cluster)
        .map(|(&b, _)| wh_iou(b, c))
        .sum()
}

/// Lloyd-style k-means on `(w, h)` shapes with distance `1 − wh_iou`.
///
/// Centroids move to the coordinate-wise mean of their members. From the second
/// iteration on, a move is only accepted if it does not lower the summed IoU of
/// the cluster's members, which keeps the mean best IoU non-decreasing. A cluster
/// left empty is re-seeded with the box that currently fits its centroid worst.
pub fn kmeans_anchors(
    boxes: &[(f64, f64)],
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<KMeansResult, AnchorError> {
    if k == 0 {
        return Err(AnchorError::ZeroK);
    }
    if boxes.len() < k {
        return Err(AnchorError::TooFewBoxes { k, n: boxes.len() });
    }
    if let Some((index, &(w, h))) = boxes
        .iter()
        .enumerate()
        .find(|(_, &(w, h))| !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()))
    {
        return Err(AnchorError::NonPositive { index, w, h });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(boxes, k, &mut rng);
    let mut assign: Vec<usize> = boxes.iter().map(|&b| nearest(b, &centroids)).collect();
    let mut trace = Vec::new();
    let mut iterations = 0;

    for iter in 0..max_iter.max(1) {
        iterations = iter + 1;
        // running means stay exact when all members coincide
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (&b, &a) in boxes.iter().zip(&assign) {
            let m = &mut sums[a];
            m.2 += 1;
            m.0 += (b.0 - m.0) / m.2 as f64;
            m.1 += (b.1 - m.1) / m.2 as f64;
        }
        for (c, &(mw, mh, count)) in sums.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let mean = (mw, mh);
            if iter == 0
                || member_iou_sum(boxes, &assign, c, mean) >= member_iou_sum(boxes, &assign, c, centroids[c])
            {
                centroids[c] = mean;
            }
        }
        // empty clusters take the globally worst-fitting box
        for c in 0..k {
            if sums[c].2 > 0 {
                continue;
            }
            let worst = (0..boxes.len())
                .max_by(|&i, &j| {
                    let di = distance(boxes[i], centroids[assign[i]]);
                    let dj = distance(boxes[j], centroids[assign[j]]);
                    di.total_cmp(&dj).then(j.cmp(&i))
                })
                .expect("boxes is nonempty");
            centroids[c] = boxes[worst];
            assign[worst] = c;
        }
        trace.push(mean_best_iou(boxes, &centroids)?);

        let next: Vec<usize> = boxes.iter().map(|&b| nearest(b, &centroids)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }

    centroids.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)).then(a.0.total_cmp(&b.0)));
    let score = mean_best_iou(boxes, &centroids)?;
    Ok(KMeansResult {
        anchors: AnchorSet {
            anchors: centroids,
            mean_best_iou: score,
        },
        iterations,
        trace,
    })
}
