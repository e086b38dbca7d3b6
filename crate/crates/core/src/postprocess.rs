//! Detection records, confidence filtering and greedy non-maximum suppression.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou_center, BBoxCenter};

#[derive(Debug, Error)]
pub enum PostprocessError {
    #[error("nms expects detections from a single image, found {0:?} and {1:?}")]
    MixedImages(String, String),
    #[error("iou threshold must lie in (0, 1], got {0}")]
    BadThreshold(f64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// One predicted box. Serialized as a flat JSON object
/// `{image_id, class_id, score, cx, cy, w, h}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub class_id: usize,
    pub score: f64,
    #[serde(flatten)]
    pub bbox: BBoxCenter,
}

/// Keeps detections scoring at least `min_score`, preserving order.
pub fn confidence_filter(detections: &[Detection], min_score: f64) -> Vec<Detection> {
    detections
        .iter()
        .filter(|d| d.score >= min_score)
        .cloned()
        .collect()
}

/// Indices of `scores` sorted by descending score; equal scores keep input order.
pub(crate) fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy NMS over one image's detections.
///
/// Walks detections from the highest score down; each kept detection suppresses
/// every remaining one of the same class (any class if `class_agnostic`) whose IoU
/// with it is at least `iou_threshold`. Output is in keep order.
pub fn nms(
    detections: &[Detection],
    iou_threshold: f64,
    class_agnostic: bool,
) -> Result<Vec<Detection>, PostprocessError> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(PostprocessError::BadThreshold(iou_threshold));
    }
    if let Some(first) = detections.first() {
        if let Some(other) = detections.iter().find(|d| d.image_id != first.image_id) {
            return Err(PostprocessError::MixedImages(
                first.image_id.clone(),
                other.image_id.clone(),
            ));
        }
    }
    let order = score_order(detections.iter().map(|d| d.score));
    let corners: Vec<_> = detections.iter().map(|d| d.bbox.to_corner()).collect();
    let mut suppressed = vec![false; detections.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(detections[i].clone());
        for &j in &order[pos + 1..] {
            if suppressed[j] {
                continue;
            }
            let same = class_agnostic || detections[j].class_id == detections[i].class_id;
            if same && crate::geometry::iou(&corners[i], &corners[j]) >= iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    Ok(kept)
}

/// Runs [`nms`] separately for every image, keeping images in first-seen order.
pub fn nms_per_image(
    detections: &[Detection],
    iou_threshold: f64,
    class_agnostic: bool,
) -> Result<Vec<Detection>, PostprocessError> {
    let mut groups: Vec<(String, Vec<Detection>)> = Vec::new();
    for d in detections {
        match groups.iter_mut().find(|(id, _)| *id == d.image_id) {
            Some((_, g)) => g.push(d.clone()),
            None => groups.push((d.image_id.clone(), vec![d.clone()])),
        }
    }
    let mut out = Vec::with_capacity(detections.len());
    for (_, g) in groups {
        out.extend(nms(&g, iou_threshold, class_agnostic)?);
    }
    Ok(out)
}

pub fn parse_detections_jsonl(text: &str) -> Result<Vec<Detection>, PostprocessError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let d: Detection = serde_json::from_str(line).map_err(|e| PostprocessError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&d.score) {
            return Err(PostprocessError::Parse {
                line: idx + 1,
                message: format!("score {} outside [0, 1]", d.score),
            });
        }
        if !d.bbox.is_well_formed() {
            return Err(PostprocessError::Parse {
                line: idx + 1,
                message: "box must have its center in [0, 1] and nonnegative size".into(),
            });
        }
        out.push(d);
    }
    Ok(out)
}

pub fn detections_to_jsonl(detections: &[Detection]) -> String {
    let mut out = String::new();
    for d in detections {
        let _ = writeln!(
            out,
            "{}",
            serde_json::to_string(d).expect("detections always serialize")
        );
    }
    out
}

/// IoU between two detections' boxes.
pub fn detection_iou(a: &Detection, b: &Detection) -> f64 {
    iou_center(&a.bbox, &b.bbox)
}
