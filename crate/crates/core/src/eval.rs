//! Detection evaluation: matching, precision/recall, AP/mAP, average IoU and latency.
//!
//! Two matching conventions are provided:
//!
//! * [`MatchMode::VocStandard`]: a detection is a true positive when it overlaps an
//!   unmatched ground truth *of its own class* at or above the IoU threshold; any other
//!   detection is a false positive. AP and mAP are always computed from this mode.
//! * [`MatchMode::PaperLiteral`]: matching is spatial and class-blind. A spatial match
//!   with the right class is a true positive, with the wrong class a false positive.
//!   Detections overlapping nothing are discarded, and a false negative is a ground
//!   truth nothing overlapped. Here `TP + FN + misclassified = |GT|` per class.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetManifest, ImageAnnotation};
use crate::geometry::iou;
use crate::postprocess::{score_order, Detection};

/// IoU thresholds of the default protocol.
pub const DEFAULT_IOU_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("IoU threshold must lie in (0, 1], got {0}")]
    BadThreshold(f64),
    #[error("detection for image {found:?} passed while matching image {expected:?}")]
    ImageMismatch { expected: String, found: String },
    #[error("detections reference unknown image ids: {}", .0.join(", "))]
    UnknownImages(Vec<String>),
    #[error("detection class id {class_id} out of range for {num_classes} classes")]
    ClassOutOfRange { class_id: usize, num_classes: usize },
    #[error("no class has ground-truth instances")]
    NoClasses,
    #[error("timing needs at least one image and one repeat")]
    EmptyTiming,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MatchMode {
    #[default]
    #[serde(rename = "voc")]
    VocStandard,
    #[serde(rename = "paper")]
    PaperLiteral,
}

impl MatchMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MatchMode::VocStandard => "voc",
            MatchMode::PaperLiteral => "paper",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Interpolation {
    #[default]
    #[serde(rename = "allpoint")]
    AllPoint,
    #[serde(rename = "11pt")]
    ElevenPoint,
}

impl Interpolation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Interpolation::AllPoint => "allpoint",
            Interpolation::ElevenPoint => "11pt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    TruePositive,
    FalsePositive,
    /// Paper-literal only: overlapped no ground truth, counted nowhere.
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionMatch {
    /// Position in the detection list given to [`match_detections`].
    pub index: usize,
    pub class_id: usize,
    pub score: f64,
    pub matched_gt: Option<usize>,
    pub iou: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub mode: MatchMode,
    /// In descending score order.
    pub detections: Vec<DetectionMatch>,
    pub gt_classes: Vec<usize>,
    /// Ground truths credited to a detection (voc: a true positive; paper: any spatial match).
    pub gt_matched: Vec<bool>,
    /// Paper-literal only: matched spatially by a detection of another class.
    pub gt_misclassified: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub misclassified: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.misclassified += o.misclassified;
    }
}

impl MatchOutcome {
    pub fn counts_per_class(&self, num_classes: usize) -> Vec<Counts> {
        let mut counts = vec![Counts::default(); num_classes];
        for d in &self.detections {
            match d.verdict {
                Verdict::TruePositive => counts[d.class_id].tp += 1,
                Verdict::FalsePositive => counts[d.class_id].fp += 1,
                Verdict::Discarded => {}
            }
        }
        for (g, &class) in self.gt_classes.iter().enumerate() {
            if !self.gt_matched[g] {
                counts[class].fn_ += 1;
            } else if self.gt_misclassified[g] {
                counts[class].misclassified += 1;
            }
        }
        counts
    }

    pub fn total_counts(&self) -> Counts {
        let n = self
            .gt_classes
            .iter()
            .chain(self.detections.iter().map(|d| &d.class_id))
            .max()
            .map_or(0, |&m| m + 1);
        let mut total = Counts::default();
        for c in self.counts_per_class(n) {
            total += c;
        }
        total
    }
}

fn check_threshold(t: f64) -> Result<(), EvalError> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(EvalError::BadThreshold(t))
    }
}

/// Best unmatched ground truth among `candidates` with IoU at or above `thr`.
fn best_gt(ious: &[f64], taken: &[bool], thr: f64, allowed: impl Fn(usize) -> bool) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (g, &v) in ious.iter().enumerate() {
        if taken[g] || !allowed(g) || v < thr {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((g, v));
        }
    }
    best
}

/// Matches one image's detections against its ground truth.
pub fn match_detections(
    detections: &[Detection],
    ground_truth: &ImageAnnotation,
    iou_threshold: f64,
    mode: MatchMode,
) -> Result<MatchOutcome, EvalError> {
    check_threshold(iou_threshold)?;
    if let Some(d) = detections.iter().find(|d| d.image_id != ground_truth.image_id) {
        return Err(EvalError::ImageMismatch {
            expected: ground_truth.image_id.clone(),
            found: d.image_id.clone(),
        });
    }
    let gts: Vec<_> = ground_truth.boxes.iter().map(|l| l.bbox.to_corner()).collect();
    let gt_classes: Vec<usize> = ground_truth.boxes.iter().map(|l| l.class_id).collect();
    let mut gt_matched = vec![false; gts.len()];
    let mut gt_misclassified = vec![false; gts.len()];
    let mut out = Vec::with_capacity(detections.len());

    for index in score_order(detections.iter().map(|d| d.score)) {
        let d = &detections[index];
        let dc = d.bbox.to_corner();
        let ious: Vec<f64> = gts.iter().map(|g| iou(&dc, g)).collect();
        let same_class = best_gt(&ious, &gt_matched, iou_threshold, |g| gt_classes[g] == d.class_id);
        let (matched, verdict) = match mode {
            MatchMode::VocStandard => match same_class {
                Some(m) => (Some(m), Verdict::TruePositive),
                None => (None, Verdict::FalsePositive),
            },
            MatchMode::PaperLiteral => match same_class {
                Some(m) => (Some(m), Verdict::TruePositive),
                None => match best_gt(&ious, &gt_matched, iou_threshold, |_| true) {
                    Some(m) => {
                        gt_misclassified[m.0] = true;
                        (Some(m), Verdict::FalsePositive)
                    }
                    None => (None, Verdict::Discarded),
                },
            },
        };
        if let Some((g, _)) = matched {
            gt_matched[g] = true;
        }
        out.push(DetectionMatch {
            index,
            class_id: d.class_id,
            score: d.score,
            matched_gt: matched.map(|m| m.0),
            iou: matched.map_or(0.0, |m| m.1),
            verdict,
        });
    }
    Ok(MatchOutcome {
        mode,
        detections: out,
        gt_classes,
        gt_matched,
        gt_misclassified,
    })
}

/// One point of a precision/recall curve, taken after including every detection
/// scoring at least `score`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub score: f64,
}

/// Sorts `(score, is_tp)` records by descending score; ties keep their input order.
fn sorted_records(records: &[(f64, bool)]) -> Vec<(f64, bool)> {
    score_order(records.iter().map(|r| r.0))
        .into_iter()
        .map(|i| records[i])
        .collect()
}

pub fn pr_curve(records: &[(f64, bool)], num_gt: usize) -> Vec<PrPoint> {
    if num_gt == 0 {
        return Vec::new();
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    sorted_records(records)
        .into_iter()
        .map(|(score, is_tp)| {
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            PrPoint {
                recall: tp as f64 / num_gt as f64,
                precision: tp as f64 / (tp + fp) as f64,
                score,
            }
        })
        .collect()
}

/// Area under the precision envelope for one class, from pooled
/// `(score, is_true_positive)` records. `None` when the class has no ground truth.
pub fn average_precision(records: &[(f64, bool)], num_gt: usize, interpolation: Interpolation) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let curve = pr_curve(records, num_gt);
    let ap = match interpolation {
        Interpolation::AllPoint => {
            let mut rec = Vec::with_capacity(curve.len() + 2);
            let mut prec = Vec::with_capacity(curve.len() + 2);
            rec.push(0.0);
            prec.push(0.0);
            for p in &curve {
                rec.push(p.recall);
                prec.push(p.precision);
            }
            rec.push(1.0);
            prec.push(0.0);
            for i in (0..prec.len() - 1).rev() {
                prec[i] = prec[i].max(prec[i + 1]);
            }
            (0..rec.len() - 1)
                .filter(|&i| rec[i + 1] != rec[i])
                .map(|i| (rec[i + 1] - rec[i]) * prec[i + 1])
                .sum()
        }
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let r = t as f64 / 10.0;
                    curve
                        .iter()
                        .filter(|p| p.recall >= r)
                        .map(|p| p.precision)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    };
    Some(ap.clamp(0.0, 1.0))
}

/// Unweighted mean over classes that have an AP (classes without ground truth are `None`).
pub fn mean_ap(per_class: &[Option<f64>]) -> Result<f64, EvalError> {
    let included: Vec<f64> = per_class.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(EvalError::NoClasses);
    }
    Ok(included.iter().sum::<f64>() / included.len() as f64)
}

/// Mean IoU over true-positive matches; `None` without any.
pub fn average_iou(outcomes: &[MatchOutcome]) -> Option<f64> {
    let ious: Vec<f64> = outcomes
        .iter()
        .flat_map(|o| &o.detections)
        .filter(|d| d.verdict == Verdict::TruePositive)
        .map(|d| d.iou)
        .collect();
    if ious.is_empty() {
        None
    } else {
        Some(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

/// Per-image latency summary in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyStats {
    pub samples: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(mut ms: Vec<f64>) -> Result<Self, EvalError> {
        if ms.is_empty() {
            return Err(EvalError::EmptyTiming);
        }
        ms.sort_by(f64::total_cmp);
        let n = ms.len();
        let median = if n % 2 == 1 {
            ms[n / 2]
        } else {
            (ms[n / 2 - 1] + ms[n / 2]) / 2.0
        };
        Ok(Self {
            samples: n,
            mean_ms: ms.iter().sum::<f64>() / n as f64,
            median_ms: median,
            p95_ms: nearest_rank(&ms, 95.0),
        })
    }
}

/// Nearest-rank percentile of an ascending slice.
pub fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Times `runner` once per image per repeat after `warmup` unrecorded calls.
pub fn timing_harness<T, F>(mut runner: F, images: &[T], warmup: usize, repeats: usize) -> Result<LatencyStats, EvalError>
where
    F: FnMut(&T),
{
    if images.is_empty() || repeats == 0 {
        return Err(EvalError::EmptyTiming);
    }
    for img in images.iter().cycle().take(warmup) {
        runner(img);
    }
    let mut samples = Vec::with_capacity(images.len() * repeats);
    for _ in 0..repeats {
        for img in images {
            let start = Instant::now();
            runner(img);
            samples.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    LatencyStats::from_samples(samples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub interpolation: Interpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: DEFAULT_IOU_THRESHOLDS.to_vec(),
            interpolation: Interpolation::AllPoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassResult {
    pub class_id: usize,
    pub class_name: String,
    pub num_gt: usize,
    pub num_detections: usize,
    /// `None` when the class has no ground truth (excluded from mAP).
    pub ap: Option<f64>,
    pub voc: Counts,
    pub paper: Counts,
    pub pr_curve: Vec<PrPoint>,
}

impl ClassResult {
    pub fn counts(&self, mode: MatchMode) -> Counts {
        match mode {
            MatchMode::VocStandard => self.voc,
            MatchMode::PaperLiteral => self.paper,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdResult {
    pub iou_threshold: f64,
    pub map: Option<f64>,
    pub average_iou: Option<f64>,
    pub excluded_classes: Vec<usize>,
    pub classes: Vec<ClassResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub interpolation: Interpolation,
    pub images: usize,
    pub ground_truths: usize,
    pub detections: usize,
    pub thresholds: Vec<ThresholdResult>,
    pub latency: Option<LatencyStats>,
}

impl EvalReport {
    pub fn map_at(&self, iou_threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .find(|t| (t.iou_threshold - iou_threshold).abs() < 1e-12)
            .and_then(|t| t.map)
    }
}

/// Groups detections by image, in manifest order, rejecting unknown ids and classes.
pub fn group_detections<'a>(
    manifest: &DatasetManifest,
    detections: &'a [Detection],
) -> Result<Vec<Vec<&'a Detection>>, EvalError> {
    let index: BTreeMap<&str, usize> = manifest
        .annotations
        .iter()
        .enumerate()
        .map(|(i, a)| (a.image_id.as_str(), i))
        .collect();
    let c = manifest.schema.num_classes();
    let mut groups = vec![Vec::new(); manifest.len()];
    let mut unknown = std::collections::BTreeSet::new();
    for d in detections {
        if d.class_id >= c {
            return Err(EvalError::ClassOutOfRange {
                class_id: d.class_id,
                num_classes: c,
            });
        }
        match index.get(d.image_id.as_str()) {
            Some(&i) => groups[i].push(d),
            None => {
                unknown.insert(d.image_id.clone());
            }
        }
    }
    if !unknown.is_empty() {
        return Err(EvalError::UnknownImages(unknown.into_iter().collect()));
    }
    Ok(groups)
}

/// Evaluates a detection set against a manifest at every configured IoU threshold.
pub fn evaluate(
    manifest: &DatasetManifest,
    detections: &[Detection],
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    for &t in &config.iou_thresholds {
        check_threshold(t)?;
    }
    let groups = group_detections(manifest, detections)?;
    let c = manifest.schema.num_classes();
    let mut num_gt = vec![0usize; c];
    for l in manifest.annotations.iter().flat_map(|a| &a.boxes) {
        num_gt[l.class_id] += 1;
    }
    let mut num_det = vec![0usize; c];
    for d in detections {
        num_det[d.class_id] += 1;
    }

    let mut thresholds = Vec::with_capacity(config.iou_thresholds.len());
    for &thr in &config.iou_thresholds {
        let mut records: Vec<Vec<(f64, bool)>> = vec![Vec::new(); c];
        let mut voc = vec![Counts::default(); c];
        let mut paper = vec![Counts::default(); c];
        let mut voc_outcomes = Vec::with_capacity(manifest.len());
        for (ann, dets) in manifest.annotations.iter().zip(&groups) {
            let dets: Vec<Detection> = dets.iter().map(|&d| d.clone()).collect();
            let v = match_detections(&dets, ann, thr, MatchMode::VocStandard)?;
            let p = match_detections(&dets, ann, thr, MatchMode::PaperLiteral)?;
            for m in &v.detections {
                records[m.class_id].push((m.score, m.verdict == Verdict::TruePositive));
            }
            for (k, cnt) in v.counts_per_class(c).into_iter().enumerate() {
                voc[k] += cnt;
            }
            for (k, cnt) in p.counts_per_class(c).into_iter().enumerate() {
                paper[k] += cnt;
            }
            voc_outcomes.push(v);
        }
        let classes: Vec<ClassResult> = (0..c)
            .map(|k| ClassResult {
                class_id: k,
                class_name: manifest.schema.name(k).unwrap_or_default().to_owned(),
                num_gt: num_gt[k],
                num_detections: num_det[k],
                ap: average_precision(&records[k], num_gt[k], config.interpolation),
                voc: voc[k],
                paper: paper[k],
                pr_curve: pr_curve(&records[k], num_gt[k]),
            })
            .collect();
        let aps: Vec<Option<f64>> = classes.iter().map(|r| r.ap).collect();
        thresholds.push(ThresholdResult {
            iou_threshold: thr,
            map: mean_ap(&aps).ok(),
            average_iou: average_iou(&voc_outcomes),
            excluded_classes: classes.iter().filter(|r| r.ap.is_none()).map(|r| r.class_id).collect(),
            classes,
        });
    }
    Ok(EvalReport {
        interpolation: config.interpolation,
        images: manifest.len(),
        ground_truths: num_gt.iter().sum(),
        detections: detections.len(),
        thresholds,
        latency: None,
    })
}
