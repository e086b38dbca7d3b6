//! YOLO target grids.
//!
//! Two layouts are supported:
//!
//! * **Single-scale (v1)**: an `S × S × (B·5 + C)` tensor. Each cell holds `B` box slots
//!   `(x, y, w, h, confidence)` followed by `C` class probabilities shared by the cell.
//!   Box coordinates are stored image-relative (normalized to the whole image, not to
//!   the cell), which is also the space [`crate::loss`] evaluates in.
//! * **Three-scale (v3)**: one `S_k × S_k × 3·(5 + C)` tensor per scale. Each of the three
//!   anchor slots per cell holds `(tx, ty, tw, th, objectness, classes…)` where the
//!   coordinates are offsets relative to the cell and anchor (see [`offset_encode`]).
//!
//! Every tensor is a flat row-major `Vec<f64>`: row, then column, then slot, then component.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ImageAnnotation;
use crate::geometry::{wh_iou, BBoxCenter};
use crate::postprocess::Detection;

/// Values per box slot in the single-scale layout: `x, y, w, h, confidence`.
pub const V1_BOX_FIELDS: usize = 5;
/// Anchor slots per cell in the three-scale layout.
pub const V3_ANCHORS_PER_SCALE: usize = 3;
/// Number of detection scales in the three-scale layout.
pub const V3_NUM_SCALES: usize = 3;
/// Single-scale grids store centers relative to the image, not to the cell.
pub const V1_COORDS_IMAGE_RELATIVE: bool = true;
/// Objectness threshold used by the darknet YOLOv3 reference for ignoring anchors.
pub const DEFAULT_IGNORE_IOU: f64 = 0.7;

/// Cell-relative centers are clamped this far inside the cell before taking the logit.
const FRACTION_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum EncodeError {
    #[error("grid dimension {name} must be at least 1")]
    ZeroDimension { name: &'static str },
    #[error("two objects fall into cell (row {row}, col {col})")]
    Collision { row: usize, col: usize },
    #[error("value array has length {actual}, expected {expected}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("class id {class_id} out of range for {num_classes} classes")]
    ClassOutOfRange { class_id: usize, num_classes: usize },
    #[error("expected {expected} anchors (3 per scale), got {actual}")]
    AnchorPartition { expected: usize, actual: usize },
    #[error("anchor dimensions must be positive, got ({0}, {1})")]
    BadAnchor(f64, f64),
    #[error("ignore threshold must lie in (0, 1], got {0}")]
    BadIgnoreThreshold(f64),
    #[error("box center ({cx}, {cy}) lies outside cell (row {row}, col {col})")]
    CenterOutsideCell {
        cx: f64,
        cy: f64,
        row: usize,
        col: usize,
    },
    #[error("box size must be positive to take a log-offset")]
    DegenerateBox,
    #[error("malformed grid file: {0}")]
    Format(String),
}

fn nonzero(name: &'static str, v: usize) -> Result<usize, EncodeError> {
    if v == 0 {
        Err(EncodeError::ZeroDimension { name })
    } else {
        Ok(v)
    }
}

/// Shape of the single-scale tensor: `(S, S, B·5 + C)`.
pub fn output_shape_v1(s: usize, b: usize, c: usize) -> Result<(usize, usize, usize), EncodeError> {
    let s = nonzero("S", s)?;
    let b = nonzero("B", b)?;
    let c = nonzero("C", c)?;
    Ok((s, s, b * V1_BOX_FIELDS + c))
}

/// Shape of one scale of the three-scale tensor: `(S, S, 3·(5 + C))`.
pub fn output_shape_v3(s: usize, c: usize) -> Result<(usize, usize, usize), EncodeError> {
    let s = nonzero("S", s)?;
    let c = nonzero("C", c)?;
    Ok((s, s, V3_ANCHORS_PER_SCALE * (5 + c)))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Grid cell `(row, col)` owning a normalized center. Centers on the far edge
/// (`1.0`) are clamped into the last cell.
pub fn cell_of(cx: f64, cy: f64, s: usize) -> (usize, usize) {
    let idx = |v: f64| ((v * s as f64).floor().max(0.0) as usize).min(s - 1);
    (idx(cy), idx(cx))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub s: usize,
    pub b: usize,
    pub c: usize,
}

impl GridDims {
    pub fn new(s: usize, b: usize, c: usize) -> Result<Self, EncodeError> {
        output_shape_v1(s, b, c)?;
        Ok(Self { s, b, c })
    }

    pub fn cell_stride(&self) -> usize {
        self.b * V1_BOX_FIELDS + self.c
    }

    pub fn len(&self) -> usize {
        self.s * self.s * self.cell_stride()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_cells(&self) -> usize {
        self.s * self.s
    }

    pub fn cell_offset(&self, row: usize, col: usize) -> usize {
        (row * self.s + col) * self.cell_stride()
    }

    /// Offset of box slot `j` of cell number `cell` (row-major).
    pub fn slot_offset(&self, cell: usize, j: usize) -> usize {
        cell * self.cell_stride() + j * V1_BOX_FIELDS
    }

    pub fn class_offset(&self, cell: usize) -> usize {
        cell * self.cell_stride() + self.b * V1_BOX_FIELDS
    }

    pub fn check_len(&self, len: usize) -> Result<(), EncodeError> {
        if len != self.len() {
            return Err(EncodeError::ShapeMismatch {
                expected: self.len(),
                actual: len,
            });
        }
        Ok(())
    }
}

/// What to do when a second object lands in an occupied cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CollisionPolicy {
    #[default]
    Strict,
    KeepFirst,
}

/// An object dropped by [`CollisionPolicy::KeepFirst`].
#[derive(Debug, Clone, PartialEq)]
pub struct DroppedObject {
    pub box_index: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetGridV1 {
    pub dims: GridDims,
    pub values: Vec<f64>,
    /// One flag per `(cell, slot)`: true where the slot carries an object.
    pub responsible: Vec<bool>,
}

impl TargetGridV1 {
    pub fn empty(dims: GridDims) -> Self {
        Self {
            dims,
            values: vec![0.0; dims.len()],
            responsible: vec![false; dims.num_cells() * dims.b],
        }
    }

    pub fn is_object_cell(&self, cell: usize) -> bool {
        let b = self.dims.b;
        self.responsible[cell * b..(cell + 1) * b].iter().any(|&r| r)
    }

    /// Ground-truth box of an object cell.
    pub fn truth_box(&self, cell: usize) -> Option<BBoxCenter> {
        let b = self.dims.b;
        let j = self.responsible[cell * b..(cell + 1) * b]
            .iter()
            .position(|&r| r)?;
        let o = self.dims.slot_offset(cell, j);
        let v = &self.values[o..o + 4];
        Some(BBoxCenter::new(v[0], v[1], v[2], v[3]))
    }

    pub fn num_objects(&self) -> usize {
        self.responsible.iter().filter(|&&r| r).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedV1 {
    pub grid: TargetGridV1,
    /// Objects lost to cell collisions (always empty in strict mode).
    pub dropped: Vec<DroppedObject>,
}

/// Encodes an annotation into a single-scale target grid.
///
/// The object's box goes into slot 0 of its cell with confidence 1; the remaining
/// slots stay zero. Which predicted slot ends up responsible is decided by the loss.
pub fn encode_v1(
    annotation: &ImageAnnotation,
    dims: GridDims,
    policy: CollisionPolicy,
) -> Result<EncodedV1, EncodeError> {
    let mut grid = TargetGridV1::empty(dims);
    let mut dropped = Vec::new();
    for (box_index, label) in annotation.boxes.iter().enumerate() {
        if label.class_id >= dims.c {
            return Err(EncodeError::ClassOutOfRange {
                class_id: label.class_id,
                num_classes: dims.c,
            });
        }
        let (row, col) = cell_of(label.bbox.cx, label.bbox.cy, dims.s);
        let cell = row * dims.s + col;
        if grid.is_object_cell(cell) {
            match policy {
                CollisionPolicy::Strict => return Err(EncodeError::Collision { row, col }),
                CollisionPolicy::KeepFirst => {
                    dropped.push(DroppedObject {
                        box_index,
                        row,
                        col,
                    });
                    continue;
                }
            }
        }
        let o = dims.slot_offset(cell, 0);
        let b = &label.bbox;
        grid.values[o..o + V1_BOX_FIELDS].copy_from_slice(&[b.cx, b.cy, b.w, b.h, 1.0]);
        grid.values[dims.class_offset(cell) + label.class_id] = 1.0;
        grid.responsible[cell * dims.b] = true;
    }
    Ok(EncodedV1 { grid, dropped })
}

/// Turns a single-scale prediction tensor into detections.
///
/// Every slot with confidence at or above `confidence_threshold` yields one
/// detection whose class is the argmax of the cell's class vector (lowest index on
/// ties) and whose score is `confidence · max class probability`.
pub fn decode_v1(
    values: &[f64],
    dims: GridDims,
    image_id: &str,
    confidence_threshold: f64,
) -> Result<Vec<Detection>, EncodeError> {
    dims.check_len(values.len())?;
    let mut out = Vec::new();
    for cell in 0..dims.num_cells() {
        let probs = &values[dims.class_offset(cell)..dims.class_offset(cell) + dims.c];
        let (class_id, p) = probs
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, p)| {
                if p > best.1 {
                    (i, p)
                } else {
                    best
                }
            });
        for j in 0..dims.b {
            let o = dims.slot_offset(cell, j);
            let conf = values[o + 4];
            if conf >= confidence_threshold && conf > 0.0 {
                out.push(Detection {
                    image_id: image_id.to_owned(),
                    class_id,
                    score: (conf * p).clamp(0.0, 1.0),
                    bbox: BBoxCenter::new(values[o], values[o + 1], values[o + 2], values[o + 3]),
                });
            }
        }
    }
    Ok(out)
}

/// Anchor-relative box parameters: `tx, ty` are logits of the center's position inside
/// its cell, `tw, th` are log ratios of the box size to the anchor size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetParams {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

fn check_anchor(anchor: (f64, f64)) -> Result<(), EncodeError> {
    if anchor.0 > 0.0 && anchor.1 > 0.0 && anchor.0.is_finite() && anchor.1.is_finite() {
        Ok(())
    } else {
        Err(EncodeError::BadAnchor(anchor.0, anchor.1))
    }
}

/// `cx = (col + σ(tx))/S`, `cy = (row + σ(ty))/S`, `w = pw·e^tw`, `h = ph·e^th`.
pub fn offset_decode(t: &OffsetParams, cell: (usize, usize), s: usize, anchor: (f64, f64)) -> BBoxCenter {
    let (row, col) = cell;
    let s = s as f64;
    BBoxCenter::new(
        (col as f64 + sigmoid(t.tx)) / s,
        (row as f64 + sigmoid(t.ty)) / s,
        anchor.0 * t.tw.exp(),
        anchor.1 * t.th.exp(),
    )
}

/// Inverse of [`offset_decode`]; the center must lie strictly inside `cell`.
pub fn offset_encode(
    b: &BBoxCenter,
    cell: (usize, usize),
    s: usize,
    anchor: (f64, f64),
) -> Result<OffsetParams, EncodeError> {
    check_anchor(anchor)?;
    let (row, col) = cell;
    let fx = b.cx * s as f64 - col as f64;
    let fy = b.cy * s as f64 - row as f64;
    if !(fx > 0.0 && fx < 1.0 && fy > 0.0 && fy < 1.0) {
        return Err(EncodeError::CenterOutsideCell {
            cx: b.cx,
            cy: b.cy,
            row,
            col,
        });
    }
    offset_params(fx, fy, b, anchor)
}

fn offset_params(fx: f64, fy: f64, b: &BBoxCenter, anchor: (f64, f64)) -> Result<OffsetParams, EncodeError> {
    if !(b.w > 0.0 && b.h > 0.0) {
        return Err(EncodeError::DegenerateBox);
    }
    Ok(OffsetParams {
        tx: logit(fx),
        ty: logit(fy),
        tw: (b.w / anchor.0).ln(),
        th: (b.h / anchor.1).ln(),
    })
}

/// Like [`offset_encode`] for the owning cell of the center, with the in-cell
/// position clamped away from the cell border so the logits stay finite.
pub fn offset_encode_clamped(b: &BBoxCenter, s: usize, anchor: (f64, f64)) -> Result<(OffsetParams, (usize, usize)), EncodeError> {
    check_anchor(anchor)?;
    let (row, col) = cell_of(b.cx, b.cy, s);
    let clamp = |v: f64| v.clamp(FRACTION_EPS, 1.0 - FRACTION_EPS);
    let fx = clamp(b.cx * s as f64 - col as f64);
    let fy = clamp(b.cy * s as f64 - row as f64);
    Ok((offset_params(fx, fy, b, anchor)?, (row, col)))
}

/// One detection scale: grid side and its three anchors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub grid: usize,
    pub anchors: [(f64, f64); V3_ANCHORS_PER_SCALE],
}

/// Nine anchors distributed over three scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorScales {
    pub scales: [ScaleSpec; V3_NUM_SCALES],
}

impl AnchorScales {
    /// Area-tertile partition: the three largest anchors go to the coarsest grid,
    /// the three smallest to the finest. `grids` may be given in any order.
    pub fn from_area_tertiles(anchors: &[(f64, f64)], grids: [usize; V3_NUM_SCALES]) -> Result<Self, EncodeError> {
        let expected = V3_NUM_SCALES * V3_ANCHORS_PER_SCALE;
        if anchors.len() != expected {
            return Err(EncodeError::AnchorPartition {
                expected,
                actual: anchors.len(),
            });
        }
        for &a in anchors {
            check_anchor(a)?;
        }
        for g in grids {
            nonzero("S", g)?;
        }
        let mut sorted = anchors.to_vec();
        sorted.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
        let mut grids_desc = grids;
        grids_desc.sort_unstable_by(|a, b| b.cmp(a));
        // finest grid (largest S) gets the smallest anchors
        let scales = std::array::from_fn(|k| ScaleSpec {
            grid: grids_desc[k],
            anchors: std::array::from_fn(|a| sorted[k * V3_ANCHORS_PER_SCALE + a]),
        });
        Ok(Self { scales })
    }

    pub fn all_anchors(&self) -> impl Iterator<Item = (usize, usize, (f64, f64))> + '_ {
        self.scales.iter().enumerate().flat_map(|(k, sc)| {
            sc.anchors.iter().enumerate().map(move |(a, &wh)| (k, a, wh))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objectness {
    Negative,
    Positive,
    /// Excluded from the no-object penalty.
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTargets {
    pub spec: ScaleSpec,
    pub num_classes: usize,
    pub values: Vec<f64>,
    /// One entry per `(cell, anchor)`, row-major.
    pub objectness: Vec<Objectness>,
}

impl ScaleTargets {
    fn new(spec: ScaleSpec, num_classes: usize) -> Self {
        let slots = spec.grid * spec.grid * V3_ANCHORS_PER_SCALE;
        Self {
            spec,
            num_classes,
            values: vec![0.0; slots * (5 + num_classes)],
            objectness: vec![Objectness::Negative; slots],
        }
    }

    pub fn slot_index(&self, row: usize, col: usize, anchor: usize) -> usize {
        (row * self.spec.grid + col) * V3_ANCHORS_PER_SCALE + anchor
    }

    pub fn slot_values(&self, slot: usize) -> &[f64] {
        let stride = 5 + self.num_classes;
        &self.values[slot * stride..(slot + 1) * stride]
    }

    fn slot_values_mut(&mut self, slot: usize) -> &mut [f64] {
        let stride = 5 + self.num_classes;
        &mut self.values[slot * stride..(slot + 1) * stride]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetGridV3 {
    pub scales: Vec<ScaleTargets>,
}

impl TargetGridV3 {
    pub fn count(&self, kind: Objectness) -> usize {
        self.scales
            .iter()
            .flat_map(|s| &s.objectness)
            .filter(|&&o| o == kind)
            .count()
    }

    pub fn total_values(&self) -> usize {
        self.scales.iter().map(|s| s.values.len()).sum()
    }
}

/// Builds three-scale training targets.
///
/// Each object is assigned the anchor with the highest shape IoU across all nine
/// anchors (if that slot is already taken by an earlier object, the next best free
/// anchor is used, so every object owns exactly one positive slot). Other anchors
/// of the same cell whose shape IoU with the object exceeds `ignore_iou` are marked
/// [`Objectness::Ignore`]. Class targets are multi-hot.
pub fn encode_v3_targets(
    annotation: &ImageAnnotation,
    anchors: &AnchorScales,
    num_classes: usize,
    ignore_iou: f64,
) -> Result<TargetGridV3, EncodeError> {
    nonzero("C", num_classes)?;
    if !(ignore_iou > 0.0 && ignore_iou <= 1.0) {
        return Err(EncodeError::BadIgnoreThreshold(ignore_iou));
    }
    let mut scales: Vec<ScaleTargets> = anchors
        .scales
        .iter()
        .map(|&spec| ScaleTargets::new(spec, num_classes))
        .collect();

    for label in &annotation.boxes {
        if label.class_id >= num_classes {
            return Err(EncodeError::ClassOutOfRange {
                class_id: label.class_id,
                num_classes,
            });
        }
        let b = &label.bbox;
        let mut ranked: Vec<(usize, usize, (f64, f64), f64)> = anchors
            .all_anchors()
            .map(|(k, a, wh)| (k, a, wh, wh_iou((b.w, b.h), wh)))
            .collect();
        // stable: equal IoUs keep scale/anchor order
        ranked.sort_by(|x, y| y.3.total_cmp(&x.3));

        let mut positive = None;
        for &(k, a, wh, _) in &ranked {
            let sc = &scales[k];
            let (row, col) = cell_of(b.cx, b.cy, sc.spec.grid);
            let slot = sc.slot_index(row, col, a);
            if sc.objectness[slot] != Objectness::Positive {
                positive = Some((k, slot, wh));
                break;
            }
        }
        // more objects than slots in this image: nothing left to assign
        let Some((k, slot, wh)) = positive else {
            continue;
        };
        let grid = scales[k].spec.grid;
        let (t, _) = offset_encode_clamped(b, grid, wh)?;
        let sc = &mut scales[k];
        sc.objectness[slot] = Objectness::Positive;
        let v = sc.slot_values_mut(slot);
        v[..5].copy_from_slice(&[t.tx, t.ty, t.tw, t.th, 1.0]);
        v[5 + label.class_id] = 1.0;

        for &(k2, a2, _, iou) in &ranked {
            if iou <= ignore_iou {
                break;
            }
            let sc = &mut scales[k2];
            let (row, col) = cell_of(b.cx, b.cy, sc.spec.grid);
            let s2 = sc.slot_index(row, col, a2);
            if sc.objectness[s2] == Objectness::Negative {
                sc.objectness[s2] = Objectness::Ignore;
            }
        }
    }
    Ok(TargetGridV3 { scales })
}

/// Header of the binary grid format: a single JSON line followed by
/// `len` little-endian `f32` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub version: u32,
    #[serde(rename = "S", skip_serializing_if = "Option::is_none", default)]
    pub s: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scales: Option<Vec<usize>>,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub len: usize,
}

pub const GRID_FORMAT_VERSION: u32 = 1;

impl GridHeader {
    pub fn v1(dims: GridDims) -> Self {
        Self {
            version: GRID_FORMAT_VERSION,
            s: Some(dims.s),
            scales: None,
            b: dims.b,
            c: dims.c,
            len: dims.len(),
        }
    }

    pub fn v3(grids: &TargetGridV3) -> Self {
        Self {
            version: GRID_FORMAT_VERSION,
            s: None,
            scales: Some(grids.scales.iter().map(|s| s.spec.grid).collect()),
            b: V3_ANCHORS_PER_SCALE,
            c: grids.scales.first().map_or(0, |s| s.num_classes),
            len: grids.total_values(),
        }
    }

    fn expected_len(&self) -> Option<usize> {
        match (&self.s, &self.scales) {
            (Some(s), None) => Some(s * s * (self.b * V1_BOX_FIELDS + self.c)),
            (None, Some(sc)) => Some(sc.iter().map(|s| s * s * self.b * (5 + self.c)).sum()),
            _ => None,
        }
    }
}

pub fn write_grid(header: &GridHeader, values: &[f64]) -> Result<Vec<u8>, EncodeError> {
    if header.expected_len() != Some(values.len()) || header.len != values.len() {
        return Err(EncodeError::ShapeMismatch {
            expected: header.len,
            actual: values.len(),
        });
    }
    let mut out = serde_json::to_vec(header).map_err(|e| EncodeError::Format(e.to_string()))?;
    out.push(b'\n');
    out.reserve(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn read_grid(bytes: &[u8]) -> Result<(GridHeader, Vec<f32>), EncodeError> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| EncodeError::Format("missing header line".into()))?;
    let header: GridHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| EncodeError::Format(e.to_string()))?;
    if header.version != GRID_FORMAT_VERSION {
        return Err(EncodeError::Format(format!("unsupported version {}", header.version)));
    }
    if header.expected_len() != Some(header.len) {
        return Err(EncodeError::Format("header len disagrees with shape".into()));
    }
    let body = &bytes[nl + 1..];
    if body.len() != header.len * 4 {
        return Err(EncodeError::ShapeMismatch {
            expected: header.len * 4,
            actual: body.len(),
        });
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Label;
    use proptest::prelude::*;

    fn ann(boxes: Vec<(usize, f64, f64, f64, f64)>) -> ImageAnnotation {
        ImageAnnotation::new(
            "img",
            boxes
                .into_iter()
                .map(|(c, x, y, w, h)| Label::new(c, BBoxCenter::new(x, y, w, h)))
                .collect(),
        )
    }

    #[test]
    fn shapes() {
        assert_eq!(output_shape_v1(7, 2, 4), Ok((7, 7, 14)));
        assert_eq!(output_shape_v1(7, 2, 20), Ok((7, 7, 30)));
        assert_eq!(output_shape_v1(1, 1, 1), Ok((1, 1, 6)));
        assert_eq!(output_shape_v3(13, 4), Ok((13, 13, 27)));
        assert_eq!(output_shape_v3(13, 80), Ok((13, 13, 255)));
        assert_eq!(output_shape_v3(1, 1), Ok((1, 1, 18)));
        assert!(output_shape_v1(0, 2, 4).is_err());
        assert!(output_shape_v1(7, 0, 4).is_err());
        assert!(output_shape_v3(7, 0).is_err());
    }

    /// Exhaustive containment oracle: the cell whose half-open interval holds the center.
    fn containing_cell(cx: f64, cy: f64, s: usize) -> (usize, usize) {
        let find = |v: f64| {
            (0..s)
                .find(|&i| v >= i as f64 / s as f64 && v < (i + 1) as f64 / s as f64)
                .unwrap_or(s - 1)
        };
        (find(cy), find(cx))
    }

    #[test]
    fn cell_assignment() {
        assert_eq!(cell_of(0.3, 0.6, 2), (1, 0));
        assert_eq!(containing_cell(0.3, 0.6, 2), (1, 0));
        assert_eq!(cell_of(1.0, 1.0, 7), (6, 6));
        for i in 0..=100 {
            for s in [1, 2, 3, 7, 13] {
                let v = i as f64 / 100.0;
                assert_eq!(cell_of(v, 1.0 - v, s), containing_cell(v, 1.0 - v, s));
            }
        }
    }

    #[test]
    fn strict_collision_names_cell() {
        let a = ann(vec![(0, 0.1, 0.1, 0.1, 0.1), (1, 0.12, 0.11, 0.2, 0.2)]);
        let dims = GridDims::new(2, 2, 4).unwrap();
        assert_eq!(
            encode_v1(&a, dims, CollisionPolicy::Strict),
            Err(EncodeError::Collision { row: 0, col: 0 })
        );
        let enc = encode_v1(&a, dims, CollisionPolicy::KeepFirst).unwrap();
        assert_eq!(enc.dropped, vec![DroppedObject { box_index: 1, row: 0, col: 0 }]);
        assert_eq!(enc.grid.num_objects(), 1);
    }

    #[test]
    fn decode_all_zero_and_single_cell() {
        let dims = GridDims::new(3, 2, 4).unwrap();
        assert!(decode_v1(&vec![0.0; dims.len()], dims, "x", 0.5).unwrap().is_empty());

        let dims = GridDims::new(1, 1, 4).unwrap();
        let v = [0.5, 0.5, 0.2, 0.2, 0.9, 0.1, 0.7, 0.1, 0.1];
        let d = decode_v1(&v, dims, "x", 0.5).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].class_id, 1);
        assert!((d[0].score - 0.63).abs() < 1e-12);
        assert!(decode_v1(&v[..8], dims, "x", 0.5).is_err());
    }

    #[test]
    fn encode_decode_roundtrip_example() {
        let a = ann(vec![(2, 0.3, 0.6, 0.2, 0.3), (0, 0.8, 0.1, 0.1, 0.05)]);
        let dims = GridDims::new(2, 2, 4).unwrap();
        let g = encode_v1(&a, dims, CollisionPolicy::Strict).unwrap().grid;
        let mut d = decode_v1(&g.values, dims, "img", 0.5).unwrap();
        d.sort_by(|a, b| a.bbox.cx.total_cmp(&b.bbox.cx));
        assert_eq!(d[0].class_id, 2);
        assert_eq!(d[0].bbox, a.boxes[0].bbox);
        assert_eq!(d[1].class_id, 0);
        assert_eq!(d[1].score, 1.0);
    }

    #[test]
    fn offset_examples() {
        let b = offset_decode(
            &OffsetParams { tx: 0.0, ty: 0.0, tw: 0.0, th: 0.0 },
            (0, 0),
            1,
            (0.3, 0.5),
        );
        assert_eq!(b, BBoxCenter::new(0.5, 0.5, 0.3, 0.5));
        let b = offset_decode(
            &OffsetParams { tx: 0.0, ty: 0.0, tw: 2f64.ln(), th: 0.0 },
            (0, 0),
            1,
            (0.2, 0.5),
        );
        assert!((b.w - 0.4).abs() < 1e-15);
        assert!(offset_encode(&BBoxCenter::new(0.5, 0.5, 0.1, 0.1), (0, 0), 2, (0.1, 0.1)).is_err());
        assert!(offset_encode(&BBoxCenter::new(0.2, 0.2, 0.1, 0.1), (0, 0), 2, (0.0, 0.1)).is_err());
    }

    fn nine_anchors() -> Vec<(f64, f64)> {
        vec![
            (0.02, 0.03), (0.04, 0.07), (0.08, 0.06),
            (0.07, 0.15), (0.15, 0.11), (0.14, 0.29),
            (0.28, 0.22), (0.38, 0.48), (0.9, 0.78),
        ]
    }

    #[test]
    fn area_tertile_partition() {
        let sc = AnchorScales::from_area_tertiles(&nine_anchors(), [52, 13, 26]).unwrap();
        assert_eq!(sc.scales[0].grid, 52);
        assert_eq!(sc.scales[0].anchors[0], (0.02, 0.03));
        assert_eq!(sc.scales[2].grid, 13);
        assert_eq!(sc.scales[2].anchors[2], (0.9, 0.78));
        assert_eq!(
            AnchorScales::from_area_tertiles(&nine_anchors()[..8], [52, 26, 13]),
            Err(EncodeError::AnchorPartition { expected: 9, actual: 8 })
        );
    }

    /// Brute-force shape IoU over every anchor slot, independent of the encoder's ranking.
    fn brute_force_counts(b: (f64, f64), anchors: &[(f64, f64)], thr: f64) -> (usize, usize) {
        let ious: Vec<f64> = anchors.iter().map(|&a| wh_iou(b, a)).collect();
        let best = ious.iter().cloned().fold(f64::MIN, f64::max);
        let best_idx = ious.iter().position(|&v| v == best).unwrap();
        let ignores = ious.iter().enumerate().filter(|&(i, &v)| i != best_idx && v > thr).count();
        (1, ignores)
    }

    #[test]
    fn v3_single_clear_winner() {
        // box 0.1x0.1; one anchor at 0.1x0.09 (IoU 0.9), others far away
        let anchors = vec![
            (0.1, 0.09), (0.5, 0.5), (0.6, 0.6),
            (0.7, 0.7), (0.8, 0.8), (0.9, 0.9),
            (0.01, 0.01), (0.02, 0.02), (0.012, 0.012),
        ];
        let sc = AnchorScales::from_area_tertiles(&anchors, [52, 26, 13]).unwrap();
        let t = encode_v3_targets(&ann(vec![(1, 0.4, 0.4, 0.1, 0.1)]), &sc, 4, 0.7).unwrap();
        assert_eq!(brute_force_counts((0.1, 0.1), &anchors, 0.7), (1, 0));
        assert_eq!(t.count(Objectness::Positive), 1);
        assert_eq!(t.count(Objectness::Ignore), 0);
    }

    #[test]
    fn v3_second_best_ignored() {
        // best 0.1x0.1 (IoU 1), second 0.1x0.075 (IoU 0.75)
        let anchors = vec![
            (0.1, 0.1), (0.1, 0.075), (0.6, 0.6),
            (0.7, 0.7), (0.8, 0.8), (0.9, 0.9),
            (0.01, 0.01), (0.02, 0.02), (0.012, 0.012),
        ];
        assert!((wh_iou((0.1, 0.1), (0.1, 0.075)) - 0.75).abs() < 1e-12);
        let sc = AnchorScales::from_area_tertiles(&anchors, [52, 26, 13]).unwrap();
        let t = encode_v3_targets(&ann(vec![(0, 0.4, 0.4, 0.1, 0.1)]), &sc, 4, 0.7).unwrap();
        assert_eq!(brute_force_counts((0.1, 0.1), &anchors, 0.7), (1, 1));
        assert_eq!(t.count(Objectness::Positive), 1);
        assert_eq!(t.count(Objectness::Ignore), 1);
        let pos_scale = t.scales.iter().find(|s| s.objectness.contains(&Objectness::Positive)).unwrap();
        let slot = pos_scale.objectness.iter().position(|&o| o == Objectness::Positive).unwrap();
        let v = pos_scale.slot_values(slot);
        assert_eq!(v[4], 1.0);
        assert_eq!(&v[5..], &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn v3_empty_annotation() {
        let sc = AnchorScales::from_area_tertiles(&nine_anchors(), [13, 26, 52]).unwrap();
        let t = encode_v3_targets(&ann(vec![]), &sc, 4, 0.7).unwrap();
        assert_eq!(t.count(Objectness::Positive), 0);
        assert_eq!(t.count(Objectness::Ignore), 0);
        assert_eq!(t.total_values(), (13 * 13 + 26 * 26 + 52 * 52) * 3 * 9);
        assert!(encode_v3_targets(&ann(vec![]), &sc, 4, 0.0).is_err());
    }

    #[test]
    fn v3_colliding_objects_each_get_a_slot() {
        let sc = AnchorScales::from_area_tertiles(&nine_anchors(), [1, 1, 1]).unwrap();
        let boxes = (0..9).map(|i| (i % 4, 0.5, 0.5, 0.1, 0.1)).collect();
        let t = encode_v3_targets(&ann(boxes), &sc, 4, 0.7).unwrap();
        assert_eq!(t.count(Objectness::Positive), 9);
    }

    #[test]
    fn grid_file_roundtrip_and_errors() {
        let dims = GridDims::new(2, 2, 4).unwrap();
        let a = ann(vec![(1, 0.3, 0.6, 0.25, 0.5)]);
        let g = encode_v1(&a, dims, CollisionPolicy::Strict).unwrap().grid;
        let bytes = write_grid(&GridHeader::v1(dims), &g.values).unwrap();
        let (h, vals) = read_grid(&bytes).unwrap();
        assert_eq!(h, GridHeader::v1(dims));
        assert_eq!(vals.len(), dims.len());
        for (a, b) in vals.iter().zip(&g.values) {
            assert!((*a as f64 - b).abs() < 1e-7);
        }
        assert!(read_grid(&bytes[..bytes.len() - 1]).is_err());
        assert!(read_grid(b"no newline").is_err());
        assert!(write_grid(&GridHeader::v1(dims), &g.values[1..]).is_err());
    }

    fn collision_free(n: usize, s: usize) -> impl Strategy<Value = Vec<(usize, f64, f64, f64, f64)>> {
        proptest::sample::subsequence((0..s * s).collect::<Vec<_>>(), 0..=n.min(s * s)).prop_flat_map(
            move |cells| {
                let k = cells.len();
                (
                    Just(cells),
                    proptest::collection::vec((0usize..4, 0.01..0.99f64, 0.01..0.99f64, 0.0..=1.0f64, 0.0..=1.0f64), k),
                )
                    .prop_map(move |(cells, rest)| {
                        cells
                            .into_iter()
                            .zip(rest)
                            .map(|(cell, (c, fx, fy, w, h))| {
                                let (row, col) = (cell / s, cell % s);
                                (c, (col as f64 + fx) / s as f64, (row as f64 + fy) / s as f64, w, h)
                            })
                            .collect()
                    })
            },
        )
    }

    proptest! {
        #[test]
        fn v1_roundtrip(boxes in collision_free(8, 4)) {
            let a = ann(boxes.clone());
            let dims = GridDims::new(4, 2, 4).unwrap();
            let g = encode_v1(&a, dims, CollisionPolicy::Strict).unwrap().grid;
            prop_assert_eq!(g.num_objects(), boxes.len());
            let confs: usize = (0..dims.num_cells())
                .flat_map(|c| (0..dims.b).map(move |j| (c, j)))
                .filter(|&(c, j)| g.values[dims.slot_offset(c, j) + 4] == 1.0)
                .count();
            prop_assert_eq!(confs, boxes.len());
            let d = decode_v1(&g.values, dims, "img", 0.5).unwrap();
            prop_assert_eq!(d.len(), boxes.len());
            for label in &a.boxes {
                let hit = d.iter().find(|x| x.bbox == label.bbox).unwrap();
                prop_assert_eq!(hit.class_id, label.class_id);
            }
        }

        #[test]
        fn offset_inverse(row in 0usize..7, col in 0usize..7, fx in 0.001..0.999f64, fy in 0.001..0.999f64,
                          w in 0.01..1.0f64, h in 0.01..1.0f64, pw in 0.01..1.0f64, ph in 0.01..1.0f64) {
            let s = 7;
            let b = BBoxCenter::new((col as f64 + fx) / s as f64, (row as f64 + fy) / s as f64, w, h);
            let t = offset_encode(&b, (row, col), s, (pw, ph)).unwrap();
            let back = offset_decode(&t, (row, col), s, (pw, ph));
            prop_assert!((back.cx - b.cx).abs() < 1e-9);
            prop_assert!((back.cy - b.cy).abs() < 1e-9);
            prop_assert!((back.w - b.w).abs() < 1e-9);
            prop_assert!((back.h - b.h).abs() < 1e-9);
        }

        #[test]
        fn offset_decode_stays_in_cell(row in 0usize..13, col in 0usize..13, tx in -30.0..30.0f64, ty in -30.0..30.0f64) {
            let s = 13;
            let b = offset_decode(&OffsetParams { tx, ty, tw: 0.0, th: 0.0 }, (row, col), s, (0.1, 0.1));
            prop_assert!(b.cx >= col as f64 / s as f64 && b.cx <= (col + 1) as f64 / s as f64);
            prop_assert!(b.cy >= row as f64 / s as f64 && b.cy <= (row + 1) as f64 / s as f64);
        }
    }
}
