//! Detection maths and evaluation for YOLO-style detectors: box geometry, label
//! and manifest handling, grid target encoding, the multi-part training loss,
//! anchor clustering, non-maximum suppression and mAP evaluation.
//!
//! The default class schema is the four Salat postures.

pub mod anchors;
pub mod dataset;
pub mod encoding;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod oracle;
pub mod postprocess;
pub mod selfcheck;
