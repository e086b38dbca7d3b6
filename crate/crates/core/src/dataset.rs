//! Ground-truth annotation sets in the darknet label format.
//!
//! A label file holds one object per line as `class_id cx cy w h` with coordinates
//! normalized to the image size. A [`DatasetManifest`] collects the labels of many
//! images together with the [`ClassSchema`] they refer to.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBoxCenter;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid manifest JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error("cannot split an empty manifest")]
    EmptyManifest,
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("class schema must contain at least one class")]
    EmptySchema,
}

/// Ordered class names; the position of a name is its class id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSchema {
    names: Vec<String>,
}

/// The four Salat postures, paired with their English gloss.
pub const SALAT_POSTURES: [(&str, &str); 4] = [
    ("Qiyam", "Standing"),
    ("Ruku", "Bowing"),
    ("Sujud", "Prostrating"),
    ("Julus", "Sitting"),
];

impl Default for ClassSchema {
    fn default() -> Self {
        Self {
            names: SALAT_POSTURES
                .iter()
                .map(|(name, gloss)| format!("{name} ({gloss})"))
                .collect(),
        }
    }
}

impl ClassSchema {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, DatasetError> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(DatasetError::EmptySchema);
        }
        let unique: BTreeSet<&str> = names.iter().map(String::as_str).collect();
        if unique.len() != names.len() {
            return Err(DatasetError::Invalid("duplicate class name".into()));
        }
        Ok(Self { names })
    }

    /// Parses a `classes.txt` sidecar: one name per line, blank lines skipped.
    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_owned),
        )
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::parse(&read_text(path)?)
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, class_id: usize) -> Option<&str> {
        self.names.get(class_id).map(String::as_str)
    }
}

/// One annotated object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Label {
    pub class_id: usize,
    pub bbox: BBoxCenter,
}

impl Label {
    pub fn new(class_id: usize, bbox: BBoxCenter) -> Self {
        Self { class_id, bbox }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageAnnotation {
    pub image_id: String,
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub boxes: Vec<Label>,
}

impl ImageAnnotation {
    pub fn new(image_id: impl Into<String>, boxes: Vec<Label>) -> Self {
        Self {
            image_id: image_id.into(),
            width: None,
            height: None,
            boxes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub schema: ClassSchema,
    pub annotations: Vec<ImageAnnotation>,
}

fn check_label_box(bbox: &BBoxCenter) -> Result<(), String> {
    for (name, v) in [("cx", bbox.cx), ("cy", bbox.cy)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(format!("{name} = {v} lies outside [0, 1]"));
        }
    }
    for (name, v) in [("w", bbox.w), ("h", bbox.h)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(format!("{name} = {v} lies outside [0, 1]"));
        }
    }
    Ok(())
}

/// Parses the text of one darknet label file.
pub fn parse_label_file(text: &str, schema: &ClassSchema) -> Result<Vec<Label>, DatasetError> {
    let mut labels = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |message: String| DatasetError::Parse { line, message };
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", tokens.len())));
        }
        let class_id: usize = tokens[0]
            .parse()
            .map_err(|_| err(format!("invalid class id {:?}", tokens[0])))?;
        if class_id >= schema.num_classes() {
            return Err(err(format!(
                "class id {class_id} out of range for {} classes",
                schema.num_classes()
            )));
        }
        let mut coords = [0.0f64; 4];
        for (slot, tok) in coords.iter_mut().zip(&tokens[1..]) {
            *slot = tok
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("invalid coordinate {tok:?}")))?;
        }
        let bbox = BBoxCenter::new(coords[0], coords[1], coords[2], coords[3]);
        check_label_box(&bbox).map_err(err)?;
        labels.push(Label::new(class_id, bbox));
    }
    Ok(labels)
}

/// Writes labels back to darknet text with six decimal places.
pub fn serialize_labels(labels: &[Label]) -> String {
    let mut out = String::new();
    for l in labels {
        let b = &l.bbox;
        let _ = writeln!(
            out,
            "{} {:.6} {:.6} {:.6} {:.6}",
            l.class_id, b.cx, b.cy, b.w, b.h
        );
    }
    out
}

fn read_text(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Serialize, Deserialize)]
struct BoxRecord {
    class: usize,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    image_id: String,
    #[serde(default)]
    width: Option<u32>,
    #[serde(default)]
    height: Option<u32>,
    #[serde(default)]
    boxes: Vec<BoxRecord>,
}

impl DatasetManifest {
    /// Builds a manifest and checks every invariant.
    pub fn new(
        schema: ClassSchema,
        annotations: Vec<ImageAnnotation>,
    ) -> Result<Self, DatasetError> {
        let manifest = Self {
            schema,
            annotations,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let c = self.schema.num_classes();
        let mut seen = BTreeSet::new();
        for ann in &self.annotations {
            if !seen.insert(ann.image_id.as_str()) {
                return Err(DatasetError::Invalid(format!(
                    "duplicate image_id {:?}",
                    ann.image_id
                )));
            }
            if ann.width == Some(0) || ann.height == Some(0) {
                return Err(DatasetError::Invalid(format!(
                    "image {:?}: width and height must be positive",
                    ann.image_id
                )));
            }
            for (i, label) in ann.boxes.iter().enumerate() {
                if label.class_id >= c {
                    return Err(DatasetError::Invalid(format!(
                        "image {:?} box {i}: class id {} out of range for {c} classes",
                        ann.image_id, label.class_id
                    )));
                }
                check_label_box(&label.bbox).map_err(|m| {
                    DatasetError::Invalid(format!("image {:?} box {i}: {m}", ann.image_id))
                })?;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageAnnotation> {
        self.annotations.iter().find(|a| a.image_id == image_id)
    }

    /// Parses the manifest JSON: an array of
    /// `{image_id, width, height, boxes: [{class, cx, cy, w, h}]}`.
    pub fn from_json(text: &str, schema: ClassSchema) -> Result<Self, DatasetError> {
        let records: Vec<ImageRecord> = serde_json::from_str(text)?;
        let annotations = records
            .into_iter()
            .map(|r| ImageAnnotation {
                image_id: r.image_id,
                width: r.width,
                height: r.height,
                boxes: r
                    .boxes
                    .into_iter()
                    .map(|b| Label::new(b.class, BBoxCenter::new(b.cx, b.cy, b.w, b.h)))
                    .collect(),
            })
            .collect();
        Self::new(schema, annotations)
    }

    pub fn to_json(&self) -> String {
        let records: Vec<ImageRecord> = self
            .annotations
            .iter()
            .map(|a| ImageRecord {
                image_id: a.image_id.clone(),
                width: a.width,
                height: a.height,
                boxes: a
                    .boxes
                    .iter()
                    .map(|l| BoxRecord {
                        class: l.class_id,
                        cx: l.bbox.cx,
                        cy: l.bbox.cy,
                        w: l.bbox.w,
                        h: l.bbox.h,
                    })
                    .collect(),
            })
            .collect();
        serde_json::to_string_pretty(&records).expect("manifest records always serialize")
    }

    pub fn load(path: &Path, schema: ClassSchema) -> Result<Self, DatasetError> {
        Self::from_json(&read_text(path)?, schema)
    }

    /// Builds a manifest from a directory of `*.txt` label files; the file stem
    /// becomes the image id. Files are read in name order.
    pub fn from_label_dir(dir: &Path, schema: ClassSchema) -> Result<Self, DatasetError> {
        let io = |source| DatasetError::Io {
            path: dir.to_path_buf(),
            source,
        };
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt") && p.is_file())
            .filter(|p| p.file_name().is_some_and(|n| n != "classes.txt"))
            .collect();
        files.sort();
        let mut annotations = Vec::with_capacity(files.len());
        for path in files {
            let text = read_text(&path)?;
            let boxes = parse_label_file(&text, &schema).map_err(|e| match e {
                DatasetError::Parse { line, message } => DatasetError::Parse {
                    line,
                    message: format!("{}: {message}", path.display()),
                },
                other => other,
            })?;
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            annotations.push(ImageAnnotation::new(stem, boxes));
        }
        Self::new(schema, annotations)
    }

    fn with_annotations(&self, annotations: Vec<ImageAnnotation>) -> Self {
        Self {
            schema: self.schema.clone(),
            annotations,
        }
    }
}

/// Image-level seeded split. The training side gets `floor(N * train_fraction)` images.
pub fn split_dataset(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), DatasetError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::BadFraction(train_fraction));
    }
    if manifest.is_empty() {
        return Err(DatasetError::EmptyManifest);
    }
    let n = manifest.len();
    let n_train = (n as f64 * train_fraction).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| -> Vec<ImageAnnotation> {
        idx.iter().map(|&i| manifest.annotations[i].clone()).collect()
    };
    Ok((
        manifest.with_annotations(pick(&order[..n_train])),
        manifest.with_annotations(pick(&order[n_train..])),
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetStats {
    pub images: usize,
    pub per_class: Vec<usize>,
}

impl DatasetStats {
    pub fn total_instances(&self) -> usize {
        self.per_class.iter().sum()
    }
}

impl std::ops::Add for DatasetStats {
    type Output = DatasetStats;

    fn add(self, rhs: Self) -> Self {
        let n = self.per_class.len().max(rhs.per_class.len());
        let get = |v: &[usize], i: usize| v.get(i).copied().unwrap_or(0);
        DatasetStats {
            images: self.images + rhs.images,
            per_class: (0..n)
                .map(|i| get(&self.per_class, i) + get(&rhs.per_class, i))
                .collect(),
        }
    }
}

pub fn dataset_stats(manifest: &DatasetManifest) -> DatasetStats {
    let mut per_class = vec![0usize; manifest.schema.num_classes()];
    for label in manifest.annotations.iter().flat_map(|a| &a.boxes) {
        per_class[label.class_id] += 1;
    }
    DatasetStats {
        images: manifest.len(),
        per_class,
    }
}

/// Generates a synthetic manifest with exactly `images` images and
/// `class_counts[c]` boxes of class `c`, spread round-robin over the images.
/// Box geometry is random but always valid. Used as a fixture for the
/// statistics and evaluation pipelines where real imagery is not available.
pub fn synthesize_manifest(
    schema: ClassSchema,
    images: usize,
    class_counts: &[usize],
    seed: u64,
    id_prefix: &str,
) -> Result<DatasetManifest, DatasetError> {
    if class_counts.len() != schema.num_classes() {
        return Err(DatasetError::Invalid(format!(
            "{} class counts given for {} classes",
            class_counts.len(),
            schema.num_classes()
        )));
    }
    let total: usize = class_counts.iter().sum();
    if images == 0 && total > 0 {
        return Err(DatasetError::Invalid("boxes requested but no images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut annotations: Vec<ImageAnnotation> = (0..images)
        .map(|i| ImageAnnotation {
            image_id: format!("{id_prefix}{i:05}"),
            width: Some(640),
            height: Some(480),
            boxes: Vec::new(),
        })
        .collect();
    let mut slot = 0usize;
    for (class_id, &count) in class_counts.iter().enumerate() {
        for _ in 0..count {
            let w = rng.gen_range(0.05..0.6);
            let h = rng.gen_range(0.05..0.9);
            let cx = rng.gen_range(w / 2.0..=1.0 - w / 2.0);
            let cy = rng.gen_range(h / 2.0..=1.0 - h / 2.0);
            annotations[slot % images]
                .boxes
                .push(Label::new(class_id, BBoxCenter::new(cx, cy, w, h)));
            slot += 1;
        }
    }
    DatasetManifest::new(schema, annotations)
}
