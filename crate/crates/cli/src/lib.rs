//! Command-line front end: dataset statistics, splitting, anchors, evaluation,
//! self-checks and a binary grid encode check.
//!
//! Exit codes: 0 success, 1 a check failed, 2 bad input.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use salat_det::anchors::{kmeans_anchors, DEFAULT_K};
use salat_det::dataset::{dataset_stats, split_dataset, synthesize_manifest, ClassSchema, DatasetManifest, DatasetStats};
use salat_det::encoding::{
    decode_v1, encode_v1, encode_v3_targets, read_grid, write_grid, AnchorScales, CollisionPolicy, GridDims,
    GridHeader, Objectness, DEFAULT_IGNORE_IOU,
};
use salat_det::eval::{evaluate, EvalConfig, EvalReport, Interpolation, MatchMode, DEFAULT_IOU_THRESHOLDS};
use salat_det::loss::LossWeights;
use salat_det::postprocess::{detections_to_jsonl, parse_detections_jsonl, Detection};
use salat_det::selfcheck;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::CheckFailed(_) => EXIT_CHECK_FAILED,
        }
    }
}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "salat-det", version, about = "Detection maths and evaluation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct DataArgs {
    /// Manifest JSON (array of {image_id, width, height, boxes}).
    #[arg(long, conflicts_with = "labels")]
    pub manifest: Option<PathBuf>,
    /// Directory of darknet label files, one per image.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Class names file, one per line (default: the four Salat postures).
    #[arg(long)]
    pub classes: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Voc,
    Paper,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InterpArg {
    Allpoint,
    #[value(name = "11pt")]
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GridVersion {
    V1,
    V3,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Image and per-class instance counts for one or more manifests.
    Stats {
        /// Manifest JSON; repeat to tabulate several splits.
        #[arg(long, required_unless_present = "labels")]
        manifest: Vec<PathBuf>,
        #[arg(long, conflicts_with = "manifest")]
        labels: Option<PathBuf>,
        #[arg(long)]
        classes: Option<PathBuf>,
        /// Directory for stats.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Seeded image-level train/test split.
    Split {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0.9)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for train.json and test.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// k-means anchors over the manifest's box shapes.
    Anchors {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        max_iter: usize,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// AP/mAP, TP/FP/FN and PR curves for a detections file.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// JSON lines: {image_id, class_id, score, cx, cy, w, h}.
        #[arg(long)]
        detections: PathBuf,
        /// IoU threshold; repeat for several (default 0.5 to 0.9 in steps of 0.1).
        #[arg(long)]
        iou: Vec<f64>,
        /// Restrict report.csv to one matching mode (default: both).
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum, default_value = "allpoint")]
        interp: InterpArg,
        /// Output directory for report.json, report.csv, map.csv, pr_curves.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes a synthetic manifest with exact per-class instance counts.
    Synth {
        #[arg(long)]
        images: usize,
        /// Comma-separated instances per class.
        #[arg(long, value_delimiter = ',', required = true)]
        counts: Vec<usize>,
        #[arg(long)]
        classes: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "img")]
        prefix: String,
        /// Also write the ground truth as score-1 detections (JSON lines).
        #[arg(long)]
        perfect_detections: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs the embedded verification battery.
    Selfcheck {
        #[arg(long, hide = true, default_value_t = 5.0)]
        lambda_coord: f64,
    },
    /// Encodes one image to the binary grid format, reads it back and verifies it.
    EncodeCheck {
        #[command(flatten)]
        data: DataArgs,
        /// Image to encode (default: the first in the manifest).
        #[arg(long)]
        image: Option<String>,
        #[arg(long, value_enum, default_value = "v1")]
        grid: GridVersion,
        #[arg(long, default_value_t = 7)]
        s: usize,
        #[arg(long, default_value_t = 2)]
        b: usize,
        /// Anchors JSON as written by `anchors` (v3 only; default: computed from the manifest).
        #[arg(long)]
        anchors: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Six significant digits, trailing zeros dropped.
pub fn fmt6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let rounded: f64 = format!("{v:.5e}").parse().expect("formatted float parses");
    rounded.to_string()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, fmt6)
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_schema(classes: Option<&Path>) -> Result<ClassSchema, CliError> {
    match classes {
        Some(p) => ClassSchema::load(p).map_err(input),
        None => Ok(ClassSchema::default()),
    }
}

fn load_manifest(manifest: Option<&Path>, labels: Option<&Path>, schema: ClassSchema) -> Result<DatasetManifest, CliError> {
    match (manifest, labels) {
        (Some(m), _) => DatasetManifest::load(m, schema).map_err(input),
        (None, Some(dir)) => DatasetManifest::from_label_dir(dir, schema).map_err(input),
        (None, None) => Err(CliError::Input("one of --manifest or --labels is required".into())),
    }
}

fn load_data(data: &DataArgs) -> Result<DatasetManifest, CliError> {
    let schema = load_schema(data.classes.as_deref())?;
    load_manifest(data.manifest.as_deref(), data.labels.as_deref(), schema)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            return code;
        }
    };
    let mut buf = String::new();
    let result = execute(cli.command, &mut buf);
    let _ = out.write_all(buf.as_bytes());
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command, out: &mut String) -> Result<i32, CliError> {
    match command {
        Command::Stats {
            manifest,
            labels,
            classes,
            out: dir,
        } => cmd_stats(&manifest, labels.as_deref(), classes.as_deref(), dir.as_deref(), out),
        Command::Split {
            data,
            train_fraction,
            seed,
            out: dir,
        } => cmd_split(&data, train_fraction, seed, &dir, out),
        Command::Anchors {
            data,
            k,
            seed,
            max_iter,
            out: path,
        } => cmd_anchors(&data, k, seed, max_iter, path.as_deref(), out),
        Command::Eval {
            data,
            detections,
            iou,
            mode,
            interp,
            out: dir,
        } => cmd_eval(&data, &detections, iou, mode, interp, &dir, out),
        Command::Synth {
            images,
            counts,
            classes,
            seed,
            prefix,
            perfect_detections,
            out: path,
        } => cmd_synth(images, &counts, classes.as_deref(), seed, &prefix, perfect_detections.as_deref(), &path, out),
        Command::Selfcheck { lambda_coord } => cmd_selfcheck(lambda_coord, out),
        Command::EncodeCheck {
            data,
            image,
            grid,
            s,
            b,
            anchors,
            out: path,
        } => cmd_encode_check(&data, image.as_deref(), grid, s, b, anchors.as_deref(), &path, out),
    }
}

fn cmd_stats(
    manifests: &[PathBuf],
    labels: Option<&Path>,
    classes: Option<&Path>,
    dir: Option<&Path>,
    out: &mut String,
) -> Result<i32, CliError> {
    let schema = load_schema(classes)?;
    let mut rows: Vec<(String, DatasetStats)> = Vec::new();
    if let Some(l) = labels {
        let m = load_manifest(None, Some(l), schema.clone())?;
        rows.push((l.display().to_string(), dataset_stats(&m)));
    }
    for p in manifests {
        let m = load_manifest(Some(p), None, schema.clone())?;
        let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        rows.push((name, dataset_stats(&m)));
    }
    if rows.len() > 1 {
        let total = rows.iter().map(|r| r.1.clone()).reduce(|a, b| a + b).expect("nonempty");
        rows.push(("total".into(), total));
    }

    let mut header = vec!["source".to_owned(), "images".to_owned()];
    header.extend(schema.names().iter().cloned());
    header.push("instances".into());
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, s)| {
            let mut r = vec![name.clone(), s.images.to_string()];
            r.extend(s.per_class.iter().map(|c| c.to_string()));
            r.push(s.total_instances().to_string());
            r
        })
        .collect();

    let widths: Vec<usize> = (0..header.len())
        .map(|i| table.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    for row in std::iter::once(&header).chain(&table) {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }

    if let Some(dir) = dir {
        ensure_dir(dir)?;
        let mut csv = String::new();
        let _ = writeln!(csv, "{}", header.iter().map(|h| csv_field(h)).collect::<Vec<_>>().join(","));
        for r in &table {
            let _ = writeln!(csv, "{}", r.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(","));
        }
        write_file(&dir.join("stats.csv"), csv.as_bytes())?;
    }
    Ok(EXIT_OK)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

fn cmd_split(data: &DataArgs, fraction: f64, seed: u64, dir: &Path, out: &mut String) -> Result<i32, CliError> {
    let m = load_data(data)?;
    let (train, test) = split_dataset(&m, fraction, seed).map_err(input)?;
    ensure_dir(dir)?;
    write_file(&dir.join("train.json"), train.to_json().as_bytes())?;
    write_file(&dir.join("test.json"), test.to_json().as_bytes())?;
    let _ = writeln!(out, "train: {} images", train.len());
    let _ = writeln!(out, "test: {} images", test.len());
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct AnchorsJson {
    k: usize,
    seed: u64,
    anchors: Vec<[f64; 2]>,
    mean_best_iou: f64,
    iterations: usize,
}

fn cmd_anchors(
    data: &DataArgs,
    k: usize,
    seed: u64,
    max_iter: usize,
    path: Option<&Path>,
    out: &mut String,
) -> Result<i32, CliError> {
    let m = load_data(data)?;
    let shapes: Vec<(f64, f64)> = m.annotations.iter().flat_map(|a| &a.boxes).map(|l| (l.bbox.w, l.bbox.h)).collect();
    let r = kmeans_anchors(&shapes, k, seed, max_iter).map_err(input)?;
    let json = AnchorsJson {
        k,
        seed,
        anchors: r.anchors.anchors.iter().map(|&(w, h)| [w, h]).collect(),
        mean_best_iou: r.anchors.mean_best_iou,
        iterations: r.iterations,
    };
    let text = serde_json::to_string_pretty(&json).expect("anchors serialize") + "\n";
    match path {
        Some(p) => {
            write_file(p, text.as_bytes())?;
            let _ = writeln!(out, "mean best IoU {} over {} boxes", fmt6(json.mean_best_iou), shapes.len());
        }
        None => out.push_str(&text),
    }
    Ok(EXIT_OK)
}

fn report_csv(report: &EvalReport, modes: &[MatchMode]) -> String {
    let mut csv = String::from("class,iou,AP,TP,FP,FN,mode\n");
    for t in &report.thresholds {
        for c in &t.classes {
            for &mode in modes {
                let n = c.counts(mode);
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{}",
                    csv_field(&c.class_name),
                    fmt6(t.iou_threshold),
                    fmt_opt(c.ap),
                    n.tp,
                    n.fp,
                    n.fn_,
                    mode.as_str()
                );
            }
        }
    }
    csv
}

fn map_csv(report: &EvalReport) -> String {
    let mut csv = String::from("iou,mAP,average_iou\n");
    for t in &report.thresholds {
        let _ = writeln!(csv, "{},{},{}", fmt6(t.iou_threshold), fmt_opt(t.map), fmt_opt(t.average_iou));
    }
    csv
}

fn pr_csv(report: &EvalReport) -> String {
    let mut csv = String::from("class,iou,recall,precision,threshold\n");
    for t in &report.thresholds {
        for c in &t.classes {
            for p in &c.pr_curve {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{}",
                    csv_field(&c.class_name),
                    fmt6(t.iou_threshold),
                    fmt6(p.recall),
                    fmt6(p.precision),
                    fmt6(p.score)
                );
            }
        }
    }
    csv
}

fn cmd_eval(
    data: &DataArgs,
    detections: &Path,
    iou: Vec<f64>,
    mode: Option<ModeArg>,
    interp: InterpArg,
    dir: &Path,
    out: &mut String,
) -> Result<i32, CliError> {
    let m = load_data(data)?;
    let dets = parse_detections_jsonl(&read_text(detections)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", detections.display())))?;
    let config = EvalConfig {
        iou_thresholds: if iou.is_empty() { DEFAULT_IOU_THRESHOLDS.to_vec() } else { iou },
        interpolation: match interp {
            InterpArg::Allpoint => Interpolation::AllPoint,
            InterpArg::ElevenPoint => Interpolation::ElevenPoint,
        },
    };
    let report = evaluate(&m, &dets, &config).map_err(input)?;
    let modes = match mode {
        None => vec![MatchMode::VocStandard, MatchMode::PaperLiteral],
        Some(ModeArg::Voc) => vec![MatchMode::VocStandard],
        Some(ModeArg::Paper) => vec![MatchMode::PaperLiteral],
    };

    ensure_dir(dir)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_file(&dir.join("report.json"), json.as_bytes())?;
    write_file(&dir.join("report.csv"), report_csv(&report, &modes).as_bytes())?;
    write_file(&dir.join("map.csv"), map_csv(&report).as_bytes())?;
    write_file(&dir.join("pr_curves.csv"), pr_csv(&report).as_bytes())?;

    let first = &report.thresholds[0];
    let _ = writeln!(
        out,
        "mAP@{} = {} ({} images, {} ground truths, {} detections)",
        fmt6(first.iou_threshold),
        first.map.map_or_else(|| "n/a".to_owned(), fmt6),
        report.images,
        report.ground_truths,
        report.detections
    );
    for t in &report.thresholds[1..] {
        let _ = writeln!(out, "mAP@{} = {}", fmt6(t.iou_threshold), t.map.map_or_else(|| "n/a".to_owned(), fmt6));
    }
    if !first.excluded_classes.is_empty() {
        let names: Vec<&str> = first.excluded_classes.iter().filter_map(|&c| m.schema.name(c)).collect();
        let _ = writeln!(out, "excluded from mAP (no ground truth): {}", names.join(", "));
    }
    Ok(EXIT_OK)
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    images: usize,
    counts: &[usize],
    classes: Option<&Path>,
    seed: u64,
    prefix: &str,
    detections: Option<&Path>,
    path: &Path,
    out: &mut String,
) -> Result<i32, CliError> {
    let schema = load_schema(classes)?;
    let m = synthesize_manifest(schema, images, counts, seed, prefix).map_err(input)?;
    write_file(path, m.to_json().as_bytes())?;
    if let Some(p) = detections {
        let dets: Vec<Detection> = m
            .annotations
            .iter()
            .flat_map(|a| {
                a.boxes.iter().map(|l| Detection {
                    image_id: a.image_id.clone(),
                    class_id: l.class_id,
                    score: 1.0,
                    bbox: l.bbox,
                })
            })
            .collect();
        write_file(p, detections_to_jsonl(&dets).as_bytes())?;
    }
    let _ = writeln!(out, "{}: {} images, {} instances", path.display(), m.len(), counts.iter().sum::<usize>());
    Ok(EXIT_OK)
}

fn cmd_selfcheck(lambda_coord: f64, out: &mut String) -> Result<i32, CliError> {
    let weights = LossWeights {
        lambda_coord,
        ..LossWeights::default()
    };
    let results = selfcheck::run(&weights);
    for r in &results {
        let _ = writeln!(out, "{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    let _ = writeln!(out, "{} of {} checks passed", results.len() - failed, results.len());
    if failed > 0 {
        Err(CliError::CheckFailed(format!("{failed} check(s) failed")))
    } else {
        Ok(EXIT_OK)
    }
}

#[derive(serde::Deserialize)]
struct AnchorsFile {
    anchors: Vec<[f64; 2]>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_encode_check(
    data: &DataArgs,
    image: Option<&str>,
    grid: GridVersion,
    s: usize,
    b: usize,
    anchors: Option<&Path>,
    path: &Path,
    out: &mut String,
) -> Result<i32, CliError> {
    let m = load_data(data)?;
    let ann = match image {
        Some(id) => m.get(id).ok_or_else(|| CliError::Input(format!("unknown image id {id:?}")))?,
        None => m.annotations.first().ok_or_else(|| CliError::Input("manifest has no images".into()))?,
    };
    let c = m.schema.num_classes();
    let (header, values) = match grid {
        GridVersion::V1 => {
            let dims = GridDims::new(s, b, c).map_err(input)?;
            let enc = encode_v1(ann, dims, CollisionPolicy::KeepFirst).map_err(input)?;
            for d in &enc.dropped {
                let _ = writeln!(out, "dropped box {} (cell {},{} already taken)", d.box_index, d.row, d.col);
            }
            (GridHeader::v1(dims), enc.grid.values)
        }
        GridVersion::V3 => {
            let shapes: Vec<(f64, f64)> = match anchors {
                Some(p) => serde_json::from_str::<AnchorsFile>(&read_text(p)?)
                    .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?
                    .anchors
                    .iter()
                    .map(|a| (a[0], a[1]))
                    .collect(),
                None => {
                    let all: Vec<(f64, f64)> =
                        m.annotations.iter().flat_map(|a| &a.boxes).map(|l| (l.bbox.w, l.bbox.h)).collect();
                    let r = kmeans_anchors(&all, DEFAULT_K, 0, 300).map_err(input)?;
                    r.anchors.anchors
                }
            };
            let scales = AnchorScales::from_area_tertiles(&shapes, [s, 2 * s, 4 * s]).map_err(input)?;
            let g = encode_v3_targets(ann, &scales, c, DEFAULT_IGNORE_IOU).map_err(input)?;
            let _ = writeln!(
                out,
                "positive {} ignore {} negative {}",
                g.count(Objectness::Positive),
                g.count(Objectness::Ignore),
                g.count(Objectness::Negative)
            );
            let values: Vec<f64> = g.scales.iter().flat_map(|t| t.values.iter().copied()).collect();
            (GridHeader::v3(&g), values)
        }
    };
    let bytes = write_grid(&header, &values).map_err(input)?;
    write_file(path, &bytes)?;
    let (back_header, back) = read_grid(&bytes).map_err(input)?;
    let exact = back_header == header
        && back.len() == values.len()
        && back.iter().zip(&values).all(|(&f, &v)| f == v as f32);
    let _ = writeln!(
        out,
        "{}: {} values, header {}",
        path.display(),
        values.len(),
        serde_json::to_string(&header).expect("header serializes")
    );
    if !exact {
        return Err(CliError::CheckFailed("grid file did not read back identically".into()));
    }
    if let GridVersion::V1 = grid {
        let dims = GridDims::new(s, b, c).map_err(input)?;
        let widened: Vec<f64> = back.iter().map(|&f| f as f64).collect();
        let dets = decode_v1(&widened, dims, &ann.image_id, 0.5).map_err(input)?;
        let _ = writeln!(out, "decoded {} of {} boxes", dets.len(), ann.boxes.len());
        let kept = ann.boxes.len() - encode_v1(ann, dims, CollisionPolicy::KeepFirst).map_err(input)?.dropped.len();
        if dets.len() != kept {
            return Err(CliError::CheckFailed("decode did not recover every encoded box".into()));
        }
    }
    let _ = writeln!(out, "ok");
    Ok(EXIT_OK)
}
