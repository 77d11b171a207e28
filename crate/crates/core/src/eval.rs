//! One-pass evaluation: track every sequence from its first-frame box with
//! contextual tokens disabled, then score success, precision and normalized
//! precision.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cycle::{frame_boxes, run_hop};
use crate::data::FrameSequence;
use crate::dca::ContextTokens;
use crate::error::{DataError, Error, Result};
use crate::geometry::{crop, iou, BBox, TEMPLATE_FACTOR, SEARCH_FACTOR};
use crate::instrument;
use crate::model::{FrameTag, TrackModel};

/// Center-error threshold of the precision score, in pixels.
pub const PRECISION_THRESHOLD_PX: f64 = 20.0;
/// Overlaps this close below a threshold still reach it, absorbing the
/// rounding of crop round trips (a perfect box can come back at 1 - 1e-16).
pub const OVERLAP_TOLERANCE: f64 = 1e-9;
/// Number of overlap thresholds of the success curve.
pub const SUCCESS_STEPS: usize = 101;
/// Number of thresholds of the normalized-precision curve.
pub const NORM_PRECISION_STEPS: usize = 51;
/// Largest normalized center error on that curve.
pub const NORM_PRECISION_MAX: f64 = 0.5;
/// Pixel range of the plotted precision curve.
pub const PRECISION_CURVE_MAX_PX: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackSettings {
    pub template_factor: f64,
    pub search_factor: f64,
    pub min_box_px: f64,
}

impl Default for TrackSettings {
    fn default() -> Self {
        Self {
            template_factor: TEMPLATE_FACTOR,
            search_factor: SEARCH_FACTOR,
            min_box_px: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    /// Predictions for frames `1..len`, frame pixels.
    pub boxes: Vec<BBox>,
    /// Wall time of each prediction in seconds.
    pub times: Vec<f64>,
    pub degenerate: usize,
}

/// Tracks one sequence. The template is cropped once from frame 0; every
/// later frame is searched around the previous prediction.
pub fn track<M: TrackModel + ?Sized>(model: &M, seq: &FrameSequence, settings: &TrackSettings) -> Result<TrackResult> {
    let n = seq.len();
    let mut out = TrackResult {
        boxes: Vec::with_capacity(n.saturating_sub(1)),
        times: Vec::with_capacity(n.saturating_sub(1)),
        degenerate: 0,
    };
    if n < 2 {
        return Ok(out);
    }
    let ec = model.encoder_config().clone();
    let (z_crop, _) = crop(&*seq.frames[0], &seq.first_annotation, settings.template_factor, ec.template_res)?;
    let z = model.embed_template(std::slice::from_ref(&z_crop))?;
    let none = ContextTokens::none();
    let mut prev = seq.first_annotation;
    for i in 1..n {
        let start = Instant::now();
        let (x, t) = crop(&*seq.frames[i], &prev, settings.search_factor, ec.search_res)?;
        let tag = FrameTag {
            sequence_id: seq.id.clone(),
            frame_index: i,
            transform: t,
        };
        let hop = run_hop(model, &z, std::slice::from_ref(&x), &none, std::slice::from_ref(&tag))?;
        let (boxes, d) = frame_boxes(&hop, &[t], settings.min_box_px)?;
        out.times.push(start.elapsed().as_secs_f64());
        out.degenerate += d;
        prev = boxes[0];
        out.boxes.push(prev);
    }
    Ok(out)
}

fn check_lengths(results: &[BBox], gt: &[BBox]) -> Result<()> {
    if results.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground-truth boxes",
            results.len(),
            gt.len()
        )));
    }
    Ok(())
}

pub fn overlaps(results: &[BBox], gt: &[BBox]) -> Result<Vec<f64>> {
    check_lengths(results, gt)?;
    results.iter().zip(gt).map(|(r, g)| iou(r, g)).collect()
}

pub fn center_errors(results: &[BBox], gt: &[BBox]) -> Result<Vec<f64>> {
    check_lengths(results, gt)?;
    Ok(results
        .iter()
        .zip(gt)
        .map(|(r, g)| ((r.cx - g.cx).powi(2) + (r.cy - g.cy).powi(2)).sqrt())
        .collect())
}

/// Center error with the x part divided by the ground-truth width and the y
/// part by its height.
pub fn normalized_center_errors(results: &[BBox], gt: &[BBox]) -> Result<Vec<f64>> {
    check_lengths(results, gt)?;
    Ok(results
        .iter()
        .zip(gt)
        .map(|(r, g)| (((r.cx - g.cx) / g.w).powi(2) + ((r.cy - g.cy) / g.h).powi(2)).sqrt())
        .collect())
}

fn fraction(values: &[f64], pass: impl Fn(f64) -> bool) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| pass(v)).count() as f64 / values.len() as f64
}

/// Success rate at overlap thresholds `0, 0.01, .., 1`; a frame succeeds
/// when its IoU reaches the threshold.
pub fn success_curve(ious: &[f64]) -> Vec<f64> {
    (0..SUCCESS_STEPS)
        .map(|i| {
            let tau = i as f64 / (SUCCESS_STEPS - 1) as f64;
            fraction(ious, |v| v >= tau - OVERLAP_TOLERANCE)
        })
        .collect()
}

pub fn success_auc_from_overlaps(ious: &[f64]) -> f64 {
    let curve = success_curve(ious);
    curve.iter().sum::<f64>() / curve.len() as f64
}

pub fn success_auc(results: &[BBox], gt: &[BBox]) -> Result<f64> {
    Ok(success_auc_from_overlaps(&overlaps(results, gt)?))
}

pub fn precision_from_errors(errors: &[f64], threshold_px: f64) -> f64 {
    fraction(errors, |e| e <= threshold_px)
}

pub fn precision(results: &[BBox], gt: &[BBox], threshold_px: f64) -> Result<f64> {
    Ok(precision_from_errors(&center_errors(results, gt)?, threshold_px))
}

pub fn norm_precision_curve(errors: &[f64]) -> Vec<f64> {
    (0..NORM_PRECISION_STEPS)
        .map(|i| {
            let tau = NORM_PRECISION_MAX * i as f64 / (NORM_PRECISION_STEPS - 1) as f64;
            fraction(errors, |e| e <= tau)
        })
        .collect()
}

pub fn norm_precision_from_errors(errors: &[f64]) -> f64 {
    let curve = norm_precision_curve(errors);
    curve.iter().sum::<f64>() / curve.len() as f64
}

pub fn norm_precision(results: &[BBox], gt: &[BBox]) -> Result<f64> {
    Ok(norm_precision_from_errors(&normalized_center_errors(results, gt)?))
}

pub fn precision_curve(errors: &[f64]) -> Vec<f64> {
    (0..=PRECISION_CURVE_MAX_PX).map(|px| precision_from_errors(errors, px as f64)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub id: String,
    pub frames: usize,
    pub auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub mean_iou: f64,
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub sequences: usize,
    pub auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub success: Vec<f64>,
    pub precision: Vec<f64>,
}

/// Scores averaged over sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub mean_iou: f64,
    pub fps: f64,
    pub frames: usize,
    pub degenerate_boxes: usize,
    /// Prompt and noise sampling calls made while tracking; zero by design.
    pub dca_calls: u64,
    pub per_sequence: Vec<SequenceMetrics>,
    pub per_attribute: BTreeMap<String, GroupMetrics>,
    pub curves: Curves,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn group(rows: &[&SequenceMetrics]) -> GroupMetrics {
    GroupMetrics {
        sequences: rows.len(),
        auc: mean(rows.iter().map(|r| r.auc)),
        precision: mean(rows.iter().map(|r| r.precision)),
        norm_precision: mean(rows.iter().map(|r| r.norm_precision)),
        mean_iou: mean(rows.iter().map(|r| r.mean_iou)),
    }
}

/// Tracks and scores every sequence; all need full annotations.
pub fn evaluate<M: TrackModel + ?Sized>(
    model: &M,
    sequences: &[FrameSequence],
    settings: &TrackSettings,
) -> Result<(MetricsReport, Vec<TrackResult>)> {
    let before = instrument::snapshot();
    let mut rows = Vec::with_capacity(sequences.len());
    let mut results = Vec::with_capacity(sequences.len());
    let (mut all_ious, mut all_err) = (Vec::new(), Vec::new());
    let (mut time, mut frames, mut degenerate) = (0.0, 0usize, 0usize);
    for seq in sequences {
        let gt = seq.full_annotations.as_ref().ok_or_else(|| DataError::AnnotationCount {
            annotations: 1,
            frames: seq.len(),
        })?;
        let r = track(model, seq, settings)?;
        let gt_rest = &gt[1.min(gt.len())..];
        let ious = overlaps(&r.boxes, gt_rest)?;
        let err = center_errors(&r.boxes, gt_rest)?;
        let nerr = normalized_center_errors(&r.boxes, gt_rest)?;
        rows.push(SequenceMetrics {
            id: seq.id.clone(),
            frames: r.boxes.len(),
            auc: success_auc_from_overlaps(&ious),
            precision: precision_from_errors(&err, PRECISION_THRESHOLD_PX),
            norm_precision: norm_precision_from_errors(&nerr),
            mean_iou: mean(ious.iter().copied()),
            attributes: seq.attributes.iter().map(|a| a.to_string()).collect(),
        });
        time += r.times.iter().sum::<f64>();
        frames += r.boxes.len();
        degenerate += r.degenerate;
        all_ious.extend(ious);
        all_err.extend(err);
        results.push(r);
    }
    let refs: Vec<&SequenceMetrics> = rows.iter().collect();
    let overall = group(&refs);
    let mut per_attribute = BTreeMap::new();
    let mut names: Vec<String> = rows.iter().flat_map(|r| r.attributes.iter().cloned()).collect();
    names.sort();
    names.dedup();
    for name in names {
        let sel: Vec<&SequenceMetrics> = rows.iter().filter(|r| r.attributes.contains(&name)).collect();
        per_attribute.insert(name, group(&sel));
    }
    let dca_calls = instrument::snapshot().since(&before).dca_calls();
    Ok((
        MetricsReport {
            auc: overall.auc,
            precision: overall.precision,
            norm_precision: overall.norm_precision,
            mean_iou: overall.mean_iou,
            fps: if time > 0.0 { frames as f64 / time } else { 0.0 },
            frames,
            degenerate_boxes: degenerate,
            dca_calls,
            per_sequence: rows,
            per_attribute,
            curves: Curves {
                success: success_curve(&all_ious),
                precision: precision_curve(&all_err),
            },
        },
        results,
    ))
}

/// Writes `results/<seq>.txt`, one `x,y,w,h` line per frame, the first line
/// being the initialization box.
pub fn write_results(dir: &Path, sequences: &[FrameSequence], results: &[TrackResult]) -> Result<()> {
    let res_dir = dir.join("results");
    fs::create_dir_all(&res_dir)?;
    for (seq, r) in sequences.iter().zip(results) {
        let mut text = String::new();
        for b in std::iter::once(&seq.first_annotation).chain(&r.boxes) {
            let [x, y, w, h] = b.to_corner_form();
            text.push_str(&format!("{x},{y},{w},{h}\n"));
        }
        fs::write(res_dir.join(format!("{}.txt", seq.id)), text)?;
    }
    Ok(())
}

pub fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    fs::write(path, json + "\n")?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Io(std::io::Error::other(e)))
}
