//! Region similarity J, contour accuracy F and their dataset-level mean.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BinaryMask, FrameSize, GeometryError, MaskSequence};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("sequence length mismatch: {pred} predicted vs {gt} ground-truth frames")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("negative or non-finite tolerance {0}")]
    Tolerance(f64),
    #[error("empty dataset")]
    EmptyDataset,
}

/// J: mask IoU, 1 when both masks are empty.
pub fn region_similarity(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricsError> {
    Ok(pred.iou(gt)?)
}

/// Boundary tolerance in pixels: `ceil(0.008 * diagonal)`.
pub fn default_tolerance(size: FrameSize) -> f64 {
    (0.008 * size.diagonal()).ceil()
}

/// Foreground pixels with a 4-neighbour in the background or on the image
/// border.
pub fn boundary(mask: &BinaryMask) -> Vec<bool> {
    let (w, h) = (mask.size().width(), mask.size().height());
    let mut out = vec![false; mask.size().pixel_count()];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !mask.get(x - 1, y)
                || !mask.get(x + 1, y)
                || !mask.get(x, y - 1)
                || !mask.get(x, y + 1);
            out[(y * w + x) as usize] = edge;
        }
    }
    out
}

/// Fraction of `from` boundary pixels that have a `to` boundary pixel within
/// Euclidean distance `tol`. Searches only the bounding square of radius
/// `tol`.
fn matched_fraction(from: &[bool], to: &[bool], w: u32, h: u32, tol: f64) -> Option<f64> {
    let r = tol.floor().min(w.max(h) as f64) as i64;
    let (w, h) = (w as i64, h as i64);
    let mut total = 0u64;
    let mut hits = 0u64;
    for y in 0..h {
        for x in 0..w {
            if !from[(y * w + x) as usize] {
                continue;
            }
            total += 1;
            let found = (y - r).max(0)..=(y + r).min(h - 1);
            let hit = found.into_iter().any(|yy| {
                ((x - r).max(0)..=(x + r).min(w - 1)).any(|xx| {
                    let (dx, dy) = (xx - x, yy - y);
                    to[(yy * w + xx) as usize] && ((dx * dx + dy * dy) as f64).sqrt() <= tol
                })
            });
            hits += hit as u64;
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

/// F: boundary F-measure within `tolerance` pixels.
pub fn contour_accuracy(
    pred: &BinaryMask,
    gt: &BinaryMask,
    tolerance: f64,
) -> Result<f64, MetricsError> {
    if pred.size() != gt.size() {
        return Err(GeometryError::SizeMismatch {
            left: pred.size(),
            right: gt.size(),
        }
        .into());
    }
    if !tolerance.is_finite() || tolerance < 0.0 {
        return Err(MetricsError::Tolerance(tolerance));
    }
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let (w, h) = (pred.size().width(), pred.size().height());
    let (bp, bg) = (boundary(pred), boundary(gt));
    let precision = matched_fraction(&bp, &bg, w, h, tolerance).unwrap_or(0.0);
    let recall = matched_fraction(&bg, &bp, w, h, tolerance).unwrap_or(0.0);
    if precision + recall == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * precision * recall / (precision + recall))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEval {
    pub j: Vec<f64>,
    pub f: Vec<f64>,
    pub j_mean: f64,
    pub f_mean: f64,
    pub frames: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn evaluate_sequence(
    pred: &MaskSequence,
    gt: &MaskSequence,
) -> Result<SequenceEval, MetricsError> {
    evaluate_sequence_with(pred, gt, default_tolerance(gt.size()))
}

pub fn evaluate_sequence_with(
    pred: &MaskSequence,
    gt: &MaskSequence,
    tolerance: f64,
) -> Result<SequenceEval, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    let per_frame = pred
        .frames()
        .par_iter()
        .zip(gt.frames())
        .map(|(p, g)| Ok((region_similarity(p, g)?, contour_accuracy(p, g, tolerance)?)))
        .collect::<Result<Vec<_>, MetricsError>>()?;
    let (j, f): (Vec<f64>, Vec<f64>) = per_frame.into_iter().unzip();
    Ok(SequenceEval {
        j_mean: mean(&j),
        f_mean: mean(&f),
        frames: j.len(),
        j,
        f,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedSequenceEval {
    pub name: String,
    #[serde(flatten)]
    pub eval: SequenceEval,
}

/// Dataset scores, as percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub sequences: Vec<NamedSequenceEval>,
    pub j: f64,
    pub f: f64,
    pub j_and_f: f64,
}

impl BenchmarkReport {
    pub fn from_sequences(sequences: Vec<NamedSequenceEval>) -> Result<Self, MetricsError> {
        if sequences.is_empty() {
            return Err(MetricsError::EmptyDataset);
        }
        let n = sequences.len() as f64;
        let j = 100.0 * sequences.iter().map(|s| s.eval.j_mean).sum::<f64>() / n;
        let f = 100.0 * sequences.iter().map(|s| s.eval.f_mean).sum::<f64>() / n;
        Ok(Self {
            sequences,
            j,
            f,
            j_and_f: (j + f) / 2.0,
        })
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Sequence | J | F | J&F |\n|---|---:|---:|---:|\n");
        for s in &self.sequences {
            let (j, f) = (100.0 * s.eval.j_mean, 100.0 * s.eval.f_mean);
            out.push_str(&format!(
                "| {} | {:.1} | {:.1} | {:.1} |\n",
                s.name,
                j,
                f,
                (j + f) / 2.0
            ));
        }
        out.push_str(&format!(
            "| **All** | {:.1} | {:.1} | {:.1} |\n",
            self.j, self.f, self.j_and_f
        ));
        out
    }
}

pub fn evaluate_dataset<'a, I>(pairs: I) -> Result<BenchmarkReport, MetricsError>
where
    I: IntoIterator<Item = (String, &'a MaskSequence, &'a MaskSequence)>,
{
    let sequences = pairs
        .into_iter()
        .map(|(name, pred, gt)| {
            Ok(NamedSequenceEval {
                name,
                eval: evaluate_sequence(pred, gt)?,
            })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    BenchmarkReport::from_sequences(sequences)
}
