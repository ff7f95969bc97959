//! Training-data manifests and the tracker-consistency filter.
//!
//! Manifest layout:
//!
//! ```json
//! {"videos": [{"id": "v0", "fps": 24.0, "num_frames": 2, "width": 64, "height": 48,
//!              "queries": [{"text": "...", "masks": [{"w":64,"h":48,"runs":[...]}, null]}]}]}
//! ```
//!
//! A `null` mask means the target is not visible in that frame. A video may
//! also list its frame image paths under `frames`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geometry::{mask_to_bbox, BBox, BinaryMask, FrameSize, MaskSequence, RleRecord};
use crate::reward::GtFrameAreas;
use crate::rollout::{TrackRequest, Tracker, VideoSource};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("cannot read or write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> ManifestError {
    ManifestError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub text: String,
    pub masks: Vec<Option<RleRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoManifest {
    pub id: String,
    pub fps: f64,
    pub num_frames: usize,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<Vec<PathBuf>>,
    pub queries: Vec<QueryRecord>,
}

impl VideoManifest {
    pub fn size(&self) -> FrameSize {
        FrameSize::new(self.width, self.height).expect("validated manifest")
    }

    pub fn source(&self) -> VideoSource {
        VideoSource {
            id: self.id.clone(),
            size: self.size(),
            frame_count: self.num_frames,
            fps: self.fps,
            frame_paths: self.frames.clone(),
        }
    }

    /// Ground-truth masks of one query, empty where the target is absent.
    pub fn query_masks(&self, query: usize) -> Result<MaskSequence, ManifestError> {
        let size = self.size();
        let q = &self.queries[query];
        let frames = q
            .masks
            .iter()
            .enumerate()
            .map(|(t, m)| match m {
                Some(rle) => rle.decode().map_err(|e| {
                    schema(
                        format!("{}.queries[{query}].masks[{t}]", self.id),
                        e.to_string(),
                    )
                }),
                None => Ok(BinaryMask::empty(size)),
            })
            .collect::<Result<Vec<_>, _>>()?;
        MaskSequence::new(frames)
            .map_err(|e| schema(format!("{}.queries[{query}]", self.id), e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub videos: Vec<VideoManifest>,
}

impl Manifest {
    pub fn from_json_str(text: &str) -> Result<Self, ManifestError> {
        let value: Value = serde_json::from_str(text)?;
        validate(&value)?;
        Ok(serde_json::from_value(value)?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn video(&self, id: &str) -> Option<&VideoManifest> {
        self.videos.iter().find(|v| v.id == id)
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_owned(),
        source,
    })?;
    Manifest::from_json_str(&text)
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<(), ManifestError> {
    let mut text = manifest.to_json_string();
    text.push('\n');
    std::fs::write(path, text).map_err(|source| ManifestError::Io {
        path: path.to_owned(),
        source,
    })
}

fn field<'a>(
    obj: &'a serde_json::Map<String, Value>,
    path: &str,
    key: &str,
) -> Result<&'a Value, ManifestError> {
    obj.get(key)
        .ok_or_else(|| schema(format!("{path}.{key}"), "missing field"))
}

fn positive_int(
    obj: &serde_json::Map<String, Value>,
    path: &str,
    key: &str,
) -> Result<u64, ManifestError> {
    match field(obj, path, key)?.as_u64() {
        Some(v) if v > 0 => Ok(v),
        _ => Err(schema(
            format!("{path}.{key}"),
            "expected a positive integer",
        )),
    }
}

fn validate_video(v: &Value, path: &str, ids: &mut HashSet<String>) -> Result<(), ManifestError> {
    let obj = v
        .as_object()
        .ok_or_else(|| schema(path, "expected an object"))?;
    let id = field(obj, path, "id")?
        .as_str()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| schema(format!("{path}.id"), "expected a non-empty string"))?;
    if !ids.insert(id.to_owned()) {
        return Err(schema(
            format!("{path}.id"),
            format!("duplicate video id `{id}`"),
        ));
    }
    match field(obj, path, "fps")?.as_f64() {
        Some(f) if f > 0.0 && f.is_finite() => {}
        _ => return Err(schema(format!("{path}.fps"), "expected a positive number")),
    }
    let num_frames = positive_int(obj, path, "num_frames")? as usize;
    let width = positive_int(obj, path, "width")?;
    let height = positive_int(obj, path, "height")?;
    if width > u32::MAX as u64 || height > u32::MAX as u64 {
        return Err(schema(path, "frame size out of range"));
    }
    if let Some(frames) = obj.get("frames") {
        let list = frames
            .as_array()
            .ok_or_else(|| schema(format!("{path}.frames"), "expected an array of paths"))?;
        if list.len() != num_frames {
            return Err(schema(
                format!("{path}.frames"),
                format!("{} paths for {num_frames} frames", list.len()),
            ));
        }
        if let Some(i) = list.iter().position(|p| !p.is_string()) {
            return Err(schema(format!("{path}.frames[{i}]"), "expected a string"));
        }
    }
    let queries = field(obj, path, "queries")?
        .as_array()
        .ok_or_else(|| schema(format!("{path}.queries"), "expected an array"))?;
    for (qi, q) in queries.iter().enumerate() {
        let qpath = format!("{path}.queries[{qi}]");
        let qobj = q
            .as_object()
            .ok_or_else(|| schema(&qpath, "expected an object"))?;
        if !field(qobj, &qpath, "text")?.is_string() {
            return Err(schema(format!("{qpath}.text"), "expected a string"));
        }
        let masks = field(qobj, &qpath, "masks")?
            .as_array()
            .ok_or_else(|| schema(format!("{qpath}.masks"), "expected an array"))?;
        if masks.len() != num_frames {
            return Err(schema(
                format!("{qpath}.masks"),
                format!("{} masks for {num_frames} frames", masks.len()),
            ));
        }
        for (t, m) in masks.iter().enumerate() {
            if m.is_null() {
                continue;
            }
            let mpath = format!("{qpath}.masks[{t}]");
            let rle: RleRecord = serde_json::from_value(m.clone())
                .map_err(|e| schema(&mpath, format!("expected null or {{w, h, runs}}: {e}")))?;
            if rle.w as u64 != width || rle.h as u64 != height {
                return Err(schema(
                    &mpath,
                    format!("mask is {}x{}, frames are {width}x{height}", rle.w, rle.h),
                ));
            }
            rle.decode().map_err(|e| schema(&mpath, e.to_string()))?;
        }
    }
    Ok(())
}

/// Schema check with JSON paths in errors, e.g. `videos[0].fps`.
pub fn validate(value: &Value) -> Result<(), ManifestError> {
    let root = value
        .as_object()
        .ok_or_else(|| schema("$", "expected an object"))?;
    let videos = root
        .get("videos")
        .ok_or_else(|| schema("videos", "missing field"))?
        .as_array()
        .ok_or_else(|| schema("videos", "expected an array"))?;
    let mut ids = HashSet::new();
    for (i, v) in videos.iter().enumerate() {
        validate_video(v, &format!("videos[{i}]"), &mut ids)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBoxes {
    pub boxes: Vec<Option<BBox>>,
    pub areas: GtFrameAreas,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoBoxes {
    pub id: String,
    pub queries: Vec<QueryBoxes>,
}

/// Tight per-frame boxes of every query; absent targets give `None` and
/// area 0.
pub fn masks_to_boxes(manifest: &Manifest) -> Result<Vec<VideoBoxes>, ManifestError> {
    manifest
        .videos
        .iter()
        .map(|v| {
            let queries = (0..v.queries.len())
                .map(|q| {
                    let boxes: Vec<Option<BBox>> = v
                        .query_masks(q)?
                        .frames()
                        .iter()
                        .map(mask_to_bbox)
                        .collect();
                    Ok(QueryBoxes {
                        areas: GtFrameAreas::from_boxes(&boxes),
                        boxes,
                    })
                })
                .collect::<Result<Vec<_>, ManifestError>>()?;
            Ok(VideoBoxes {
                id: v.id.clone(),
                queries,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Keep,
    Discard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationDecision {
    pub video_id: String,
    /// Mean tracker IoU per query; `None` if the target is never visible.
    pub mean_iou: Vec<Option<f64>>,
    pub decision: Decision,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurationOutcome {
    pub decisions: Vec<CurationDecision>,
    pub curated: Manifest,
}

impl CurationOutcome {
    /// `video_id,query,mean_iou,decision,threshold` rows.
    pub fn decisions_csv(&self) -> String {
        let mut out = String::from("video_id,query,mean_iou,decision,threshold\n");
        for d in &self.decisions {
            let decision = match d.decision {
                Decision::Keep => "keep",
                Decision::Discard => "discard",
            };
            for (q, m) in d.mean_iou.iter().enumerate() {
                let m = m.map_or(String::new(), |m| format!("{m:.6}"));
                let _ = writeln!(
                    out,
                    "{},{q},{m},{decision},{}",
                    csv_field(&d.video_id),
                    d.threshold
                );
            }
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

fn frame_iou(
    tracker: &dyn Tracker,
    source: &VideoSource,
    query: usize,
    t: usize,
    bbox: BBox,
    gt: &BinaryMask,
) -> Result<f64, String> {
    let masks = tracker
        .propagate(&TrackRequest {
            video: source,
            query_index: query,
            keyframe: t,
            bbox,
        })
        .map_err(|e| e.to_string())?;
    let mask = masks
        .frames()
        .get(t)
        .ok_or_else(|| format!("tracker returned {} masks", masks.len()))?;
    mask.iou(gt).map_err(|e| e.to_string())
}

fn judge_video(
    video: &VideoManifest,
    tracker: &dyn Tracker,
    threshold: f64,
) -> Result<CurationDecision, ManifestError> {
    let source = video.source();
    let mut diagnostics = Vec::new();
    let mut mean_iou = Vec::with_capacity(video.queries.len());
    for q in 0..video.queries.len() {
        let gt = video.query_masks(q)?;
        let mut scores = Vec::new();
        for (t, mask) in gt.frames().iter().enumerate() {
            let Some(bbox) = mask_to_bbox(mask) else {
                continue;
            };
            let iou = frame_iou(tracker, &source, q, t, bbox, mask).unwrap_or_else(|e| {
                diagnostics.push(format!("query {q} frame {t}: {e}"));
                0.0
            });
            scores.push(iou);
        }
        mean_iou
            .push((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64));
    }
    let discard = mean_iou.iter().flatten().any(|m| *m < threshold);
    Ok(CurationDecision {
        video_id: video.id.clone(),
        mean_iou,
        decision: if discard {
            Decision::Discard
        } else {
            Decision::Keep
        },
        threshold,
        diagnostics,
    })
}

/// Seed the tracker on every annotated frame with that frame's box, score
/// the returned mask against the annotation, and drop every video where
/// some query averages strictly below `threshold`.
pub fn tracker_filter(
    manifest: &Manifest,
    tracker: &dyn Tracker,
    threshold: f64,
) -> Result<CurationOutcome, ManifestError> {
    if !threshold.is_finite() {
        return Err(schema(
            "threshold",
            format!("expected a finite number, got {threshold}"),
        ));
    }
    let decisions = manifest
        .videos
        .par_iter()
        .map(|v| judge_video(v, tracker, threshold))
        .collect::<Result<Vec<_>, _>>()?;
    let curated = Manifest {
        videos: manifest
            .videos
            .iter()
            .zip(&decisions)
            .filter(|(_, d)| d.decision == Decision::Keep)
            .map(|(v, _)| v.clone())
            .collect(),
    };
    Ok(CurationOutcome { decisions, curated })
}
