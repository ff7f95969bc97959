//! The two-round rollout.
//!
//! Round 1 shows the policy the sampled frames and the query and expects a
//! keyframe index plus a short object description. If that parses, round 2
//! shows the keyframe alone (resized for grounding) and expects a box. The
//! box is mapped back to source-frame pixels, scored, and can seed a
//! [`Tracker`] to segment the whole video.

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, FrameSize, GeometryError, MaskSequence};
use crate::parser::{parse_round1, parse_round2, ParseStatus, Round1Parse, Round2Parse};
use crate::reward::{
    format_reward, spatial_reward, temporal_reward, total_reward, GtFrameAreas, RewardBreakdown,
    TemporalRewardMode,
};
use crate::rng::{pair_index, substream, StreamRng};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdapterError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out after {0} ms")]
    Timeout(u64),
    #[error("server returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("{0}")]
    Unavailable(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RolloutError {
    #[error("invalid episode: {0}")]
    InvalidEpisode(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("tracker failed: {0}")]
    Tracker(#[from] AdapterError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A source video as the engine sees it: dimensions, length and optionally
/// the image files of its frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSource {
    pub id: String,
    pub size: FrameSize,
    pub frame_count: usize,
    pub fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_paths: Option<Vec<PathBuf>>,
}

impl VideoSource {
    pub fn frame(&self, index: usize) -> FrameRef {
        FrameRef {
            source_index: index,
            size: self.size,
            path: self
                .frame_paths
                .as_ref()
                .and_then(|p| p.get(index).cloned()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    pub source_index: usize,
    pub size: FrameSize,
    pub path: Option<PathBuf>,
}

/// A frame to show the policy, and the resolution to show it at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub frame: FrameRef,
    pub resize_to: FrameSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRequest {
    pub round: u8,
    pub prompt: String,
    /// New images for this round only; earlier rounds' images are implied by
    /// the history.
    pub images: Vec<ImageRef>,
    pub history: Vec<Turn>,
}

/// Anything that turns a prompt (plus images and history) into text.
pub trait Policy: Send + Sync {
    fn generate(
        &self,
        request: &PolicyRequest,
        rng: &mut StreamRng,
    ) -> Result<String, AdapterError>;
}

pub struct TrackRequest<'a> {
    pub video: &'a VideoSource,
    pub query_index: usize,
    /// Keyframe index on the source timeline.
    pub keyframe: usize,
    /// Seed box in source-frame pixels.
    pub bbox: BBox,
}

/// Mask propagation seeded by one box on one frame.
pub trait Tracker: Send + Sync {
    fn propagate(&self, request: &TrackRequest<'_>) -> Result<MaskSequence, AdapterError>;
}

/// One query on one video, with the frames sampled for the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeInput {
    pub video: VideoSource,
    pub query: String,
    pub original_frame_indices: Vec<usize>,
}

impl EpisodeInput {
    pub fn new(
        video: VideoSource,
        query: impl Into<String>,
        original_frame_indices: Vec<usize>,
    ) -> Result<Self, RolloutError> {
        let query = query.into();
        if query.trim().is_empty() {
            return Err(RolloutError::InvalidEpisode("query is empty".into()));
        }
        if original_frame_indices.is_empty() {
            return Err(RolloutError::InvalidEpisode("no sampled frames".into()));
        }
        if original_frame_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(RolloutError::InvalidEpisode(
                "sampled frame indices must be strictly increasing".into(),
            ));
        }
        if original_frame_indices
            .last()
            .is_some_and(|&i| i >= video.frame_count)
        {
            return Err(RolloutError::InvalidEpisode(format!(
                "sampled index beyond the {} source frames",
                video.frame_count
            )));
        }
        if !video.fps.is_finite() || video.fps <= 0.0 {
            return Err(RolloutError::InvalidEpisode(format!(
                "fps must be positive, got {}",
                video.fps
            )));
        }
        Ok(Self {
            video,
            query,
            original_frame_indices,
        })
    }

    /// Uniformly sample `count` frames of `video`.
    pub fn uniform(
        video: VideoSource,
        query: impl Into<String>,
        count: usize,
    ) -> Result<Self, RolloutError> {
        let indices = sample_frames_uniform(video.frame_count, count)?;
        Self::new(video, query, indices)
    }

    /// Number of sampled frames `T`.
    pub fn num_frames(&self) -> usize {
        self.original_frame_indices.len()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.video.frame_count as f64 / self.video.fps
    }

    pub fn sampled_frame(&self, k: usize) -> FrameRef {
        self.video.frame(self.original_frame_indices[k])
    }
}

/// `floor(i * total / count)` for `i < count`, or every frame when the video
/// is no longer than `count`.
pub fn sample_frames_uniform(
    total_frames: usize,
    count: usize,
) -> Result<Vec<usize>, RolloutError> {
    if total_frames == 0 || count == 0 {
        return Err(RolloutError::InvalidInput(format!(
            "cannot sample {count} of {total_frames} frames"
        )));
    }
    if total_frames <= count {
        return Ok((0..total_frames).collect());
    }
    Ok((0..count).map(|i| i * total_frames / count).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// Resolution of every sampled frame in round 1.
    pub round1_image: FrameSize,
    /// Resolution of the keyframe in round 2; boxes come back in this space.
    pub round2_image: FrameSize,
    pub temporal_mode: TemporalRewardMode,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            round1_image: FrameSize::new(448, 448).expect("static size"),
            round2_image: FrameSize::new(840, 840).expect("static size"),
            temporal_mode: TemporalRewardMode::SoftArea,
        }
    }
}

pub fn assemble_prompt_round1(ep: &EpisodeInput) -> Result<String, RolloutError> {
    if ep.query.trim().is_empty() {
        return Err(RolloutError::InvalidEpisode("query is empty".into()));
    }
    let nframes = ep.num_frames();
    Ok(format!(
        "You are given {nframes} frames uniformly sampled from a video that lasts {second:.1} seconds. \
The frames are shown in temporal order and indexed from 0 to {last}.\n\
Question: \"{question}\"\n\
Work out which object the question refers to. Compare the salient objects in the video, \
check in which frames each of them appears, and pick the single frame where the target is \
most clearly visible, least occluded and large enough to localize precisely.\n\
First write your reasoning between <think> and </think>. Then give the result between \
<answer> and </answer> as JSON: {{\"keyframe\": <frame index from 0 to {last}>, \"object\": \"<short description of the target in that frame>\"}}.",
        second = ep.duration_seconds(),
        last = nframes - 1,
        question = ep.query.trim(),
    ))
}

pub fn assemble_prompt_round2(
    keyframe: usize,
    description: &str,
    image: FrameSize,
) -> Result<String, RolloutError> {
    if description.trim().is_empty() {
        return Err(RolloutError::InvalidInput(
            "object description is empty".into(),
        ));
    }
    Ok(format!(
        "The image is frame {keyframe}, the keyframe you selected. Locate \"{description}\" in it.\n\
First write your reasoning between <think> and </think>. Then give one tight bounding box \
between <answer> and </answer> as JSON: {{\"bbox\": [x1, y1, x2, y2]}}, in pixel coordinates \
of this {w}x{h} image.",
        description = description.trim(),
        w = image.width(),
        h = image.height(),
    ))
}

/// Ground truth at the sampled frames, in source-frame pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boxes: Vec<Option<BBox>>,
    pub areas: GtFrameAreas,
}

impl GroundTruth {
    pub fn from_boxes(boxes: Vec<Option<BBox>>) -> Self {
        let areas = GtFrameAreas::from_boxes(&boxes);
        Self { boxes, areas }
    }
}

fn round_half_up(v: f64) -> u32 {
    (v + 0.5).floor().max(0.0) as u32
}

fn rescale_axis(lo: u32, hi: u32, from: u32, to: u32) -> (u32, u32) {
    let scale = to as f64 / from as f64;
    let mut a = round_half_up(lo as f64 * scale).min(to);
    let mut b = round_half_up(hi as f64 * scale).min(to);
    // a box thinner than one target pixel still covers one pixel
    if a >= b {
        if a >= to {
            a = to - 1;
        }
        b = a + 1;
    }
    (a, b)
}

/// Map a box between two image resolutions with independent x/y scaling.
pub fn rescale_box(bbox: &BBox, from: FrameSize, to: FrameSize) -> BBox {
    let (x1, x2) = rescale_axis(bbox.x1(), bbox.x2(), from.width(), to.width());
    let (y1, y2) = rescale_axis(bbox.y1(), bbox.y2(), from.height(), to.height());
    BBox::new(x1, y1, x2, y2).expect("rescale keeps boxes non-degenerate")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundTiming {
    pub round1_ms: f64,
    pub round2_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub y1: String,
    pub round1: Round1Parse,
    pub y2: Option<String>,
    pub round2: Option<Round2Parse>,
    /// Keyframe on the source timeline.
    pub keyframe_original: Option<usize>,
    /// Round-2 box mapped to source-frame pixels.
    pub bbox_original: Option<BBox>,
    /// `y1` followed by `y2`.
    pub o: String,
    pub reward: Option<RewardBreakdown>,
    pub turns: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub timing: RoundTiming,
}

impl RolloutTrace {
    pub fn s1(&self) -> ParseStatus {
        self.round1.status
    }

    pub fn s2(&self) -> ParseStatus {
        self.round2.as_ref().map_or(ParseStatus::Fail, |r| r.status)
    }

    pub fn total_reward(&self) -> f64 {
        self.reward.map_or(0.0, |r| r.total)
    }
}

/// Parses and reward for a pair of transcripts; shared by live rollouts and
/// offline rescoring.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTranscripts {
    pub round1: Round1Parse,
    pub round2: Option<Round2Parse>,
    pub keyframe_original: Option<usize>,
    pub bbox_original: Option<BBox>,
    pub reward: Option<RewardBreakdown>,
}

pub fn score_transcripts(
    ep: &EpisodeInput,
    config: &RolloutConfig,
    y1: &str,
    y2: Option<&str>,
    gt: Option<&GroundTruth>,
) -> Result<ScoredTranscripts, RolloutError> {
    if let Some(gt) = gt {
        if gt.boxes.len() != ep.num_frames() || gt.areas.len() != ep.num_frames() {
            return Err(RolloutError::InvalidInput(format!(
                "ground truth covers {} frames, episode samples {}",
                gt.boxes.len(),
                ep.num_frames()
            )));
        }
    }
    let round1 = parse_round1(y1, ep.num_frames());
    let keyframe = round1.keyframe;
    let round2 = match (keyframe, y2) {
        (Some(_), Some(y2)) => Some(parse_round2(y2, config.round2_image)),
        (Some(_), None) => {
            return Err(RolloutError::InvalidInput(
                "round 1 succeeded but round 2 transcript is missing".into(),
            ))
        }
        (None, Some(_)) => {
            return Err(RolloutError::InvalidInput(
                "round 2 transcript present after a failed round 1".into(),
            ))
        }
        (None, None) => None,
    };
    let bbox_original = round2
        .as_ref()
        .and_then(|r| r.bbox)
        .map(|b| rescale_box(&b, config.round2_image, ep.video.size));
    let reward = gt.map(|gt| {
        let r_f = format_reward(&round1.checklist, round2.as_ref().map(|r| &r.checklist));
        let r_t = keyframe.map_or(0.0, |k| temporal_reward(config.temporal_mode, k, &gt.areas));
        let r_s = match (keyframe, bbox_original) {
            (Some(k), Some(pred)) => gt.boxes[k].map_or(0.0, |g| spatial_reward(&pred, &g)),
            _ => 0.0,
        };
        let s2 = round2.as_ref().map_or(ParseStatus::Fail, |r| r.status);
        total_reward(r_f, r_t, r_s, round1.status, s2)
    });
    Ok(ScoredTranscripts {
        keyframe_original: keyframe.map(|k| ep.original_frame_indices[k]),
        round1,
        round2,
        bbox_original,
        reward,
    })
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn failed_trace(
    y1: String,
    y2: Option<String>,
    ep: &EpisodeInput,
    config: &RolloutConfig,
    err: AdapterError,
    timing: RoundTiming,
) -> RolloutTrace {
    let round1 = parse_round1(&y1, ep.num_frames());
    let round2 = y2.as_ref().map(|y| parse_round2(y, config.round2_image));
    let turns = if y2.is_some() { 2 } else { 1 };
    RolloutTrace {
        o: format!("{y1}{}", y2.as_deref().unwrap_or("")),
        y1,
        round1,
        y2,
        round2,
        keyframe_original: None,
        bbox_original: None,
        reward: Some(RewardBreakdown::zero()),
        turns,
        failure: Some(err.to_string()),
        timing,
    }
}

/// Run one two-round rollout.
///
/// A policy error does not abort: the trace is marked failed with zero
/// reward so a group keeps its size.
pub fn run_rollout(
    ep: &EpisodeInput,
    policy: &dyn Policy,
    config: &RolloutConfig,
    gt: Option<&GroundTruth>,
    rng: &mut StreamRng,
) -> Result<RolloutTrace, RolloutError> {
    let prompt1 = assemble_prompt_round1(ep)?;
    let request1 = PolicyRequest {
        round: 1,
        prompt: prompt1.clone(),
        images: (0..ep.num_frames())
            .map(|k| ImageRef {
                frame: ep.sampled_frame(k),
                resize_to: config.round1_image,
            })
            .collect(),
        history: Vec::new(),
    };
    let mut timing = RoundTiming::default();
    let start = Instant::now();
    let y1 = match policy.generate(&request1, rng) {
        Ok(text) => text,
        Err(err) => {
            timing.round1_ms = elapsed_ms(start);
            return Ok(failed_trace(String::new(), None, ep, config, err, timing));
        }
    };
    timing.round1_ms = elapsed_ms(start);

    let round1 = parse_round1(&y1, ep.num_frames());
    let (Some(keyframe), Some(description)) = (round1.keyframe, round1.description.as_deref())
    else {
        let scored = score_transcripts(ep, config, &y1, None, gt)?;
        return Ok(RolloutTrace {
            o: y1.clone(),
            y1,
            round1: scored.round1,
            y2: None,
            round2: None,
            keyframe_original: None,
            bbox_original: None,
            reward: scored.reward,
            turns: 1,
            failure: None,
            timing,
        });
    };

    let request2 = PolicyRequest {
        round: 2,
        prompt: assemble_prompt_round2(keyframe, description, config.round2_image)?,
        images: vec![ImageRef {
            frame: ep.sampled_frame(keyframe),
            resize_to: config.round2_image,
        }],
        history: vec![
            Turn {
                role: Role::User,
                text: prompt1,
            },
            Turn {
                role: Role::Assistant,
                text: y1.clone(),
            },
        ],
    };
    let start = Instant::now();
    let y2 = match policy.generate(&request2, rng) {
        Ok(text) => text,
        Err(err) => {
            timing.round2_ms = Some(elapsed_ms(start));
            return Ok(failed_trace(
                y1,
                Some(String::new()),
                ep,
                config,
                err,
                timing,
            ));
        }
    };
    timing.round2_ms = Some(elapsed_ms(start));

    let scored = score_transcripts(ep, config, &y1, Some(&y2), gt)?;
    Ok(RolloutTrace {
        o: format!("{y1}{y2}"),
        y1,
        round1: scored.round1,
        y2: Some(y2),
        round2: scored.round2,
        keyframe_original: scored.keyframe_original,
        bbox_original: scored.bbox_original,
        reward: scored.reward,
        turns: 2,
        failure: None,
        timing,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRollouts {
    pub traces: Vec<RolloutTrace>,
    /// Total reward per member, 0 for unscored or failed rollouts.
    pub rewards: Vec<f64>,
}

/// `n` independent rollouts of one episode. Member `i` draws from the
/// stream `("rollout", (group_index, i))` of `seed`, so results do not depend
/// on scheduling.
pub fn run_group(
    ep: &EpisodeInput,
    policy: &dyn Policy,
    config: &RolloutConfig,
    gt: Option<&GroundTruth>,
    n: usize,
    seed: u64,
    group_index: u64,
) -> Result<GroupRollouts, RolloutError> {
    if n < 2 {
        return Err(RolloutError::InvalidInput(format!(
            "group size must be >= 2, got {n}"
        )));
    }
    let traces = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, "rollout", pair_index(group_index, i as u64));
            run_rollout(ep, policy, config, gt, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let rewards = traces.iter().map(RolloutTrace::total_reward).collect();
    Ok(GroupRollouts { traces, rewards })
}

/// Seed the tracker with the trace's keyframe and box and propagate over
/// the whole source video.
pub fn segment_video(
    ep: &EpisodeInput,
    query_index: usize,
    trace: &RolloutTrace,
    tracker: &dyn Tracker,
) -> Result<MaskSequence, RolloutError> {
    let (Some(keyframe), Some(bbox), ParseStatus::Succ) =
        (trace.keyframe_original, trace.bbox_original, trace.s2())
    else {
        return Err(RolloutError::InvalidInput(
            "trace has no successful round-2 box".into(),
        ));
    };
    let masks = tracker.propagate(&TrackRequest {
        video: &ep.video,
        query_index,
        keyframe,
        bbox,
    })?;
    if masks.len() != ep.video.frame_count {
        return Err(RolloutError::Tracker(AdapterError::Protocol(format!(
            "tracker returned {} masks for {} frames",
            masks.len(),
            ep.video.frame_count
        ))));
    }
    if masks.size() != ep.video.size {
        return Err(RolloutError::Geometry(GeometryError::SizeMismatch {
            left: ep.video.size,
            right: masks.size(),
        }));
    }
    Ok(masks)
}

/// One line of a rollout trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub video_id: String,
    pub query_index: usize,
    pub member: usize,
    pub frame_indices: Vec<usize>,
    pub trace: RolloutTrace,
}
