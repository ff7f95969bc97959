//! In-process policy and tracker stand-ins for tests, demos and offline runs.

use std::collections::HashMap;

use rand::Rng;

use crate::geometry::{mask_to_bbox, BBox, MaskSequence};
use crate::rng::StreamRng;
use crate::rollout::{AdapterError, Policy, PolicyRequest, TrackRequest, Tracker};

/// Canonical round-1 answer text.
pub fn render_round1(keyframe: usize, description: &str) -> String {
    let payload = serde_json::json!({ "keyframe": keyframe, "object": description });
    format!("<think>The target is clearest in frame {keyframe}.</think><answer>{payload}</answer>")
}

/// Canonical round-2 answer text.
pub fn render_round2(bbox: &BBox) -> String {
    let [x1, y1, x2, y2] = bbox.coords();
    format!("<think>The object spans this region.</think><answer>{{\"bbox\": [{x1}, {y1}, {x2}, {y2}]}}</answer>")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptRule {
    /// Only match requests of this round.
    pub round: Option<u8>,
    /// Only match prompts containing this text.
    pub prompt_contains: Option<String>,
    /// One is drawn uniformly per call.
    pub responses: Vec<String>,
}

/// Answers from a rule table; the first matching rule wins.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedPolicy {
    rules: Vec<ScriptRule>,
    fallback: String,
}

impl ScriptedPolicy {
    pub fn new(rules: Vec<ScriptRule>, fallback: impl Into<String>) -> Self {
        Self {
            rules,
            fallback: fallback.into(),
        }
    }

    /// The same text for every request.
    pub fn constant(text: impl Into<String>) -> Self {
        Self::new(Vec::new(), text)
    }

    /// Separate fixed answers for the two rounds.
    pub fn per_round(round1: impl Into<String>, round2: impl Into<String>) -> Self {
        Self::new(
            vec![
                ScriptRule {
                    round: Some(1),
                    prompt_contains: None,
                    responses: vec![round1.into()],
                },
                ScriptRule {
                    round: Some(2),
                    prompt_contains: None,
                    responses: vec![round2.into()],
                },
            ],
            "",
        )
    }

    /// Well-formed answers naming `keyframe` and `bbox` (in round-2 image
    /// coordinates).
    pub fn oracle(keyframe: usize, description: &str, bbox: BBox) -> Self {
        Self::per_round(render_round1(keyframe, description), render_round2(&bbox))
    }
}

impl Policy for ScriptedPolicy {
    fn generate(
        &self,
        request: &PolicyRequest,
        rng: &mut StreamRng,
    ) -> Result<String, AdapterError> {
        let rule = self.rules.iter().find(|r| {
            r.round.is_none_or(|round| round == request.round)
                && r.prompt_contains
                    .as_deref()
                    .is_none_or(|p| request.prompt.contains(p))
                && !r.responses.is_empty()
        });
        Ok(match rule {
            Some(r) if r.responses.len() == 1 => r.responses[0].clone(),
            Some(r) => r.responses[rng.random_range(0..r.responses.len())].clone(),
            None => self.fallback.clone(),
        })
    }
}

/// Returns ground-truth masks when seeded with a box that matches the
/// ground truth at the keyframe (IoU > 0.5), empty masks otherwise.
#[derive(Debug, Clone, Default)]
pub struct OracleTracker {
    truth: HashMap<(String, usize), MaskSequence>,
}

impl OracleTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, video_id: impl Into<String>, query_index: usize, masks: MaskSequence) {
        self.truth.insert((video_id.into(), query_index), masks);
    }
}

impl Tracker for OracleTracker {
    fn propagate(&self, request: &TrackRequest<'_>) -> Result<MaskSequence, AdapterError> {
        let key = (request.video.id.clone(), request.query_index);
        let Some(gt) = self.truth.get(&key) else {
            return Err(AdapterError::Unavailable(format!(
                "no ground truth for video {} query {}",
                request.video.id, request.query_index
            )));
        };
        let hit = gt
            .frames()
            .get(request.keyframe)
            .and_then(mask_to_bbox)
            .is_some_and(|b| b.iou(&request.bbox) > 0.5);
        if hit {
            Ok(gt.clone())
        } else {
            MaskSequence::empty(gt.size(), gt.len())
                .map_err(|e| AdapterError::Protocol(e.to_string()))
        }
    }
}
