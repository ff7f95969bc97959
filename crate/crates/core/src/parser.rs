//! Extraction of think/answer sections and the JSON payloads of both rounds.
//!
//! Every parse yields a [`FormatChecklist`] with four rules: think block
//! present, answer block present, payload parses as a JSON object, required
//! fields valid. A round succeeds exactly when all four pass.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::geometry::{BBox, FrameSize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    Succ,
    Fail,
}

impl ParseStatus {
    pub fn is_succ(self) -> bool {
        self == ParseStatus::Succ
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatChecklist {
    pub think_block_present: bool,
    pub answer_block_present: bool,
    pub payload_parses: bool,
    pub required_fields_valid: bool,
}

impl FormatChecklist {
    pub const RULES: usize = 4;

    pub fn flags(&self) -> [bool; 4] {
        [
            self.think_block_present,
            self.answer_block_present,
            self.payload_parses,
            self.required_fields_valid,
        ]
    }

    pub fn passed(&self) -> usize {
        self.flags().iter().filter(|&&f| f).count()
    }

    pub fn all_pass(&self) -> bool {
        self.passed() == Self::RULES
    }

    fn status(&self) -> ParseStatus {
        if self.all_pass() {
            ParseStatus::Succ
        } else {
            ParseStatus::Fail
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round1Parse {
    pub status: ParseStatus,
    pub keyframe: Option<usize>,
    pub description: Option<String>,
    pub checklist: FormatChecklist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round2Parse {
    pub status: ParseStatus,
    /// Box in policy-image coordinates.
    pub bbox: Option<BBox>,
    pub checklist: FormatChecklist,
}

fn is_tag_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// True when every `<name>` / `</name>` tag in `text` closes in order.
fn tags_balanced(text: &str) -> bool {
    let mut stack: Vec<&str> = Vec::new();
    let mut rest = text;
    while let Some(lt) = rest.find('<') {
        rest = &rest[lt + 1..];
        let Some(gt) = rest.find('>') else { break };
        let body = &rest[..gt];
        if let Some(name) = body.strip_prefix('/') {
            if is_tag_name(name) {
                if stack.pop() != Some(name) {
                    return false;
                }
                rest = &rest[gt + 1..];
            }
        } else if is_tag_name(body) {
            stack.push(body);
            rest = &rest[gt + 1..];
        }
    }
    stack.is_empty()
}

/// Inner text of the first `<tag>...</tag>` pair.
///
/// Returns `None` when the opening tag is missing, never closed, or the
/// enclosed text contains unbalanced or crossed tags (including a second
/// opening of `tag` itself).
pub fn extract_tagged<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open)? + open.len();
    let rest = &text[start..];
    let inner = &rest[..rest.find(&close)?];
    tags_balanced(inner).then_some(inner)
}

/// The first JSON object that parses starting at some `{` in `text`.
fn first_json_object(text: &str) -> Option<Map<String, Value>> {
    text.match_indices('{').find_map(|(pos, _)| {
        let mut stream = serde_json::Deserializer::from_str(&text[pos..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => Some(map),
            _ => None,
        }
    })
}

/// Shared first three rules; returns the payload when it parses.
fn structural_checks(text: &str) -> (FormatChecklist, Option<Map<String, Value>>) {
    let think = extract_tagged(text, "think").is_some();
    let answer = extract_tagged(text, "answer");
    let payload = answer.and_then(first_json_object);
    let checklist = FormatChecklist {
        think_block_present: think,
        answer_block_present: answer.is_some(),
        payload_parses: payload.is_some(),
        required_fields_valid: false,
    };
    (checklist, payload)
}

/// Parse a round-1 response: `{"keyframe": <int>, "object": <string>}`.
///
/// `num_frames` is the length of the sampled frame grid; `keyframe` must
/// index into it.
pub fn parse_round1(text: &str, num_frames: usize) -> Round1Parse {
    let (mut checklist, payload) = structural_checks(text);
    let fields = payload.and_then(|map| {
        let keyframe = map.get("keyframe")?.as_u64()?;
        let keyframe = usize::try_from(keyframe).ok().filter(|&k| k < num_frames)?;
        let object = map.get("object")?.as_str()?.trim();
        (!object.is_empty()).then(|| (keyframe, object.to_string()))
    });
    checklist.required_fields_valid = fields.is_some();
    let status = checklist.status();
    let (keyframe, description) = match (status, fields) {
        (ParseStatus::Succ, Some((k, d))) => (Some(k), Some(d)),
        _ => (None, None),
    };
    Round1Parse {
        status,
        keyframe,
        description,
        checklist,
    }
}

fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// Validate raw `[x1, y1, x2, y2]`, clamp to the image, and snap to pixels.
fn bbox_from_value(value: &Value, image: FrameSize) -> Option<BBox> {
    let coords = value.as_array()?;
    if coords.len() != 4 {
        return None;
    }
    let mut raw = [0.0f64; 4];
    for (slot, v) in raw.iter_mut().zip(coords) {
        *slot = v.as_f64().filter(|f| f.is_finite())?;
    }
    let [x1, y1, x2, y2] = raw;
    if x1 >= x2 || y1 >= y2 {
        return None;
    }
    let (w, h) = (image.width() as f64, image.height() as f64);
    let snap = |v: f64, hi: f64| round_half_up(v.clamp(0.0, hi)) as u32;
    BBox::new(snap(x1, w), snap(y1, h), snap(x2, w), snap(y2, h)).ok()
}

/// Parse a round-2 response: `{"bbox": [x1, y1, x2, y2]}` in the coordinates
/// of the `image` the policy was shown.
pub fn parse_round2(text: &str, image: FrameSize) -> Round2Parse {
    let (mut checklist, payload) = structural_checks(text);
    let bbox = payload.and_then(|map| bbox_from_value(map.get("bbox")?, image));
    checklist.required_fields_valid = bbox.is_some();
    let status = checklist.status();
    Round2Parse {
        status,
        bbox: bbox.filter(|_| status.is_succ()),
        checklist,
    }
}
