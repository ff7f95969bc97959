//! JSON bodies of the policy and tracker endpoints.

use segchain_core::rollout::Turn;
use segchain_core::RleRecord;
use serde::{Deserialize, Serialize};

/// `POST /generate`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub round: u8,
    pub prompt: String,
    /// Base64-encoded PNGs.
    pub images: Vec<String>,
    pub history: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRef {
    pub video_id: String,
    pub query_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FramesPayload {
    Images(Vec<String>),
    Reference { manifest_ref: ManifestRef },
}

/// `POST /propagate`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagateRequest {
    pub frames: FramesPayload,
    pub keyframe: usize,
    pub bbox: [u32; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagateResponse {
    pub masks: Vec<RleRecord>,
}
