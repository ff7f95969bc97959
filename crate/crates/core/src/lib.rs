//! Decomposed two-round video object segmentation: rollout protocol,
//! structured-output parsing, rule-based rewards, group-relative policy
//! optimization, VOS metrics and training-data curation.
//!
//! Model-specific pieces (the policy that writes text, the tracker that
//! propagates masks) sit behind the [`rollout::Policy`] and
//! [`rollout::Tracker`] traits. The [`lab`] module closes the loop with a
//! small synthetic environment and a two-head softmax policy.

pub mod adapters;
pub mod curation;
pub mod geometry;
pub mod grpo;
pub mod lab;
pub mod metrics;
pub mod parser;
pub mod reward;
pub mod rng;
pub mod rollout;

pub use geometry::{BBox, BinaryMask, FrameSize, GeometryError, MaskSequence, RleRecord};
pub use parser::{FormatChecklist, ParseStatus, Round1Parse, Round2Parse};
pub use reward::{GtFrameAreas, RewardBreakdown, TemporalRewardMode};
