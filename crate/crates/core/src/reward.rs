//! Rule-based rewards: format, temporal, spatial, and the status-gated total.

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::parser::{FormatChecklist, ParseStatus};

/// Which temporal reward to pay for the keyframe choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum TemporalRewardMode {
    #[serde(rename = "none")]
    NoReward,
    #[serde(rename = "binary")]
    Binary01,
    #[default]
    #[serde(rename = "soft")]
    SoftArea,
}

impl TemporalRewardMode {
    pub const ALL: [TemporalRewardMode; 3] = [
        TemporalRewardMode::NoReward,
        TemporalRewardMode::Binary01,
        TemporalRewardMode::SoftArea,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemporalRewardMode::NoReward => "none",
            TemporalRewardMode::Binary01 => "binary",
            TemporalRewardMode::SoftArea => "soft",
        }
    }
}

impl std::str::FromStr for TemporalRewardMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(TemporalRewardMode::NoReward),
            "binary" => Ok(TemporalRewardMode::Binary01),
            "soft" => Ok(TemporalRewardMode::SoftArea),
            other => Err(format!(
                "unknown temporal mode `{other}` (expected none|binary|soft)"
            )),
        }
    }
}

impl std::fmt::Display for TemporalRewardMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ground-truth box area at each sampled frame, 0 where the target is absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtFrameAreas(Vec<u64>);

impl GtFrameAreas {
    pub fn new(areas: Vec<u64>) -> Self {
        Self(areas)
    }

    pub fn from_boxes(boxes: &[Option<BBox>]) -> Self {
        Self(boxes.iter().map(|b| b.map_or(0, |b| b.area())).collect())
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Fraction of passing rules over the rounds that were executed.
pub fn format_reward(round1: &FormatChecklist, round2: Option<&FormatChecklist>) -> f64 {
    let (passed, total) = match round2 {
        Some(r2) => (round1.passed() + r2.passed(), 2 * FormatChecklist::RULES),
        None => (round1.passed(), FormatChecklist::RULES),
    };
    passed as f64 / total as f64
}

/// Keyframe reward. Panics if `keyframe` is outside `areas`.
///
/// `SoftArea` min-max normalizes over all sampled frames, absent frames
/// included. When every area is equal and the target is present the
/// normalization is 0/0 and full credit is paid.
pub fn temporal_reward(mode: TemporalRewardMode, keyframe: usize, areas: &GtFrameAreas) -> f64 {
    let a = areas.as_slice();
    let here = a[keyframe];
    match mode {
        TemporalRewardMode::NoReward => 0.0,
        TemporalRewardMode::Binary01 => (here > 0) as u8 as f64,
        TemporalRewardMode::SoftArea => {
            if here == 0 {
                return 0.0;
            }
            let min = *a.iter().min().expect("non-empty areas");
            let max = *a.iter().max().expect("non-empty areas");
            if max == min {
                1.0
            } else {
                (here - min) as f64 / (max - min) as f64
            }
        }
    }
}

/// 1 when the boxes overlap with IoU strictly above one half.
pub fn spatial_reward(pred: &BBox, gt: &BBox) -> f64 {
    if pred.iou(gt) > 0.5 {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_f: f64,
    pub r_t: f64,
    pub r_s: f64,
    pub s1: ParseStatus,
    pub s2: ParseStatus,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn zero() -> Self {
        Self {
            r_f: 0.0,
            r_t: 0.0,
            r_s: 0.0,
            s1: ParseStatus::Fail,
            s2: ParseStatus::Fail,
            total: 0.0,
        }
    }
}

/// `r_f + [s1 succ] r_t + [s1 succ and s2 succ] r_s`; gated-out terms are
/// stored as 0.
pub fn total_reward(
    r_f: f64,
    r_t: f64,
    r_s: f64,
    s1: ParseStatus,
    s2: ParseStatus,
) -> RewardBreakdown {
    let r_t = if s1.is_succ() { r_t } else { 0.0 };
    let r_s = if s1.is_succ() && s2.is_succ() {
        r_s
    } else {
        0.0
    };
    RewardBreakdown {
        r_f,
        r_t,
        r_s,
        s1,
        s2,
        total: r_f + r_t + r_s,
    }
}
