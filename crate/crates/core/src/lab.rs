//! A seeded synthetic environment and a two-head linear softmax policy,
//! trained end to end through the text protocol, parser and rewards.
//!
//! Each episode is a short clip of one moving, growing and shrinking target
//! that is sometimes occluded. The frame head sees two noisy per-frame
//! features (relative size, visibility). At every frame there is a fixed
//! slate of candidate boxes, exactly one of which matches the target when
//! it is visible; the box head sees each candidate's offset from a noisy
//! anchor.

use std::f64::consts::TAU;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{render_round1, render_round2};
use crate::geometry::{BBox, FrameSize};
use crate::grpo::{
    ascent_step, exact_kl, linear_logits, mean_decision_kl, softmax, surrogate_gradient,
    GrpoConfig, GrpoError, HeadDims, MemberActions, PolicyParams, RolloutGroup, SoftmaxDecision,
};
use crate::parser::parse_round1;
use crate::reward::{temporal_reward, TemporalRewardMode};
use crate::rng::{substream, StreamRng};
use crate::rollout::{
    rescale_box, run_group, run_rollout, AdapterError, EpisodeInput, GroundTruth, Policy,
    PolicyRequest, Role, RolloutConfig, RolloutError, RolloutTrace, VideoSource,
};

pub const FRAME_FEATURES: usize = 2;
pub const BOX_FEATURES: usize = 4;
pub const DIMS: HeadDims = HeadDims {
    frame: FRAME_FEATURES,
    boxes: BOX_FEATURES,
};
/// First seed of the held-out episodes; training seeds are drawn below it.
pub const HELD_OUT_SEED_OFFSET: u64 = 1_000_000;
pub const TARGET_DESCRIPTION: &str = "the target";

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid lab config: {0}")]
    Config(String),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error("parameters became non-finite at step {step}")]
    Divergence { step: usize },
    #[error("could not recover the toy policy's choices from rollout {member} of step {step}")]
    ActionRecovery { step: usize, member: usize },
    #[error("no episodes to evaluate")]
    NoEpisodes,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabConfig {
    pub frames: usize,
    pub candidates: usize,
    pub occlusion_rate: f64,
    pub feature_noise: f64,
    /// Std of the anchor's center offset (in target widths/heights) and of
    /// its log-size offset.
    pub anchor_noise: f64,
    pub frame_size: FrameSize,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            candidates: 12,
            occlusion_rate: 0.2,
            feature_noise: 0.05,
            anchor_noise: 0.1,
            // 840 = 2 * 420 = 3 * 280, so boxes survive the round-2 resize exactly
            frame_size: FrameSize::new(420, 280).expect("static size"),
        }
    }
}

impl LabConfig {
    pub fn validate(&self, policy_image: FrameSize) -> Result<(), LabError> {
        if self.frames == 0 {
            return Err(LabError::Config("frames must be positive".into()));
        }
        if self.candidates < 2 {
            return Err(LabError::Config("need at least 2 candidates".into()));
        }
        if !(0.0..1.0).contains(&self.occlusion_rate) {
            return Err(LabError::Config(format!(
                "occlusion rate {} outside [0, 1)",
                self.occlusion_rate
            )));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite())
            || !(self.anchor_noise >= 0.0 && self.anchor_noise.is_finite())
        {
            return Err(LabError::Config(
                "noise levels must be finite and non-negative".into(),
            ));
        }
        let (w, h) = (self.frame_size.width(), self.frame_size.height());
        if w < 64 || h < 64 {
            return Err(LabError::Config(format!(
                "frame size {} is too small",
                self.frame_size
            )));
        }
        if !policy_image.width().is_multiple_of(w) || !policy_image.height().is_multiple_of(h) {
            return Err(LabError::Config(format!(
                "frame size {} must divide the policy image {}",
                self.frame_size, policy_image
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEpisode {
    pub seed: u64,
    pub size: FrameSize,
    /// Target box per frame; `None` while occluded.
    pub gt: Vec<Option<BBox>>,
    pub frame_features: Vec<[f64; FRAME_FEATURES]>,
    pub candidates: Vec<Vec<BBox>>,
    pub candidate_features: Vec<Vec<[f64; BOX_FEATURES]>>,
    /// Index of the matching candidate per frame.
    pub correct: Vec<Option<usize>>,
}

impl SyntheticEpisode {
    pub fn num_frames(&self) -> usize {
        self.gt.len()
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth::from_boxes(self.gt.clone())
    }

    pub fn input(&self) -> EpisodeInput {
        let t = self.num_frames();
        let video = VideoSource {
            id: format!("synthetic-{}", self.seed),
            size: self.size,
            frame_count: t,
            fps: 2.0,
            frame_paths: None,
        };
        EpisodeInput::new(video, TARGET_DESCRIPTION, (0..t).collect())
            .expect("synthetic episodes are valid")
    }

    pub fn frame_decision(&self, chosen: usize) -> SoftmaxDecision {
        SoftmaxDecision {
            features: self.frame_features.iter().flatten().copied().collect(),
            width: FRAME_FEATURES,
            chosen,
        }
    }

    pub fn box_decision(&self, frame: usize, chosen: usize) -> SoftmaxDecision {
        SoftmaxDecision {
            features: self.candidate_features[frame]
                .iter()
                .flatten()
                .copied()
                .collect(),
            width: BOX_FEATURES,
            chosen,
        }
    }
}

fn centered_box(cx: f64, cy: f64, w: f64, h: f64, size: FrameSize) -> Option<BBox> {
    let (fw, fh) = (size.width() as f64, size.height() as f64);
    let w = w.round().clamp(2.0, fw);
    let h = h.round().clamp(2.0, fh);
    let x1 = (cx - w / 2.0).round().clamp(0.0, fw - w);
    let y1 = (cy - h / 2.0).round().clamp(0.0, fh - h);
    BBox::new(x1 as u32, y1 as u32, (x1 + w) as u32, (y1 + h) as u32).ok()
}

/// `[|dcx|/w, |dcy|/h, |ln(w'/w)|, |ln(h'/h)|]` of `b` relative to `anchor`.
fn offset_features(b: &BBox, anchor: (f64, f64, f64, f64)) -> [f64; BOX_FEATURES] {
    let (ax, ay, aw, ah) = anchor;
    let (cx, cy) = b.center();
    [
        (cx - ax).abs() / aw,
        (cy - ay).abs() / ah,
        (b.width() as f64 / aw).ln().abs(),
        (b.height() as f64 / ah).ln().abs(),
    ]
}

fn box_geometry(b: &BBox) -> (f64, f64, f64, f64) {
    let (cx, cy) = b.center();
    (cx, cy, b.width() as f64, b.height() as f64)
}

fn correct_candidate(rng: &mut StreamRng, target: &BBox, size: FrameSize) -> BBox {
    let (cx, cy, w, h) = box_geometry(target);
    const JITTER: f64 = 0.08;
    loop {
        let b = centered_box(
            cx + rng.random_range(-JITTER..=JITTER) * w,
            cy + rng.random_range(-JITTER..=JITTER) * h,
            w * rng.random_range(-JITTER..=JITTER).exp(),
            h * rng.random_range(-JITTER..=JITTER).exp(),
            size,
        );
        if let Some(b) = b.filter(|b| b.iou(target) > 0.6) {
            return b;
        }
    }
}

fn distractor(rng: &mut StreamRng, target: &BBox, size: FrameSize, taken: &[BBox]) -> BBox {
    let (cx, cy, w, h) = box_geometry(target);
    let (fw, fh) = (size.width() as f64, size.height() as f64);
    loop {
        let b = match rng.random_range(0..3) {
            0 => {
                let sx = rng.random_range(0.5..1.5) * if rng.random_bool(0.5) { w } else { -w };
                let sy = rng.random_range(0.0..1.2) * if rng.random_bool(0.5) { h } else { -h };
                let scale = rng.random_range(0.8f64..1.25);
                centered_box(cx + sx, cy + sy, w * scale, h * scale, size)
            }
            1 => {
                let grow = |rng: &mut StreamRng| {
                    if rng.random_bool(0.5) {
                        rng.random_range(1.7..2.6)
                    } else {
                        rng.random_range(0.35..0.6)
                    }
                };
                let (gx, gy) = (grow(rng), grow(rng));
                centered_box(cx, cy, w * gx, h * gy, size)
            }
            _ => centered_box(
                rng.random_range(0.0..fw),
                rng.random_range(0.0..fh),
                rng.random_range(0.08..0.35) * fw,
                rng.random_range(0.08..0.35) * fh,
                size,
            ),
        };
        let Some(b) = b else { continue };
        let far = offset_features(&b, box_geometry(target))
            .iter()
            .sum::<f64>()
            > 0.4;
        if b.iou(target) <= 0.4 && far && !taken.contains(&b) {
            return b;
        }
    }
}

/// Deterministic in `seed`. At least one frame is always visible.
pub fn generate_episode(seed: u64, config: &LabConfig) -> SyntheticEpisode {
    let mut rng = substream(seed, "synthetic-episode", 0);
    let size = config.frame_size;
    let (fw, fh) = (size.width() as f64, size.height() as f64);
    let t = config.frames;

    let visible: Vec<bool> = loop {
        let v: Vec<bool> = (0..t)
            .map(|_| !rng.random_bool(config.occlusion_rate))
            .collect();
        if v.iter().any(|&x| x) {
            break v;
        }
    };

    let base_w = rng.random_range(0.18..0.32) * fw;
    let base_h = rng.random_range(0.22..0.40) * fh;
    let smin = rng.random_range(0.3..0.5);
    let phase = rng.random_range(0.0..TAU);
    let omega = rng.random_range(0.15..0.5);
    let (mut cx, mut cy) = (
        rng.random_range(0.3..0.7) * fw,
        rng.random_range(0.35..0.65) * fh,
    );
    let (vx, vy) = (
        rng.random_range(-0.02..0.02) * fw,
        rng.random_range(-0.01..0.01) * fh,
    );

    let mut target = Vec::with_capacity(t);
    for i in 0..t {
        let s = smin + (1.0 - smin) * (0.5 + 0.5 * (phase + omega * i as f64).sin());
        let b = centered_box(cx, cy, base_w * s, base_h * s, size).expect("target fits the frame");
        target.push(b);
        cx = (cx + vx).clamp(0.0, fw);
        cy = (cy + vy).clamp(0.0, fh);
    }
    let gt: Vec<Option<BBox>> = target
        .iter()
        .zip(&visible)
        .map(|(b, &v)| v.then_some(*b))
        .collect();
    let max_area = gt
        .iter()
        .flatten()
        .map(|b| b.area())
        .max()
        .expect("one visible frame") as f64;

    let noise = Normal::new(0.0, config.feature_noise).expect("validated noise");
    let anchor_noise = Normal::new(0.0, config.anchor_noise).expect("validated noise");
    let mut frame_features = Vec::with_capacity(t);
    let mut candidates = Vec::with_capacity(t);
    let mut candidate_features = Vec::with_capacity(t);
    let mut correct = Vec::with_capacity(t);
    for i in 0..t {
        let area = gt[i].map_or(0.0, |b| b.area() as f64 / max_area);
        let vis = visible[i] as u8 as f64;
        frame_features.push([area + noise.sample(&mut rng), vis + noise.sample(&mut rng)]);

        let mut slate = Vec::with_capacity(config.candidates);
        if visible[i] {
            slate.push(correct_candidate(&mut rng, &target[i], size));
        }
        while slate.len() < config.candidates {
            let d = distractor(&mut rng, &target[i], size, &slate);
            slate.push(d);
        }
        slate.shuffle(&mut rng);
        correct.push(gt[i].and_then(|g| slate.iter().position(|b| b.iou(&g) > 0.5)));

        let (tx, ty, tw, th) = box_geometry(&target[i]);
        let anchor = (
            tx + anchor_noise.sample(&mut rng) * tw,
            ty + anchor_noise.sample(&mut rng) * th,
            tw * anchor_noise.sample(&mut rng).exp(),
            th * anchor_noise.sample(&mut rng).exp(),
        );
        candidate_features.push(slate.iter().map(|b| offset_features(b, anchor)).collect());
        candidates.push(slate);
    }
    SyntheticEpisode {
        seed,
        size,
        gt,
        frame_features,
        candidates,
        candidate_features,
        correct,
    }
}

/// Linear softmax heads over frame and candidate features, temperature 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub params: PolicyParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyAction {
    pub frame: usize,
    pub candidate: usize,
    pub frame_probs: Vec<f64>,
    pub box_probs: Vec<f64>,
}

/// Lowest index wins ties.
fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

fn pick(probs: &[f64], rng: Option<&mut StreamRng>) -> usize {
    match rng {
        Some(rng) => WeightedIndex::new(probs).map_or_else(|_| argmax(probs), |d| d.sample(rng)),
        None => argmax(probs),
    }
}

impl ToyPolicy {
    pub fn uniform() -> Self {
        Self {
            params: PolicyParams::zeros(DIMS),
        }
    }

    pub fn frame_probs(&self, ep: &SyntheticEpisode) -> Vec<f64> {
        softmax(&linear_logits(
            self.params.frame_head(DIMS),
            &ep.frame_decision(0),
        ))
    }

    pub fn box_probs(&self, ep: &SyntheticEpisode, frame: usize) -> Vec<f64> {
        softmax(&linear_logits(
            self.params.box_head(DIMS),
            &ep.box_decision(frame, 0),
        ))
    }

    pub fn choose_frame(&self, ep: &SyntheticEpisode, rng: Option<&mut StreamRng>) -> usize {
        pick(&self.frame_probs(ep), rng)
    }

    pub fn choose_box(
        &self,
        ep: &SyntheticEpisode,
        frame: usize,
        rng: Option<&mut StreamRng>,
    ) -> usize {
        pick(&self.box_probs(ep, frame), rng)
    }
}

/// Sample (or with `rng = None`, take the argmax of) both heads.
pub fn policy_act(
    policy: &ToyPolicy,
    ep: &SyntheticEpisode,
    mut rng: Option<&mut StreamRng>,
) -> ToyAction {
    let frame_probs = policy.frame_probs(ep);
    let frame = pick(&frame_probs, rng.as_deref_mut());
    let box_probs = policy.box_probs(ep, frame);
    let candidate = pick(&box_probs, rng);
    ToyAction {
        frame,
        candidate,
        frame_probs,
        box_probs,
    }
}

/// Writes the toy policy's choices as round-1/round-2 answers.
pub struct ToyTextPolicy<'a> {
    pub policy: &'a ToyPolicy,
    pub episode: &'a SyntheticEpisode,
    pub round2_image: FrameSize,
    pub greedy: bool,
}

impl Policy for ToyTextPolicy<'_> {
    fn generate(
        &self,
        request: &PolicyRequest,
        rng: &mut StreamRng,
    ) -> Result<String, AdapterError> {
        let rng = (!self.greedy).then_some(rng);
        match request.round {
            1 => Ok(render_round1(
                self.policy.choose_frame(self.episode, rng),
                TARGET_DESCRIPTION,
            )),
            2 => {
                let keyframe = request
                    .history
                    .iter()
                    .rev()
                    .find(|t| t.role == Role::Assistant)
                    .and_then(|t| parse_round1(&t.text, self.episode.num_frames()).keyframe)
                    .ok_or_else(|| {
                        AdapterError::Protocol("round 2 without a parsed keyframe".into())
                    })?;
                let j = self.policy.choose_box(self.episode, keyframe, rng);
                let b = rescale_box(
                    &self.episode.candidates[keyframe][j],
                    self.episode.size,
                    self.round2_image,
                );
                Ok(render_round2(&b))
            }
            r => Err(AdapterError::Protocol(format!("unexpected round {r}"))),
        }
    }
}

/// The (frame, candidate) a trace encodes, read back from its parses.
pub fn recover_choices(
    ep: &SyntheticEpisode,
    trace: &RolloutTrace,
) -> Option<(usize, Option<usize>)> {
    let frame = trace.round1.keyframe?;
    let candidate = match trace.bbox_original {
        Some(b) => Some(ep.candidates[frame].iter().position(|c| *c == b)?),
        None => None,
    };
    Some((frame, candidate))
}

/// Greedy-evaluation summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean min-max normalized target area at the chosen frame.
    pub frame_quality: f64,
    /// Fraction of episodes whose chosen box has IoU > 0.5 with the target.
    pub box_accuracy: f64,
    pub mean_total_reward: f64,
    pub episodes: usize,
}

/// Greedy two-round rollouts through the text protocol.
pub fn evaluate_policy(
    policy: &ToyPolicy,
    episodes: &[SyntheticEpisode],
    mode: TemporalRewardMode,
    rollout: &RolloutConfig,
) -> Result<EvalMetrics, LabError> {
    if episodes.is_empty() {
        return Err(LabError::NoEpisodes);
    }
    let config = RolloutConfig {
        temporal_mode: mode,
        ..*rollout
    };
    let per_episode = episodes
        .par_iter()
        .map(|ep| {
            let text = ToyTextPolicy {
                policy,
                episode: ep,
                round2_image: config.round2_image,
                greedy: true,
            };
            let gt = ep.ground_truth();
            let trace = run_rollout(
                &ep.input(),
                &text,
                &config,
                Some(&gt),
                &mut substream(ep.seed, "eval", 0),
            )?;
            let quality = trace.round1.keyframe.map_or(0.0, |k| {
                temporal_reward(TemporalRewardMode::SoftArea, k, &gt.areas)
            });
            let hit = trace.reward.map_or(0.0, |r| r.r_s);
            Ok((quality, hit, trace.total_reward()))
        })
        .collect::<Result<Vec<_>, LabError>>()?;
    let n = per_episode.len() as f64;
    Ok(EvalMetrics {
        frame_quality: per_episode.iter().map(|e| e.0).sum::<f64>() / n,
        box_accuracy: per_episode.iter().map(|e| e.1).sum::<f64>() / n,
        mean_total_reward: per_episode.iter().map(|e| e.2).sum::<f64>() / n,
        episodes: per_episode.len(),
    })
}

pub fn held_out_episodes(count: usize, config: &LabConfig) -> Vec<SyntheticEpisode> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_episode(HELD_OUT_SEED_OFFSET + i, config))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_r_f: f64,
    pub mean_r_t: f64,
    pub mean_r_s: f64,
    pub kl: f64,
    /// Fraction of the group that picked a largest-area frame.
    pub frame_acc: f64,
    pub box_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub grpo: GrpoConfig,
    pub mode: TemporalRewardMode,
    pub lab: LabConfig,
    pub rollout: RolloutConfig,
    pub eval_episodes: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            grpo: GrpoConfig::default(),
            mode: TemporalRewardMode::SoftArea,
            lab: LabConfig::default(),
            rollout: RolloutConfig::default(),
            eval_episodes: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<StepLog>,
    pub final_metrics: EvalMetrics,
    pub policy: ToyPolicy,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str =
        "step,mean_reward,mean_r_f,mean_r_t,mean_r_s,kl,frame_acc,box_acc";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.step,
                r.mean_reward,
                r.mean_r_f,
                r.mean_r_t,
                r.mean_r_s,
                r.kl,
                r.frame_acc,
                r.box_acc
            ));
        }
        out
    }
}

fn step_log(step: usize, ep: &SyntheticEpisode, traces: &[RolloutTrace], kl: f64) -> StepLog {
    let n = traces.len() as f64;
    let mean = |f: &dyn Fn(&RolloutTrace) -> f64| traces.iter().map(f).sum::<f64>() / n;
    let best = ep
        .gt
        .iter()
        .map(|b| b.map_or(0, |b| b.area()))
        .max()
        .unwrap_or(0);
    StepLog {
        step,
        mean_reward: mean(&|t| t.total_reward()),
        mean_r_f: mean(&|t| t.reward.map_or(0.0, |r| r.r_f)),
        mean_r_t: mean(&|t| t.reward.map_or(0.0, |r| r.r_t)),
        mean_r_s: mean(&|t| t.reward.map_or(0.0, |r| r.r_s)),
        kl,
        frame_acc: mean(&|t| {
            t.round1
                .keyframe
                .and_then(|k| ep.gt[k])
                .is_some_and(|b| b.area() == best) as u8 as f64
        }),
        box_acc: mean(&|t| match (t.round1.keyframe, recover_choices(ep, t)) {
            (Some(k), Some((_, Some(j)))) => (ep.correct[k] == Some(j)) as u8 as f64,
            _ => 0.0,
        }),
    }
}

fn ensure_finite(params: &PolicyParams, step: usize) -> Result<(), LabError> {
    if params.is_finite() {
        Ok(())
    } else {
        Err(LabError::Divergence { step })
    }
}

/// GRPO on the toy policy. The reference policy is the initial (uniform)
/// one; training episodes are drawn uniformly from seeds below
/// [`HELD_OUT_SEED_OFFSET`] and evaluation uses the first
/// `eval_episodes` held-out seeds.
pub fn train_toy(options: &TrainOptions) -> Result<TrainReport, LabError> {
    let TrainOptions {
        grpo,
        mode,
        lab,
        rollout,
        eval_episodes,
    } = options;
    grpo.validate()?;
    lab.validate(rollout.round2_image)?;
    let config = RolloutConfig {
        temporal_mode: *mode,
        ..*rollout
    };
    let reference = PolicyParams::zeros(DIMS);
    let mut policy = ToyPolicy::uniform();
    let mut episode_rng = substream(grpo.seed, "episode", 0);
    let mut rows = Vec::with_capacity(grpo.steps);
    for step in 0..grpo.steps {
        let ep = generate_episode(episode_rng.random_range(0..HELD_OUT_SEED_OFFSET), lab);
        let gt = ep.ground_truth();
        let text = ToyTextPolicy {
            policy: &policy,
            episode: &ep,
            round2_image: config.round2_image,
            greedy: false,
        };
        let group = run_group(
            &ep.input(),
            &text,
            &config,
            Some(&gt),
            grpo.n,
            grpo.seed,
            step as u64,
        )?;
        let actions = group
            .traces
            .iter()
            .enumerate()
            .map(|(member, trace)| {
                let (frame, candidate) =
                    recover_choices(&ep, trace).ok_or(LabError::ActionRecovery { step, member })?;
                Ok(MemberActions {
                    frame: ep.frame_decision(frame),
                    boxes: candidate.map(|j| ep.box_decision(frame, j)),
                })
            })
            .collect::<Result<Vec<_>, LabError>>()?;
        let batch = RolloutGroup::new(group.rewards, actions)?;
        let kl = mean_decision_kl(&batch, &policy.params, &reference, DIMS)?;
        let grad = surrogate_gradient(&batch, &policy.params, &reference, grpo.beta, DIMS)?;
        rows.push(step_log(step, &ep, &group.traces, kl));
        policy.params = ascent_step(&policy.params, &grad, grpo.learning_rate);
        ensure_finite(&policy.params, step)?;
    }
    let final_metrics = evaluate_policy(
        &policy,
        &held_out_episodes(*eval_episodes, lab),
        *mode,
        rollout,
    )?;
    Ok(TrainReport {
        rows,
        final_metrics,
        policy,
    })
}

/// Mean exact KL of each head to `reference` over `episodes`: the frame
/// head once per episode, the box head at every frame.
pub fn head_kl(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    episodes: &[SyntheticEpisode],
) -> Result<(f64, f64), LabError> {
    if episodes.is_empty() {
        return Err(LabError::NoEpisodes);
    }
    let mut frame = 0.0;
    let mut boxes = 0.0;
    let mut box_points = 0usize;
    for ep in episodes {
        frame += exact_kl(&policy.frame_probs(ep), &reference.frame_probs(ep))?;
        for t in 0..ep.num_frames() {
            boxes += exact_kl(&policy.box_probs(ep, t), &reference.box_probs(ep, t))?;
            box_points += 1;
        }
    }
    Ok((frame / episodes.len() as f64, boxes / box_points as f64))
}
