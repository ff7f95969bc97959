//! Group-relative policy optimization for a two-stage softmax policy.
//!
//! The policy makes two categorical decisions per rollout: a frame, scored by
//! a linear head over per-frame features, then a candidate box at that frame,
//! scored by a second linear head over per-candidate features. Parameters are
//! one flat vector `[frame head | box head]`.
//!
//! Updates are on-policy, so the surrogate is the plain policy-gradient form
//!
//! ```text
//! S(theta) = 1/n sum_i A_i log pi(actions_i) - beta * mean_points KL(pi_theta || pi_ref)
//! ```
//!
//! with `A_i` the group-normalized rewards and the KL evaluated exactly at
//! every decision point the group visited.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrpoError {
    #[error("group needs at least 2 members, got {0}")]
    GroupTooSmall(usize),
    #[error("non-finite reward at member {0}")]
    NonFiniteReward(usize),
    #[error("group has {rewards} rewards but {actions} action records")]
    GroupShape { rewards: usize, actions: usize },
    #[error("distributions have different support sizes ({0} vs {1})")]
    SupportMismatch(usize, usize),
    #[error("reference assigns zero probability where p = {0}")]
    ReferenceZero(f64),
    #[error("feature width {got} does not match head width {expected}")]
    FeatureWidth { got: usize, expected: usize },
    #[error("chosen index {chosen} outside {rows} options")]
    ChoiceOutOfRange { chosen: usize, rows: usize },
    #[error("non-finite log-probability for a sampled action")]
    NonFiniteLogProb,
    #[error("parameter vector has length {got}, expected {expected}")]
    ParamLength { got: usize, expected: usize },
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GrpoConfig {
    pub n: usize,
    pub beta: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            n: 8,
            beta: 1e-3,
            learning_rate: 0.5,
            steps: 3000,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.n < 2 {
            return Err(GrpoError::Config(format!(
                "group size must be >= 2, got {}",
                self.n
            )));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(GrpoError::Config(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(GrpoError::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Normalized within-group advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageVector(Vec<f64>);

impl AdvantageVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// `(r_i - mean) / std` with the population standard deviation; all zeros
/// when the group has no spread.
pub fn group_advantages(rewards: &[f64]) -> Result<AdvantageVector, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(GrpoError::NonFiniteReward(i));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    // spread below rounding noise of the mean counts as none
    if std <= 1e-12 * mean.abs().max(1.0) {
        return Ok(AdvantageVector(vec![0.0; rewards.len()]));
    }
    Ok(AdvantageVector(
        rewards.iter().map(|r| (r - mean) / std).collect(),
    ))
}

/// `sum p ln(p / q)` over the support of `p`.
pub fn exact_kl(p: &[f64], q: &[f64]) -> Result<f64, GrpoError> {
    if p.len() != q.len() {
        return Err(GrpoError::SupportMismatch(p.len(), q.len()));
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(GrpoError::ReferenceZero(pi));
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// Flat parameter vector `[frame head | box head]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub theta: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(dims: HeadDims) -> Self {
        Self {
            theta: vec![0.0; dims.total()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|t| t.is_finite())
    }

    pub fn frame_head(&self, dims: HeadDims) -> &[f64] {
        &self.theta[..dims.frame]
    }

    pub fn box_head(&self, dims: HeadDims) -> &[f64] {
        &self.theta[dims.frame..dims.total()]
    }
}

/// Feature widths of the two heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    pub frame: usize,
    pub boxes: usize,
}

impl HeadDims {
    pub fn total(&self) -> usize {
        self.frame + self.boxes
    }
}

/// One categorical choice: a row-major option-by-feature matrix and the
/// option that was taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxDecision {
    pub features: Vec<f64>,
    pub width: usize,
    pub chosen: usize,
}

impl SoftmaxDecision {
    pub fn rows(&self) -> usize {
        self.features.len() / self.width
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.width..(i + 1) * self.width]
    }

    fn check(&self, width: usize) -> Result<(), GrpoError> {
        if self.width != width || !self.features.len().is_multiple_of(width) {
            return Err(GrpoError::FeatureWidth {
                got: self.width,
                expected: width,
            });
        }
        if self.chosen >= self.rows() {
            return Err(GrpoError::ChoiceOutOfRange {
                chosen: self.chosen,
                rows: self.rows(),
            });
        }
        Ok(())
    }
}

/// The decisions one rollout made. `boxes` is absent if the rollout stopped
/// after the frame choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberActions {
    pub frame: SoftmaxDecision,
    pub boxes: Option<SoftmaxDecision>,
}

impl MemberActions {
    fn points(&self) -> impl Iterator<Item = (Head, &SoftmaxDecision)> {
        std::iter::once((Head::Frame, &self.frame)).chain(self.boxes.iter().map(|b| (Head::Box, b)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub rewards: Vec<f64>,
    pub actions: Vec<MemberActions>,
}

impl RolloutGroup {
    pub fn new(rewards: Vec<f64>, actions: Vec<MemberActions>) -> Result<Self, GrpoError> {
        if rewards.len() != actions.len() {
            return Err(GrpoError::GroupShape {
                rewards: rewards.len(),
                actions: actions.len(),
            });
        }
        if rewards.len() < 2 {
            return Err(GrpoError::GroupTooSmall(rewards.len()));
        }
        Ok(Self { rewards, actions })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
enum Head {
    Frame,
    Box,
}

fn head_weights(params: &PolicyParams, dims: HeadDims, head: Head) -> &[f64] {
    match head {
        Head::Frame => params.frame_head(dims),
        Head::Box => params.box_head(dims),
    }
}

fn head_offset(dims: HeadDims, head: Head) -> usize {
    match head {
        Head::Frame => 0,
        Head::Box => dims.frame,
    }
}

fn head_width(dims: HeadDims, head: Head) -> usize {
    match head {
        Head::Frame => dims.frame,
        Head::Box => dims.boxes,
    }
}

/// Linear logits `w . x_j` for every option row.
pub fn linear_logits(weights: &[f64], decision: &SoftmaxDecision) -> Vec<f64> {
    (0..decision.rows())
        .map(|j| {
            decision
                .row(j)
                .iter()
                .zip(weights)
                .map(|(x, w)| x * w)
                .sum()
        })
        .collect()
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Per-decision-point quantities shared by the value and the gradient.
struct PointEval {
    logp: Vec<f64>,
    probs: Vec<f64>,
    kl: f64,
    /// `lp_j - lq_j - KL`, the KL sensitivity to each logit divided by `p_j`.
    kl_slope: Vec<f64>,
}

fn eval_point(
    params: &PolicyParams,
    reference: &PolicyParams,
    dims: HeadDims,
    head: Head,
    decision: &SoftmaxDecision,
) -> Result<PointEval, GrpoError> {
    decision.check(head_width(dims, head))?;
    let logp = log_softmax(&linear_logits(head_weights(params, dims, head), decision));
    let logq = log_softmax(&linear_logits(
        head_weights(reference, dims, head),
        decision,
    ));
    if !logp[decision.chosen].is_finite() {
        return Err(GrpoError::NonFiniteLogProb);
    }
    let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let kl: f64 = probs
        .iter()
        .zip(logp.iter().zip(&logq))
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, (lp, lq))| p * (lp - lq))
        .sum();
    let kl_slope = logp
        .iter()
        .zip(&logq)
        .map(|(lp, lq)| lp - lq - kl)
        .collect();
    Ok(PointEval {
        logp,
        probs,
        kl,
        kl_slope,
    })
}

fn check_inputs(
    group: &RolloutGroup,
    params: &PolicyParams,
    reference: &PolicyParams,
    dims: HeadDims,
) -> Result<(), GrpoError> {
    for p in [params, reference] {
        if p.theta.len() != dims.total() {
            return Err(GrpoError::ParamLength {
                got: p.theta.len(),
                expected: dims.total(),
            });
        }
    }
    if group.rewards.len() != group.actions.len() {
        return Err(GrpoError::GroupShape {
            rewards: group.rewards.len(),
            actions: group.actions.len(),
        });
    }
    Ok(())
}

fn decision_points(group: &RolloutGroup) -> usize {
    group.actions.iter().map(|a| a.points().count()).sum()
}

/// Mean exact KL(pi_theta || pi_ref) over the group's decision points.
pub fn mean_decision_kl(
    group: &RolloutGroup,
    params: &PolicyParams,
    reference: &PolicyParams,
    dims: HeadDims,
) -> Result<f64, GrpoError> {
    check_inputs(group, params, reference, dims)?;
    let mut total = 0.0;
    for member in &group.actions {
        for (head, decision) in member.points() {
            total += eval_point(params, reference, dims, head, decision)?.kl;
        }
    }
    Ok(total / decision_points(group) as f64)
}

/// The on-policy surrogate objective (to be maximized).
pub fn grpo_surrogate(
    group: &RolloutGroup,
    params: &PolicyParams,
    reference: &PolicyParams,
    beta: f64,
    dims: HeadDims,
) -> Result<f64, GrpoError> {
    check_inputs(group, params, reference, dims)?;
    let adv = group_advantages(&group.rewards)?;
    let n = group.len() as f64;
    let points = decision_points(group) as f64;
    let mut pg = 0.0;
    let mut kl = 0.0;
    for (a, member) in adv.as_slice().iter().zip(&group.actions) {
        for (head, decision) in member.points() {
            let e = eval_point(params, reference, dims, head, decision)?;
            pg += a * e.logp[decision.chosen];
            kl += e.kl;
        }
    }
    Ok(pg / n - beta * kl / points)
}

/// Exact gradient of [`grpo_surrogate`] with respect to `params`.
pub fn surrogate_gradient(
    group: &RolloutGroup,
    params: &PolicyParams,
    reference: &PolicyParams,
    beta: f64,
    dims: HeadDims,
) -> Result<Vec<f64>, GrpoError> {
    check_inputs(group, params, reference, dims)?;
    let adv = group_advantages(&group.rewards)?;
    let n = group.len() as f64;
    let points = decision_points(group) as f64;
    let mut grad = vec![0.0; dims.total()];
    for (a, member) in adv.as_slice().iter().zip(&group.actions) {
        for (head, decision) in member.points() {
            let e = eval_point(params, reference, dims, head, decision)?;
            let g = &mut grad
                [head_offset(dims, head)..head_offset(dims, head) + head_width(dims, head)];
            // d log p_c / dz_j = [j = c] - p_j ;  d KL / dz_j = p_j (lp_j - lq_j - KL)
            for j in 0..decision.rows() {
                let indicator = (j == decision.chosen) as u8 as f64;
                let coef =
                    a / n * (indicator - e.probs[j]) - beta / points * e.probs[j] * e.kl_slope[j];
                if coef != 0.0 {
                    for (gk, xk) in g.iter_mut().zip(decision.row(j)) {
                        *gk += coef * xk;
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// `theta + lr * gradient`.
pub fn ascent_step(params: &PolicyParams, gradient: &[f64], learning_rate: f64) -> PolicyParams {
    PolicyParams {
        theta: params
            .theta
            .iter()
            .zip(gradient)
            .map(|(t, g)| t + learning_rate * g)
            .collect(),
    }
}
