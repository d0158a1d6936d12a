//! Social-value-orientation reward.
//!
//! An agent's total reward mixes its own intrinsic driving utility with the
//! intrinsic utility it attributes to its interaction partner, rotated by the
//! orientation angle φ and scaled by the magnitude λ, plus a task-specific
//! extrinsic term:
//!
//! ```text
//! R_i = λ · (cos φ · I_self + sin φ · I_other) + E_i
//! ```
//!
//! The partner's extrinsic goal never enters `R_i`: it is not observable to
//! the ego driver.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{segment_intersection, Vec2};
use crate::metrics::{ttc, DEFAULT_RADIUS};
use crate::proposal::Intent;
use crate::scenario::{derive_kinematics, project_onto_lane, project_to_lane, LaneMap, Scenario, Trajectory};

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("invalid social parameters: {0}")]
    InvalidParams(String),
    #[error("no extrinsic reward registered for intent kind {0}")]
    UnknownIntent(String),
    #[error("agent {0} not found in scenario")]
    UnknownAgent(String),
    #[error("trajectories differ in length or dt ({0})")]
    Mismatch(String),
}

/// SVO parameters (λ, φ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSocialParams")]
pub struct SocialParams {
    /// Intrinsic reward magnitude λ ≥ 0.
    pub lambda: f64,
    /// Social orientation angle φ ∈ [−π/2, π/2]; 0 egoist, > 0 prosocial, < 0 competitive.
    pub phi: f64,
}

#[derive(Deserialize)]
struct RawSocialParams {
    lambda: f64,
    phi: f64,
}

impl TryFrom<RawSocialParams> for SocialParams {
    type Error = RewardError;
    fn try_from(raw: RawSocialParams) -> Result<Self, Self::Error> {
        SocialParams::new(raw.lambda, raw.phi)
    }
}

impl SocialParams {
    /// λ = 1, φ = 0.
    pub const RATIONAL_EGOIST: SocialParams = SocialParams { lambda: 1.0, phi: 0.0 };

    pub fn new(lambda: f64, phi: f64) -> Result<Self, RewardError> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(RewardError::InvalidParams(format!("lambda must be >= 0, got {lambda}")));
        }
        // small tolerance so ±π/2 written with finite precision is accepted
        if !(phi.is_finite() && phi.abs() <= FRAC_PI_2 + 1e-12) {
            return Err(RewardError::InvalidParams(format!("phi must lie in [-pi/2, pi/2], got {phi}")));
        }
        Ok(Self { lambda, phi })
    }
}

impl Default for SocialParams {
    fn default() -> Self {
        Self::RATIONAL_EGOIST
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntrinsicWeights {
    pub w_lane: f64,
    pub w_speed: f64,
    pub w_heading: f64,
    pub w_comfort: f64,
    pub w_safety: f64,
    /// seconds
    pub ttc_safe: f64,
    /// m/s²
    pub accel_ref: f64,
    /// m/s³
    pub jerk_ref: f64,
}

impl Default for IntrinsicWeights {
    fn default() -> Self {
        Self {
            w_lane: 1.0,
            w_speed: 1.0,
            w_heading: 1.0,
            w_comfort: 0.5,
            w_safety: 2.0,
            ttc_safe: 4.0,
            accel_ref: 3.0,
            jerk_ref: 5.0,
        }
    }
}

impl IntrinsicWeights {
    pub fn weight_sum(&self) -> f64 {
        self.w_lane + self.w_speed + self.w_heading + self.w_comfort + self.w_safety
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        let all = [
            self.w_lane,
            self.w_speed,
            self.w_heading,
            self.w_comfort,
            self.w_safety,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(RewardError::InvalidParams("intrinsic weights must be finite and >= 0".into()));
        }
        if !(self.ttc_safe > 0.0 && self.accel_ref > 0.0 && self.jerk_ref > 0.0) {
            return Err(RewardError::InvalidParams("ttc_safe, accel_ref and jerk_ref must be positive".into()));
        }
        Ok(())
    }
}

/// Unweighted intrinsic components, each in [−1, 0].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IntrinsicComponents {
    pub lane: f64,
    pub speed: f64,
    pub heading: f64,
    pub comfort: f64,
    pub safety: f64,
}

impl IntrinsicComponents {
    /// Weighted mean of the components; lies in [−1, 0].
    pub fn total(&self, w: &IntrinsicWeights) -> f64 {
        let sum = w.weight_sum();
        if sum <= 0.0 {
            return 0.0;
        }
        (w.w_lane * self.lane
            + w.w_speed * self.speed
            + w.w_heading * self.heading
            + w.w_comfort * self.comfort
            + w.w_safety * self.safety)
            / sum
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn penalty(x: f64) -> f64 {
    -x.clamp(0.0, 1.0)
}

pub fn intrinsic_components(traj: &Trajectory, others: &[&Trajectory], map: &LaneMap, w: &IntrinsicWeights) -> IntrinsicComponents {
    let initial_speed = traj.states.first().map_or(0.0, |s| s.speed);
    let mut lane_terms = Vec::with_capacity(traj.len());
    let mut speed_terms = Vec::with_capacity(traj.len());
    let mut heading_terms = Vec::with_capacity(traj.len());
    for s in &traj.states {
        let reference_speed = match project_to_lane(s.position, map) {
            Some(p) => {
                let lane = map.lane(&p.lane_id).expect("projected lane exists");
                let half = lane.width / 2.0;
                lane_terms.push((p.lateral_offset / half).powi(2));
                heading_terms.push(1.0 - (s.heading - p.tangent_heading).cos());
                lane.speed_limit
            }
            None => initial_speed,
        };
        let denom = reference_speed.max(1.0);
        speed_terms.push(((s.speed - reference_speed) / denom).powi(2));
    }

    let kin = derive_kinematics(traj);
    let comfort = mean(
        kin.acceleration
            .iter()
            .zip(&kin.jerk)
            .map(|(a, j)| (a.norm() / w.accel_ref).powi(2) + (j.norm() / w.jerk_ref).powi(2)),
    );

    let safety = if others.is_empty() {
        0.0
    } else {
        mean(traj.states.iter().enumerate().map(|(k, s)| {
            let min_ttc = others
                .iter()
                .filter_map(|o| o.states.get(k))
                .map(|o| ttc(s, o, DEFAULT_RADIUS, DEFAULT_RADIUS))
                .fold(f64::INFINITY, f64::min);
            ((w.ttc_safe - min_ttc) / w.ttc_safe).max(0.0)
        }))
    };

    IntrinsicComponents {
        lane: penalty(mean(lane_terms.into_iter())),
        speed: penalty(mean(speed_terms.into_iter())),
        heading: penalty(mean(heading_terms.into_iter())),
        comfort: penalty(comfort),
        safety: penalty(safety),
    }
}

/// Normalized intrinsic reward in [−1, 0]; 0 is perfect driving.
///
/// An empty `others` list zeroes the safety component.
pub fn intrinsic_reward(traj: &Trajectory, others: &[&Trajectory], map: &LaneMap, w: &IntrinsicWeights) -> f64 {
    intrinsic_components(traj, others, map, w).total(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub intrinsic_self: f64,
    pub intrinsic_other: f64,
    pub extrinsic: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn combine(params: SocialParams, intrinsic_self: f64, intrinsic_other: f64, extrinsic: f64) -> Self {
        let (s, c) = params.phi.sin_cos();
        let total = params.lambda * (c * intrinsic_self + s * intrinsic_other) + extrinsic;
        Self { intrinsic_self, intrinsic_other, extrinsic, total }
    }
}

// ---------------------------------------------------------------------------
// Extrinsic rewards

/// Minimum time headway (s) by which the other agent must precede at the
/// conflict point for a full yield reward.
pub const YIELD_MIN_GAP: f64 = 1.0;

/// A task reward on one agent's trajectory, in [0, 1].
pub trait ExtrinsicReward: Send + Sync {
    fn evaluate(&self, traj: &Trajectory, scenario: &Scenario) -> f64;
}

struct LaneChangeReward {
    target_lane: String,
}

impl ExtrinsicReward for LaneChangeReward {
    fn evaluate(&self, traj: &Trajectory, scenario: &Scenario) -> f64 {
        let Some(lane) = scenario.map.lane(&self.target_lane) else {
            return 0.0;
        };
        let n = ((1.0 / traj.dt).round() as usize).clamp(1, traj.len().max(1));
        let tail = &traj.states[traj.len() - n..];
        let offset = mean(tail.iter().map(|s| project_onto_lane(s.position, lane).lateral_offset));
        1.0 - (offset.abs() / (lane.width / 2.0)).clamp(0.0, 1.0)
    }
}

struct MaintainSpeedReward {
    target_speed: f64,
}

impl ExtrinsicReward for MaintainSpeedReward {
    fn evaluate(&self, traj: &Trajectory, _: &Scenario) -> f64 {
        let err = mean(traj.states.iter().map(|s| (s.speed - self.target_speed).abs()));
        1.0 - (err / self.target_speed.max(1.0)).clamp(0.0, 1.0)
    }
}

struct YieldReward {
    yield_to: String,
}

/// First point along `a` where it meets `b`, as fractional step indices
/// `(along_a, along_b)`.
pub fn first_conflict(a: &[Vec2], b: &[Vec2]) -> Option<(f64, f64)> {
    let bbox = |p: Vec2, q: Vec2| (p.x.min(q.x), p.x.max(q.x), p.y.min(q.y), p.y.max(q.y));
    let b_boxes: Vec<_> = b.windows(2).map(|w| bbox(w[0], w[1])).collect();
    for (k, sa) in a.windows(2).enumerate() {
        let (ax0, ax1, ay0, ay1) = bbox(sa[0], sa[1]);
        let mut best: Option<(f64, f64)> = None;
        for (m, sb) in b.windows(2).enumerate() {
            let (bx0, bx1, by0, by1) = b_boxes[m];
            if bx0 > ax1 + 1e-9 || bx1 < ax0 - 1e-9 || by0 > ay1 + 1e-9 || by1 < ay0 - 1e-9 {
                continue;
            }
            if let Some((s, u)) = segment_intersection(sa[0], sa[1], sb[0], sb[1]) {
                if best.is_none_or(|(bs, _)| s < bs) {
                    best = Some((s, m as f64 + u));
                }
            }
        }
        if let Some((s, along_b)) = best {
            return Some((k as f64 + s, along_b));
        }
    }
    None
}

impl ExtrinsicReward for YieldReward {
    fn evaluate(&self, traj: &Trajectory, scenario: &Scenario) -> f64 {
        let Some(other) = scenario.agent(&self.yield_to) else {
            return 0.0;
        };
        match first_conflict(&traj.positions(), &other.positions()) {
            // paths never meet: nothing to yield
            None => 1.0,
            Some((along_self, along_other)) => {
                let gap = (along_self - along_other) * traj.dt;
                (gap / YIELD_MIN_GAP).clamp(0.0, 1.0)
            }
        }
    }
}

struct ReachPointReward {
    goal: Vec2,
}

impl ExtrinsicReward for ReachPointReward {
    fn evaluate(&self, traj: &Trajectory, _: &Scenario) -> f64 {
        let (Some(first), Some(last)) = (traj.states.first(), traj.states.last()) else {
            return 0.0;
        };
        let initial = first.position.distance(self.goal);
        let fin = last.position.distance(self.goal);
        if initial <= 1e-12 {
            return if fin <= 1e-12 { 1.0 } else { 0.0 };
        }
        1.0 - (fin / initial).clamp(0.0, 1.0)
    }
}

type ExtrinsicBuilder = fn(&Intent) -> Box<dyn ExtrinsicReward>;

/// Maps intent kinds to reward constructors.
#[derive(Clone)]
pub struct ExtrinsicRegistry {
    builders: BTreeMap<String, ExtrinsicBuilder>,
}

impl ExtrinsicRegistry {
    pub fn empty() -> Self {
        Self { builders: BTreeMap::new() }
    }

    pub fn register(&mut self, kind: impl Into<String>, builder: ExtrinsicBuilder) {
        self.builders.insert(kind.into(), builder);
    }

    pub fn kinds(&self) -> impl Iterator<Item = &str> {
        self.builders.keys().map(String::as_str)
    }

    pub fn build(&self, intent: &Intent) -> Result<Box<dyn ExtrinsicReward>, RewardError> {
        let builder = self
            .builders
            .get(intent.kind())
            .ok_or_else(|| RewardError::UnknownIntent(intent.kind().to_string()))?;
        Ok(builder(intent))
    }
}

impl Default for ExtrinsicRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        fn lane_change(i: &Intent) -> Box<dyn ExtrinsicReward> {
            match i {
                Intent::LaneChangeLeft { target_lane } | Intent::LaneChangeRight { target_lane } => {
                    Box::new(LaneChangeReward { target_lane: target_lane.clone() })
                }
                _ => unreachable!("registered for lane changes only"),
            }
        }
        r.register("LaneChangeLeft", lane_change);
        r.register("LaneChangeRight", lane_change);
        r.register("MaintainSpeed", |i| match i {
            Intent::MaintainSpeed { target_speed } => Box::new(MaintainSpeedReward { target_speed: *target_speed }),
            _ => unreachable!(),
        });
        r.register("Yield", |i| match i {
            Intent::Yield { yield_to } => Box::new(YieldReward { yield_to: yield_to.clone() }),
            _ => unreachable!(),
        });
        r.register("ReachPoint", |i| match i {
            Intent::ReachPoint { goal } => Box::new(ReachPointReward { goal: *goal }),
            _ => unreachable!(),
        });
        r
    }
}

pub fn make_extrinsic(intent: &Intent) -> Result<Box<dyn ExtrinsicReward>, RewardError> {
    ExtrinsicRegistry::default().build(intent)
}

fn check_compatible(a: &Trajectory, b: &Trajectory) -> Result<(), RewardError> {
    if a.len() != b.len() || (a.dt - b.dt).abs() > 1e-12 {
        return Err(RewardError::Mismatch(format!("{} vs {}", a.agent_id, b.agent_id)));
    }
    Ok(())
}

/// Reward of agent i given its partner j. The partner's intrinsic reward is
/// evaluated with the ego's weights.
pub fn social_reward(
    traj_i: &Trajectory,
    traj_j: &Trajectory,
    scenario: &Scenario,
    params_i: SocialParams,
    intent_i: &Intent,
    w: &IntrinsicWeights,
) -> Result<RewardBreakdown, RewardError> {
    let extrinsic = make_extrinsic(intent_i)?;
    social_reward_with(traj_i, traj_j, scenario, params_i, extrinsic.as_ref(), w)
}

fn social_reward_with(
    traj_i: &Trajectory,
    traj_j: &Trajectory,
    scenario: &Scenario,
    params_i: SocialParams,
    extrinsic: &dyn ExtrinsicReward,
    w: &IntrinsicWeights,
) -> Result<RewardBreakdown, RewardError> {
    check_compatible(traj_i, traj_j)?;
    let own = intrinsic_reward(traj_i, &[traj_j], &scenario.map, w);
    let other = intrinsic_reward(traj_j, &[traj_i], &scenario.map, w);
    let ext = extrinsic.evaluate(traj_i, scenario);
    Ok(RewardBreakdown::combine(params_i, own, other, ext))
}

/// One rewarded agent of a joint objective.
pub struct RewardedAgent {
    pub id: String,
    pub params: SocialParams,
    pub intent: Intent,
    extrinsic: Box<dyn ExtrinsicReward>,
}

impl RewardedAgent {
    pub fn new(id: impl Into<String>, params: SocialParams, intent: Intent, registry: &ExtrinsicRegistry) -> Result<Self, RewardError> {
        let extrinsic = registry.build(&intent)?;
        Ok(Self { id: id.into(), params, intent, extrinsic })
    }

    pub fn extrinsic(&self, traj: &Trajectory, scenario: &Scenario) -> f64 {
        self.extrinsic.evaluate(traj, scenario)
    }
}

/// Joint social objective over the two proposal agents: the sum of their
/// individual social rewards, each agent treating the other as its partner.
pub struct JointReward {
    pub agents: [RewardedAgent; 2],
    pub weights: IntrinsicWeights,
}

impl JointReward {
    pub fn new(agents: [RewardedAgent; 2], weights: IntrinsicWeights) -> Self {
        Self { agents, weights }
    }

    /// Per-agent breakdowns `[i, j]` on the given joint scenario.
    pub fn breakdown(&self, joint: &Scenario) -> Result<[RewardBreakdown; 2], RewardError> {
        let [a, b] = &self.agents;
        let ta = joint.agent(&a.id).ok_or_else(|| RewardError::UnknownAgent(a.id.clone()))?;
        let tb = joint.agent(&b.id).ok_or_else(|| RewardError::UnknownAgent(b.id.clone()))?;
        check_compatible(ta, tb)?;
        // each intrinsic term is shared between the two agents' rewards
        let ia = intrinsic_reward(ta, &[tb], &joint.map, &self.weights);
        let ib = intrinsic_reward(tb, &[ta], &joint.map, &self.weights);
        Ok([
            RewardBreakdown::combine(a.params, ia, ib, a.extrinsic(ta, joint)),
            RewardBreakdown::combine(b.params, ib, ia, b.extrinsic(tb, joint)),
        ])
    }

    pub fn evaluate(&self, joint: &Scenario) -> Result<f64, RewardError> {
        let [a, b] = self.breakdown(joint)?;
        Ok(a.total + b.total)
    }
}

/// Sum of both proposal agents' social rewards on a joint scenario.
pub fn joint_reward(
    joint: &Scenario,
    agents: [(&str, SocialParams, &Intent); 2],
    w: &IntrinsicWeights,
) -> Result<f64, RewardError> {
    let registry = ExtrinsicRegistry::default();
    let [a, b] = agents;
    let model = JointReward::new(
        [
            RewardedAgent::new(a.0, a.1, a.2.clone(), &registry)?,
            RewardedAgent::new(b.0, b.1, b.2.clone(), &registry)?,
        ],
        *w,
    );
    model.evaluate(joint)
}
