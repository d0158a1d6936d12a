//! Interaction metrics: time-to-collision, engagement, relative velocity,
//! peak acceleration.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec2;
use crate::scenario::{derive_kinematics, AgentState, Scenario, Trajectory};

/// Per-vehicle collision disc radius (m).
pub const DEFAULT_RADIUS: f64 = 2.0;
/// Engagement threshold on minimum TTC (s).
pub const DEFAULT_TTC_THRESHOLD: f64 = 4.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("engagement ratio of an empty batch")]
    EmptyBatch,
    #[error("unknown agent {0}")]
    UnknownAgent(String),
}

/// Time until two constant-velocity discs first touch.
///
/// Returns 0 when the discs already overlap and `+∞` when they never meet.
pub fn ttc(state_i: &AgentState, state_j: &AgentState, r_i: f64, r_j: f64) -> f64 {
    ttc_kinematic(state_i.position, state_i.velocity(), state_j.position, state_j.velocity(), r_i + r_j)
}

/// TTC from raw positions/velocities and a combined radius.
pub fn ttc_kinematic(p_i: Vec2, v_i: Vec2, p_j: Vec2, v_j: Vec2, radius: f64) -> f64 {
    let dp = p_j - p_i;
    let dv = v_j - v_i;
    let c = dp.norm_squared() - radius * radius;
    if c <= 0.0 {
        return 0.0;
    }
    let a = dv.norm_squared();
    let b = 2.0 * dp.dot(dv);
    if a <= f64::EPSILON * c.max(1.0) || b >= 0.0 {
        // not closing: with c > 0 both roots of the quadratic are negative or absent
        return f64::INFINITY;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return f64::INFINITY;
    }
    // numerically stable smaller root: t = 2c / (−b + √disc)
    let t = 2.0 * c / (-b + disc.sqrt());
    if t >= 0.0 {
        t
    } else {
        f64::INFINITY
    }
}

/// TTC between two trajectories at every shared timestep.
pub fn trajectory_ttc_profile(a: &Trajectory, b: &Trajectory, radius: f64) -> Vec<f64> {
    a.states.iter().zip(&b.states).map(|(s, o)| ttc(s, o, radius, radius)).collect()
}

fn pair_trajectories<'a>(scenario: &'a Scenario, pair: (&str, &str)) -> Result<(&'a Trajectory, &'a Trajectory), MetricsError> {
    let a = scenario.agent(pair.0).ok_or_else(|| MetricsError::UnknownAgent(pair.0.into()))?;
    let b = scenario.agent(pair.1).ok_or_else(|| MetricsError::UnknownAgent(pair.1.into()))?;
    Ok((a, b))
}

/// TTC per timestep between the two agents of `pair`, using instantaneous states.
pub fn scenario_ttc_profile(scenario: &Scenario, pair: (&str, &str), radius: f64) -> Result<Vec<f64>, MetricsError> {
    let (a, b) = pair_trajectories(scenario, pair)?;
    Ok(trajectory_ttc_profile(a, b, radius))
}

pub fn min_ttc(profile: &[f64]) -> f64 {
    profile.iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn engagement(min_ttc: f64, threshold: f64) -> bool {
    min_ttc < threshold
}

/// Percentage of engaged reports.
pub fn engagement_ratio(reports: &[MetricsReport]) -> Result<f64, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyBatch);
    }
    let engaged = reports.iter().filter(|r| r.engaged).count();
    Ok(100.0 * engaged as f64 / reports.len() as f64)
}

pub fn max_relative_velocity(scenario: &Scenario, pair: (&str, &str)) -> Result<f64, MetricsError> {
    let (a, b) = pair_trajectories(scenario, pair)?;
    Ok(a.states
        .iter()
        .zip(&b.states)
        .map(|(s, o)| (o.velocity() - s.velocity()).norm())
        .fold(0.0, f64::max))
}

/// Largest acceleration magnitude over all agents and timesteps.
pub fn max_acceleration(scenario: &Scenario) -> f64 {
    scenario
        .trajectories
        .iter()
        .flat_map(|t| derive_kinematics(t).acceleration)
        .map(Vec2::norm)
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario_id: String,
    /// seconds, possibly +∞
    pub min_ttc: f64,
    pub engaged: bool,
    pub max_relative_velocity: f64,
    pub max_acceleration: f64,
    pub extrinsic_reward_i: f64,
    pub extrinsic_reward_j: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "scenario_id,min_ttc,engaged,max_rel_vel,max_accel,extrinsic_i,extrinsic_j";

    /// Computes the interaction metrics for `pair`. Extrinsic rewards are
    /// supplied by the caller since they depend on the proposal.
    pub fn compute(
        scenario_id: impl Into<String>,
        scenario: &Scenario,
        pair: (&str, &str),
        extrinsic: (f64, f64),
        radius: f64,
        threshold: f64,
    ) -> Result<Self, MetricsError> {
        let profile = scenario_ttc_profile(scenario, pair, radius)?;
        let min_ttc = min_ttc(&profile);
        Ok(Self {
            scenario_id: scenario_id.into(),
            min_ttc,
            engaged: engagement(min_ttc, threshold),
            max_relative_velocity: max_relative_velocity(scenario, pair)?,
            max_acceleration: max_acceleration(scenario),
            extrinsic_reward_i: extrinsic.0,
            extrinsic_reward_j: extrinsic.1,
        })
    }

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let ttc = if self.min_ttc.is_finite() { format!("{:.6}", self.min_ttc) } else { "inf".to_string() };
        write!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.scenario_id,
            ttc,
            self.engaged,
            self.max_relative_velocity,
            self.max_acceleration,
            self.extrinsic_reward_i,
            self.extrinsic_reward_j
        )
        .unwrap();
        s
    }
}

pub fn reports_to_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(MetricsReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}
