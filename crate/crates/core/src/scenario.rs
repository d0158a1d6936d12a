//! Scenario data model: lane maps, per-agent state sequences, the on-disk
//! JSON format, and derived kinematics.
//!
//! A scenario is a set of equally long, equally sampled agent trajectories
//! plus a vector lane map. Every trajectory state is `[x, y, speed, heading]`;
//! the 2-vector velocity is always derived as `speed · (cos θ, sin θ)`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::geom::{normalize_angle, Vec2};

/// Default sampling period in seconds (10 Hz).
pub const DEFAULT_DT: f64 = 0.1;

/// Extra displacement rate (m/s) tolerated between consecutive samples
/// beyond the larger of the two reported speeds.
pub const CONSISTENCY_SLACK: f64 = 2.0;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("I/O error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
}

impl ScenarioError {
    fn validation(msg: impl Into<String>) -> Self {
        ScenarioError::Validation(msg.into())
    }
}

/// Kinematic state of one vehicle at one timestep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub position: Vec2,
    /// m/s, non-negative.
    pub speed: f64,
    /// radians in (−π, π].
    pub heading: f64,
}

impl AgentState {
    pub fn new(position: Vec2, speed: f64, heading: f64) -> Self {
        Self { position, speed, heading: normalize_angle(heading) }
    }

    #[inline]
    pub fn velocity(&self) -> Vec2 {
        Vec2::from_heading(self.heading) * self.speed
    }

    fn is_finite(&self) -> bool {
        self.position.is_finite() && self.speed.is_finite() && self.heading.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub agent_id: String,
    pub states: Vec<AgentState>,
    /// Sampling period, seconds.
    pub dt: f64,
}

impl Trajectory {
    pub fn new(agent_id: impl Into<String>, states: Vec<AgentState>, dt: f64) -> Self {
        Self { agent_id: agent_id.into(), states, dt }
    }

    /// Builds a trajectory from positions only, re-deriving speed and heading
    /// from the finite-difference velocity. Where the speed is (numerically)
    /// zero the previous heading is kept, starting from `initial_heading`.
    ///
    /// On jagged paths a central-difference speed can fall below the step it
    /// must cover; such speeds are raised just enough to meet the
    /// displacement consistency bound, so the result always validates.
    pub fn from_positions(
        agent_id: impl Into<String>,
        positions: &[Vec2],
        dt: f64,
        initial_heading: f64,
    ) -> Self {
        let velocity = differentiate(positions, dt);
        let mut heading = initial_heading;
        let states = positions
            .iter()
            .zip(&velocity)
            .enumerate()
            .map(|(k, (&p, &v))| {
                let step_rate = positions.get(k + 1).map_or(0.0, |&q| p.distance(q) / dt);
                let speed = v.norm().max(step_rate - CONSISTENCY_SLACK);
                if v.norm() > 1e-6 {
                    heading = v.angle();
                }
                AgentState::new(p, speed, heading)
            })
            .collect();
        Self::new(agent_id, states, dt)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec2> {
        self.states.iter().map(|s| s.position).collect()
    }

    /// Checks the per-trajectory invariants: length ≥ 2, dt > 0, finite
    /// states, non-negative speeds, and the displacement consistency bound.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let id = &self.agent_id;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(ScenarioError::validation(format!("agent {id}: dt must be positive, got {}", self.dt)));
        }
        if self.states.len() < 2 {
            return Err(ScenarioError::validation(format!(
                "agent {id}: trajectory needs at least 2 states, got {}",
                self.states.len()
            )));
        }
        for (k, s) in self.states.iter().enumerate() {
            if !s.is_finite() {
                return Err(ScenarioError::validation(format!("agent {id}, timestep {k}: non-finite state")));
            }
            if s.speed < 0.0 {
                return Err(ScenarioError::validation(format!(
                    "agent {id}, timestep {k}: negative speed {}",
                    s.speed
                )));
            }
        }
        for (k, w) in self.states.windows(2).enumerate() {
            let step = w[0].position.distance(w[1].position);
            let bound = (w[0].speed.max(w[1].speed) + CONSISTENCY_SLACK) * self.dt;
            // 1 µm absorbs the 9-digit rounding of written files
            if step > bound + 1e-6 {
                return Err(ScenarioError::validation(format!(
                    "agent {id}, timestep {}: moved {step:.3} m in one step, bound is {bound:.3} m",
                    k + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: String,
    pub centerline: Vec<Vec2>,
    /// meters
    pub width: f64,
    /// m/s
    pub speed_limit: f64,
    #[serde(default)]
    pub successors: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LaneMap {
    pub lanes: Vec<Lane>,
}

impl LaneMap {
    pub fn lane(&self, id: &str) -> Option<&Lane> {
        self.lanes.iter().find(|l| l.id == id)
    }

    pub fn is_empty(&self) -> bool {
        self.lanes.is_empty()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut ids = HashSet::new();
        for lane in &self.lanes {
            if !ids.insert(lane.id.as_str()) {
                return Err(ScenarioError::validation(format!("duplicate lane id {}", lane.id)));
            }
            if lane.centerline.len() < 2 {
                return Err(ScenarioError::validation(format!("lane {}: centerline needs at least 2 points", lane.id)));
            }
            if lane.centerline.iter().any(|p| !p.is_finite()) {
                return Err(ScenarioError::validation(format!("lane {}: non-finite centerline point", lane.id)));
            }
            if !(lane.width > 0.0 && lane.width.is_finite()) {
                return Err(ScenarioError::validation(format!("lane {}: width must be positive", lane.id)));
            }
            if !(lane.speed_limit > 0.0 && lane.speed_limit.is_finite()) {
                return Err(ScenarioError::validation(format!("lane {}: speed_limit must be positive", lane.id)));
            }
        }
        for lane in &self.lanes {
            if let Some(bad) = lane.successors.iter().find(|s| !ids.contains(s.as_str())) {
                return Err(ScenarioError::validation(format!(
                    "lane {}: successor {bad} does not exist",
                    lane.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub trajectories: Vec<Trajectory>,
    pub map: LaneMap,
    pub metadata: Map<String, Value>,
}

impl Scenario {
    pub fn agent(&self, id: &str) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.agent_id == id)
    }

    pub fn agent_index(&self, id: &str) -> Option<usize> {
        self.trajectories.iter().position(|t| t.agent_id == id)
    }

    pub fn num_agents(&self) -> usize {
        self.trajectories.len()
    }

    /// Common trajectory length T_s (0 for an agent-less scenario).
    pub fn num_steps(&self) -> usize {
        self.trajectories.first().map_or(0, Trajectory::len)
    }

    pub fn dt(&self) -> f64 {
        self.trajectories.first().map_or(DEFAULT_DT, |t| t.dt)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.map.validate()?;
        let mut ids = HashSet::new();
        for traj in &self.trajectories {
            if !ids.insert(traj.agent_id.as_str()) {
                return Err(ScenarioError::validation(format!("duplicate agent id {}", traj.agent_id)));
            }
            traj.validate()?;
        }
        if let Some(first) = self.trajectories.first() {
            for traj in &self.trajectories[1..] {
                if traj.len() != first.len() {
                    return Err(ScenarioError::validation(format!(
                        "agent {}: length {} differs from agent {} length {}",
                        traj.agent_id,
                        traj.len(),
                        first.agent_id,
                        first.len()
                    )));
                }
                if (traj.dt - first.dt).abs() > 1e-12 {
                    return Err(ScenarioError::validation(format!(
                        "agent {}: dt {} differs from shared dt {}",
                        traj.agent_id, traj.dt, first.dt
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// JSON format

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    dt: f64,
    agents: Vec<AgentRecord>,
    map: LaneMap,
    #[serde(default)]
    metadata: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentRecord {
    id: String,
    states: Vec<[f64; 4]>,
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let file: ScenarioFile = serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    let trajectories = file
        .agents
        .into_iter()
        .map(|a| {
            let states = a
                .states
                .iter()
                .map(|&[x, y, speed, heading]| AgentState::new(Vec2::new(x, y), speed, heading))
                .collect();
            Trajectory::new(a.id, states, file.dt)
        })
        .collect();
    let scenario = Scenario { trajectories, map: file.map, metadata: file.metadata };
    if !(file.dt > 0.0 && file.dt.is_finite()) {
        return Err(ScenarioError::validation(format!("dt must be positive, got {}", file.dt)));
    }
    scenario.validate()?;
    Ok(scenario)
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    parse_scenario(&text)
}

/// Rounds to 9 significant digits so written files are stable across
/// platforms and runs.
fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

/// Serializes a scenario to pretty-printed JSON (sorted keys, 9 significant digits).
pub fn scenario_to_json(scenario: &Scenario) -> String {
    let r2 = |p: Vec2| [round_sig(p.x), round_sig(p.y)];
    let file = ScenarioFile {
        dt: round_sig(scenario.dt()),
        agents: scenario
            .trajectories
            .iter()
            .map(|t| AgentRecord {
                id: t.agent_id.clone(),
                states: t
                    .states
                    .iter()
                    .map(|s| {
                        let [x, y] = r2(s.position);
                        [x, y, round_sig(s.speed), round_sig(s.heading)]
                    })
                    .collect(),
            })
            .collect(),
        map: LaneMap {
            lanes: scenario
                .map
                .lanes
                .iter()
                .map(|l| Lane {
                    id: l.id.clone(),
                    centerline: l.centerline.iter().map(|&p| Vec2::from(r2(p))).collect(),
                    width: round_sig(l.width),
                    speed_limit: round_sig(l.speed_limit),
                    successors: l.successors.clone(),
                })
                .collect(),
        },
        metadata: scenario.metadata.clone(),
    };
    // Round-trip through Value so object keys come out sorted.
    let value = serde_json::to_value(&file).expect("scenario serializes");
    let mut text = serde_json::to_string_pretty(&value).expect("value serializes");
    text.push('\n');
    text
}

pub fn save_scenario(scenario: &Scenario, path: impl AsRef<Path>) -> Result<(), ScenarioError> {
    let path = path.as_ref();
    fs::write(path, scenario_to_json(scenario)).map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })
}

// ---------------------------------------------------------------------------
// Kinematics

/// Per-step finite-difference derivatives of a trajectory's positions.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicProfile {
    pub velocity: Vec<Vec2>,
    pub acceleration: Vec<Vec2>,
    pub jerk: Vec<Vec2>,
}

/// Differentiates a uniformly sampled sequence: central differences in the
/// interior, second-order one-sided differences at the ends (first-order
/// when only two samples exist). Exact for polynomials of degree ≤ 2.
pub fn differentiate(values: &[Vec2], dt: f64) -> Vec<Vec2> {
    let n = values.len();
    match n {
        0 => Vec::new(),
        1 => vec![Vec2::ZERO],
        2 => {
            let d = (values[1] - values[0]) * (1.0 / dt);
            vec![d, d]
        }
        _ => {
            let inv2 = 1.0 / (2.0 * dt);
            let mut out = Vec::with_capacity(n);
            out.push((values[0] * -3.0 + values[1] * 4.0 - values[2]) * inv2);
            for k in 1..n - 1 {
                out.push((values[k + 1] - values[k - 1]) * inv2);
            }
            out.push((values[n - 1] * 3.0 - values[n - 2] * 4.0 + values[n - 3]) * inv2);
            out
        }
    }
}

pub fn derive_kinematics(traj: &Trajectory) -> KinematicProfile {
    let positions = traj.positions();
    let velocity = differentiate(&positions, traj.dt);
    let acceleration = differentiate(&velocity, traj.dt);
    let jerk = differentiate(&acceleration, traj.dt);
    KinematicProfile { velocity, acceleration, jerk }
}

// ---------------------------------------------------------------------------
// Lane projection

#[derive(Debug, Clone, PartialEq)]
pub struct LaneProjection {
    pub lane_id: String,
    /// Signed distance to the centerline, positive to the left of travel.
    pub lateral_offset: f64,
    pub tangent_heading: f64,
    /// Distance along the centerline to the foot point.
    pub arc_length: f64,
}

/// Projects `point` onto a single lane's centerline.
pub fn project_onto_lane(point: Vec2, lane: &Lane) -> LaneProjection {
    let mut best: Option<(f64, LaneProjection)> = None;
    let mut travelled = 0.0;
    for seg in lane.centerline.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let d = b - a;
        let len = d.norm();
        let t = if len > 0.0 { ((point - a).dot(d) / (len * len)).clamp(0.0, 1.0) } else { 0.0 };
        let foot = a + d * t;
        let dist = point.distance(foot);
        if best.as_ref().is_none_or(|(bd, _)| dist < *bd - 1e-12) {
            let side = d.cross(point - foot);
            let lateral_offset = if side < 0.0 { -dist } else { dist };
            best = Some((
                dist,
                LaneProjection {
                    lane_id: lane.id.clone(),
                    lateral_offset,
                    tangent_heading: if len > 0.0 { d.angle() } else { 0.0 },
                    arc_length: travelled + t * len,
                },
            ));
        }
        travelled += len;
    }
    best.map(|(_, p)| p).expect("lane has at least one segment")
}

/// Projects `point` onto the nearest lane centerline. Ties within 1e-9 m go to
/// the lexicographically lowest lane id. Returns `None` for an empty map.
pub fn project_to_lane(point: Vec2, map: &LaneMap) -> Option<LaneProjection> {
    let mut best: Option<LaneProjection> = None;
    for lane in &map.lanes {
        let p = project_onto_lane(point, lane);
        let replace = match &best {
            None => true,
            Some(b) => {
                let (d, bd) = (p.lateral_offset.abs(), b.lateral_offset.abs());
                d < bd - 1e-9 || ((d - bd).abs() <= 1e-9 && p.lane_id < b.lane_id)
            }
        };
        if replace {
            best = Some(p);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn straight_lane(id: &str, y: f64) -> Lane {
        Lane {
            id: id.into(),
            centerline: vec![Vec2::new(0.0, y), Vec2::new(100.0, y)],
            width: 3.5,
            speed_limit: 10.0,
            successors: vec![],
        }
    }

    fn const_vel(id: &str, n: usize, v: f64) -> Trajectory {
        let states = (0..n).map(|k| AgentState::new(Vec2::new(v * 0.1 * k as f64, 0.0), v, 0.0)).collect();
        Trajectory::new(id, states, 0.1)
    }

    #[test]
    fn heading_is_normalized_on_construction() {
        assert_eq!(AgentState::new(Vec2::ZERO, 1.0, -PI).heading, PI);
        assert!((AgentState::new(Vec2::ZERO, 1.0, 2.0 * PI + 0.1).heading - 0.1).abs() < 1e-12);
    }

    #[test]
    fn teleport_violates_consistency_bound() {
        let mut t = const_vel("a", 5, 5.0);
        t.states[3].position.x += 10.0;
        let err = t.validate().unwrap_err().to_string();
        assert!(err.contains("agent a") && err.contains("timestep 3"), "{err}");
    }

    #[test]
    fn negative_speed_rejected() {
        let mut t = const_vel("a", 3, 1.0);
        t.states[1].speed = -0.5;
        assert!(matches!(t.validate(), Err(ScenarioError::Validation(_))));
    }

    #[test]
    fn short_trajectory_rejected() {
        assert!(const_vel("a", 1, 1.0).validate().is_err());
    }

    #[test]
    fn constant_velocity_has_zero_acceleration() {
        let k = derive_kinematics(&const_vel("a", 20, 10.0));
        assert_eq!(k.velocity.len(), 20);
        for (v, a) in k.velocity.iter().zip(&k.acceleration) {
            assert!((v.x - 10.0).abs() < 1e-9 && v.y.abs() < 1e-12);
            assert!(a.norm() < 1e-9);
        }
    }

    #[test]
    fn quadratic_acceleration_is_exact() {
        let (a, dt) = (2.0, 0.1);
        let positions: Vec<Vec2> =
            (0..30).map(|k| Vec2::new(0.5 * a * (k as f64 * dt).powi(2), 0.0)).collect();
        let traj = Trajectory::from_positions("q", &positions, dt, 0.0);
        let kin = derive_kinematics(&traj);
        for acc in &kin.acceleration[1..29] {
            assert!((acc.x - 2.0).abs() < 1e-9 && acc.y.abs() < 1e-12, "{acc:?}");
        }
    }

    #[test]
    fn length_two_uses_one_sided_differences() {
        let kin = derive_kinematics(&const_vel("a", 2, 3.0));
        assert_eq!(kin.velocity.len(), 2);
        assert!(kin.velocity.iter().all(|v| (v.x - 3.0).abs() < 1e-9));
        assert!(kin.acceleration.iter().chain(&kin.jerk).all(|v| v.is_finite()));
    }

    #[test]
    fn projection_on_vertex_has_zero_offset() {
        let map = LaneMap { lanes: vec![straight_lane("L0", 0.0)] };
        let p = project_to_lane(Vec2::new(0.0, 0.0), &map).unwrap();
        assert_eq!(p.lateral_offset, 0.0);
        assert_eq!(p.arc_length, 0.0);
    }

    #[test]
    fn projection_left_is_positive() {
        let map = LaneMap { lanes: vec![straight_lane("L0", 0.0)] };
        let p = project_to_lane(Vec2::new(30.0, 1.5), &map).unwrap();
        assert!((p.lateral_offset - 1.5).abs() < 1e-12);
        assert_eq!(p.tangent_heading, 0.0);
        assert!((p.arc_length - 30.0).abs() < 1e-12);
        let p = project_to_lane(Vec2::new(30.0, -0.7), &map).unwrap();
        assert!((p.lateral_offset + 0.7).abs() < 1e-12);
    }

    #[test]
    fn equidistant_lanes_pick_lowest_id() {
        let map = LaneMap { lanes: vec![straight_lane("L1", 4.0), straight_lane("L0", 0.0)] };
        let p = project_to_lane(Vec2::new(10.0, 2.0), &map).unwrap();
        assert_eq!(p.lane_id, "L0");
    }

    #[test]
    fn empty_map_has_no_projection() {
        assert!(project_to_lane(Vec2::ZERO, &LaneMap::default()).is_none());
    }

    #[test]
    fn dangling_successor_is_rejected() {
        let mut lane = straight_lane("L0", 0.0);
        lane.successors.push("nope".into());
        assert!(LaneMap { lanes: vec![lane] }.validate().is_err());
    }
}
