//! Two-stage interaction planner.
//!
//! Stage 1 turns a scenario into a [`SceneDescription`]: per-agent lane
//! summaries, pairwise interaction features from a constant-velocity
//! forecast, and a rendered paragraph. Stage 2 picks the pair with the
//! highest interaction potential and assigns each agent an [`Intent`], either
//! through a deterministic rule table or by asking a chat service.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::geom::{normalize_angle, segment_intersection, Vec2};
use crate::llm_gateway::{ChatClient, ChatMessage, GatewayError};
use crate::metrics::{ttc, DEFAULT_RADIUS};
use crate::proposal::{Intent, IntentError, Proposal, ProposalBackend};
use crate::scenario::{project_onto_lane, project_to_lane, Scenario};


pub const DESCRIBE_PROMPT: &str = include_str!("../prompts/describe.txt");
pub const PROPOSE_PROMPT: &str = include_str!("../prompts/propose.txt");
/// Bumped whenever the prompt assets change.
pub const PROMPT_VERSION: u32 = 1;

const SYSTEM_PROMPT: &str = "You are a traffic-scenario analyst for an autonomous-driving simulator.";

/// Default constant-velocity forecast horizon (s).
pub const DEFAULT_HORIZON: f64 = 5.0;

/// |cos| above which two headings count as parallel (30°).
const PARALLEL_COS: f64 = 0.866;
/// Distance past the conflict point / ahead of the leader for ReachPoint goals (m).
const GOAL_LEAD: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProposerError {
    #[error("need at least 2 agents to propose an interaction, scenario has {0}")]
    InsufficientAgents(usize),
    #[error("unknown agent {0}")]
    UnknownAgent(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("service proposal failed: {0}")]
    ServiceFailed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentSummary {
    pub id: String,
    pub lane_id: Option<String>,
    pub lateral_offset: f64,
    pub position: Vec2,
    pub speed: f64,
    pub heading: f64,
    pub mean_speed: f64,
    /// Heading minus lane tangent, radians in (−π, π]; 0 without a lane.
    pub heading_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairFeatures {
    pub index_i: usize,
    pub index_j: usize,
    pub agent_i: String,
    pub agent_j: String,
    pub distance: f64,
    pub relative_speed: f64,
    /// Rate at which the separation shrinks; negative when diverging.
    pub closing_speed: f64,
    pub predicted_min_distance: f64,
    pub path_crossing: bool,
    /// Point where the forecast paths cross, if they do.
    pub conflict_point: Option<Vec2>,
    pub min_predicted_ttc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneDescription {
    pub horizon: f64,
    pub agents: Vec<AgentSummary>,
    /// All unordered pairs `i < j` in scenario order.
    pub pairs: Vec<PairFeatures>,
    pub rendered_text: String,
}

impl SceneDescription {
    pub fn pair(&self, a: &str, b: &str) -> Option<&PairFeatures> {
        self.pairs
            .iter()
            .find(|p| (p.agent_i == a && p.agent_j == b) || (p.agent_i == b && p.agent_j == a))
    }

    pub fn agent(&self, id: &str) -> Option<&AgentSummary> {
        self.agents.iter().find(|a| a.id == id)
    }
}

fn pair_features(scenario: &Scenario, i: usize, j: usize, horizon: f64) -> PairFeatures {
    let a = scenario.trajectories[i].states[0];
    let b = scenario.trajectories[j].states[0];
    let (va, vb) = (a.velocity(), b.velocity());
    let dp = b.position - a.position;
    let dv = vb - va;
    let distance = dp.norm();
    let closing_speed = if distance > 0.0 { -dp.dot(dv) / distance } else { dv.norm() };
    let t_star = if dv.norm_squared() > 0.0 { (-dp.dot(dv) / dv.norm_squared()).clamp(0.0, horizon) } else { 0.0 };
    let predicted_min_distance = (dp + dv * t_star).norm();
    let (ea, eb) = (a.position + va * horizon, b.position + vb * horizon);
    let conflict_point = segment_intersection(a.position, ea, b.position, eb).map(|(s, _)| a.position + (ea - a.position) * s);
    PairFeatures {
        index_i: i,
        index_j: j,
        agent_i: scenario.trajectories[i].agent_id.clone(),
        agent_j: scenario.trajectories[j].agent_id.clone(),
        distance,
        relative_speed: dv.norm(),
        closing_speed,
        predicted_min_distance,
        path_crossing: conflict_point.is_some(),
        conflict_point,
        min_predicted_ttc: ttc(&a, &b, DEFAULT_RADIUS, DEFAULT_RADIUS),
    }
}

fn fmt_ttc(t: f64) -> String {
    if t.is_finite() {
        format!("{t:.2} s")
    } else {
        "none".into()
    }
}

/// Rounds to `digits` decimals so values that round to zero print as +0.
fn unsigned_zero(v: f64, digits: i32) -> f64 {
    let scale = 10f64.powi(digits);
    (v * scale).round() / scale + 0.0
}

fn render(desc: &SceneDescription) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "The scene contains {} vehicles; forecasts assume constant velocity over {:.1} s.",
        desc.agents.len(),
        desc.horizon
    );
    for a in &desc.agents {
        let lane = a.lane_id.as_deref().map_or("no lane".to_string(), |l| format!("lane {l}"));
        let _ = writeln!(
            s,
            "Vehicle {} is in {} (offset {:+.2} m) at ({:.1}, {:.1}), moving {:.1} m/s (mean {:.1} m/s), heading error {:+.1} deg.",
            a.id,
            lane,
            unsigned_zero(a.lateral_offset, 2),
            a.position.x,
            a.position.y,
            a.speed,
            a.mean_speed,
            unsigned_zero(a.heading_error.to_degrees(), 1)
        );
    }
    for p in &desc.pairs {
        let _ = writeln!(
            s,
            "Pair ({}, {}): {:.1} m apart, relative speed {:.1} m/s, closing at {:+.1} m/s, predicted minimum distance {:.1} m, paths cross: {}, minimum TTC: {}.",
            p.agent_i,
            p.agent_j,
            p.distance,
            p.relative_speed,
            unsigned_zero(p.closing_speed, 1),
            p.predicted_min_distance,
            if p.path_crossing { "yes" } else { "no" },
            fmt_ttc(p.min_predicted_ttc)
        );
    }
    s
}

/// Stage 1: structured features plus a deterministic text rendering.
pub fn describe_scene(scenario: &Scenario, horizon: f64) -> SceneDescription {
    let agents = scenario
        .trajectories
        .iter()
        .map(|t| {
            let first = t.states[0];
            let proj = project_to_lane(first.position, &scenario.map);
            let mean_speed = t.states.iter().map(|s| s.speed).sum::<f64>() / t.len() as f64;
            AgentSummary {
                id: t.agent_id.clone(),
                lane_id: proj.as_ref().map(|p| p.lane_id.clone()),
                lateral_offset: proj.as_ref().map_or(0.0, |p| p.lateral_offset),
                position: first.position,
                speed: first.speed,
                heading: first.heading,
                mean_speed,
                heading_error: proj.as_ref().map_or(0.0, |p| normalize_angle(first.heading - p.tangent_heading)),
            }
        })
        .collect();
    let n = scenario.num_agents();
    let pairs = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| pair_features(scenario, i, j, horizon)).collect();
    let mut desc = SceneDescription { horizon, agents, pairs, rendered_text: String::new() };
    desc.rendered_text = render(&desc);
    desc
}

/// Weights of the pair-scoring function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PairWeights {
    pub distance: f64,
    pub crossing: f64,
    pub closing: f64,
}

impl Default for PairWeights {
    fn default() -> Self {
        Self { distance: 1.0, crossing: 0.5, closing: 0.05 }
    }
}

pub fn interaction_potential(p: &PairFeatures, w: &PairWeights) -> f64 {
    w.distance / (1.0 + p.predicted_min_distance)
        + if p.path_crossing { w.crossing } else { 0.0 }
        + w.closing * p.closing_speed.max(0.0)
}

/// Pair with the highest interaction potential; ties go to the
/// lexicographically smallest `(i, j)` in scenario order.
pub fn select_pair(desc: &SceneDescription, w: &PairWeights) -> Result<(String, String), ProposerError> {
    if desc.agents.len() < 2 {
        return Err(ProposerError::InsufficientAgents(desc.agents.len()));
    }
    let mut best: Option<(f64, &PairFeatures)> = None;
    for p in &desc.pairs {
        let score = interaction_potential(p, w);
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, p));
        }
    }
    let (_, p) = best.expect("at least one pair");
    Ok((p.agent_i.clone(), p.agent_j.clone()))
}

fn maintain(a: &AgentSummary) -> Intent {
    Intent::MaintainSpeed { target_speed: a.speed }
}

/// Stage 2, rule-table backend.
///
/// | geometry                         | intent_i                      | intent_j       |
/// |----------------------------------|-------------------------------|----------------|
/// | adjacent lanes, converging       | lane change toward j's lane   | MaintainSpeed  |
/// | crossing forecast paths          | ReachPoint past the conflict  | Yield to i     |
/// | same lane (i = follower)         | ReachPoint ahead of leader    | MaintainSpeed  |
/// | anything else                    | MaintainSpeed                 | MaintainSpeed  |
pub fn propose_heuristic(scenario: &Scenario, desc: &SceneDescription, pair: (&str, &str)) -> Result<Proposal, ProposerError> {
    let a = desc.agent(pair.0).ok_or_else(|| ProposerError::UnknownAgent(pair.0.into()))?;
    let b = desc.agent(pair.1).ok_or_else(|| ProposerError::UnknownAgent(pair.1.into()))?;
    let f = desc.pair(pair.0, pair.1).ok_or_else(|| ProposerError::UnknownAgent(pair.1.into()))?;
    let parallel = (a.heading - b.heading).cos() >= PARALLEL_COS;
    let proposal = |ai: &AgentSummary, bi: &AgentSummary, intent_i, intent_j, rationale: String| Proposal {
        agent_i: ai.id.clone(),
        agent_j: bi.id.clone(),
        intent_i,
        intent_j,
        rationale,
        backend: Some(ProposalBackend::Heuristic),
    };

    if let (Some(la), Some(lb)) = (&a.lane_id, &b.lane_id) {
        if la != lb && parallel && f.closing_speed > 0.0 {
            let lane_a = scenario.map.lane(la).expect("summary lane exists");
            let lane_b = scenario.map.lane(lb).expect("summary lane exists");
            let side = project_onto_lane(b.position, lane_a).lateral_offset;
            if side.abs() <= 1.25 * (lane_a.width + lane_b.width) / 2.0 {
                let intent = if side > 0.0 {
                    Intent::LaneChangeLeft { target_lane: lb.clone() }
                } else {
                    Intent::LaneChangeRight { target_lane: lb.clone() }
                };
                return Ok(proposal(
                    a,
                    b,
                    intent,
                    maintain(b),
                    format!("adjacent-lane converging: {} cuts into lane {lb} while {} keeps its speed", a.id, b.id),
                ));
            }
        }
    }

    if let Some(conflict) = f.conflict_point.filter(|_| !parallel) {
        let goal = conflict + Vec2::from_heading(a.heading) * GOAL_LEAD;
        return Ok(proposal(
            a,
            b,
            Intent::ReachPoint { goal },
            Intent::Yield { yield_to: a.id.clone() },
            format!("crossing paths: {} pushes through the conflict point and {} yields", a.id, b.id),
        ));
    }

    if let (Some(la), Some(lb)) = (&a.lane_id, &b.lane_id) {
        if la == lb && parallel {
            let lane = scenario.map.lane(la).expect("summary lane exists");
            let (sa, sb) = (project_onto_lane(a.position, lane).arc_length, project_onto_lane(b.position, lane).arc_length);
            let (follower, leader) = if sa <= sb { (a, b) } else { (b, a) };
            let duration = scenario.num_steps().saturating_sub(1) as f64 * scenario.dt();
            let goal = leader.position + Vec2::from_heading(leader.heading) * (leader.speed * duration + GOAL_LEAD);
            return Ok(proposal(
                follower,
                leader,
                Intent::ReachPoint { goal },
                maintain(leader),
                format!("same-lane follower: {} tries to get ahead of {}", follower.id, leader.id),
            ));
        }
    }

    Ok(proposal(a, b, maintain(a), maintain(b), "fallback".into()))
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProposalParseError {
    #[error("no JSON object found in reply: {fragment}")]
    NoJsonFound { fragment: String },
    #[error("schema error: {message} in {fragment}")]
    SchemaError { message: String, fragment: String },
    #[error("reference error: {message} in {fragment}")]
    ReferenceError { message: String, fragment: String },
    #[error("agent_i and agent_j are both {agent} in {fragment}")]
    SelfPairError { agent: String, fragment: String },
}

/// First balanced top-level `{...}` in `text`, honouring JSON string escapes.
pub fn extract_json_object(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    let start = text.find('{')?;
    let (mut depth, mut in_string, mut escaped) = (0usize, false, false);
    for (i, &c) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

fn snippet(text: &str) -> String {
    const MAX: usize = 160;
    if text.len() <= MAX {
        return text.to_string();
    }
    let mut end = MAX;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}...", &text[..end])
}

/// Extracts and validates a proposal from a free-text service reply.
pub fn parse_proposal_text(text: &str, scenario: &Scenario) -> Result<Proposal, ProposalParseError> {
    let json = extract_json_object(text).ok_or_else(|| ProposalParseError::NoJsonFound { fragment: snippet(text) })?;
    let fragment = || snippet(json);
    let proposal: Proposal =
        serde_json::from_str(json).map_err(|e| ProposalParseError::SchemaError { message: e.to_string(), fragment: fragment() })?;
    if proposal.agent_i == proposal.agent_j {
        return Err(ProposalParseError::SelfPairError { agent: proposal.agent_i.clone(), fragment: fragment() });
    }
    for id in [&proposal.agent_i, &proposal.agent_j] {
        if scenario.agent(id).is_none() {
            return Err(ProposalParseError::ReferenceError { message: format!("unknown agent {id}"), fragment: fragment() });
        }
    }
    for (owner, intent) in [(&proposal.agent_i, &proposal.intent_i), (&proposal.agent_j, &proposal.intent_j)] {
        intent.validate(owner, scenario).map_err(|e| match e {
            IntentError::Invalid(message) => ProposalParseError::SchemaError { message, fragment: fragment() },
            other => ProposalParseError::ReferenceError { message: other.to_string(), fragment: fragment() },
        })?;
    }
    Ok(proposal)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ProposerConfig {
    /// Constant-velocity forecast horizon (s).
    pub horizon: f64,
    pub pair_weights: PairWeights,
    /// Re-asks after an unparseable reply before falling back to the rules.
    pub parse_retries: u32,
    /// Use the rule table when the service backend fails.
    pub fallback: bool,
}

impl Default for ProposerConfig {
    fn default() -> Self {
        Self { horizon: DEFAULT_HORIZON, pair_weights: PairWeights::default(), parse_retries: 2, fallback: true }
    }
}

pub enum Backend<'a> {
    Heuristic,
    Service(&'a ChatClient),
}

fn heuristic(scenario: &Scenario, desc: &SceneDescription, config: &ProposerConfig) -> Result<Proposal, ProposerError> {
    let (i, j) = select_pair(desc, &config.pair_weights)?;
    propose_heuristic(scenario, desc, (&i, &j))
}

fn valid_ids(scenario: &Scenario) -> String {
    let agents: Vec<&str> = scenario.trajectories.iter().map(|t| t.agent_id.as_str()).collect();
    let lanes: Vec<&str> = scenario.map.lanes.iter().map(|l| l.id.as_str()).collect();
    format!("vehicles: {}\nlanes: {}", agents.join(", "), lanes.join(", "))
}

fn ask_service(
    client: &ChatClient,
    scenario: &Scenario,
    desc: &mut SceneDescription,
    config: &ProposerConfig,
) -> Result<Proposal, String> {
    let describe = DESCRIBE_PROMPT.replace("{scenario_summary}", &desc.rendered_text);
    let scene_text = client
        .chat(&[ChatMessage::system(SYSTEM_PROMPT), ChatMessage::user(describe)])
        .map_err(|e| e.to_string())?;
    if !scene_text.trim().is_empty() {
        desc.rendered_text = scene_text;
    }

    let propose = PROPOSE_PROMPT.replace("{scene_description}", &desc.rendered_text).replace("{valid_ids}", &valid_ids(scenario));
    let mut messages = vec![ChatMessage::system(SYSTEM_PROMPT), ChatMessage::user(propose)];
    let mut last_error = String::new();
    for attempt in 0..=config.parse_retries {
        let reply = client.chat(&messages).map_err(|e| e.to_string())?;
        match parse_proposal_text(&reply, scenario) {
            Ok(mut p) => {
                p.backend = Some(ProposalBackend::Service);
                return Ok(p);
            }
            Err(e) => {
                log::warn!("unusable proposal reply (attempt {}): {e}", attempt + 1);
                last_error = e.to_string();
                if !reply.is_empty() {
                    messages.push(ChatMessage::assistant(reply));
                }
                messages.push(ChatMessage::user(format!(
                    "Your reply could not be used: {e}. Reply again with exactly one valid JSON object."
                )));
            }
        }
    }
    Err(last_error)
}

/// Describe-then-propose. The service backend falls back to the rule table
/// (marked `heuristic-fallback`) when the service fails or keeps returning
/// unusable replies.
pub fn propose(scenario: &Scenario, backend: Backend<'_>, config: &ProposerConfig) -> Result<(SceneDescription, Proposal), ProposerError> {
    let mut desc = describe_scene(scenario, config.horizon);
    match backend {
        Backend::Heuristic => {
            let p = heuristic(scenario, &desc, config)?;
            Ok((desc, p))
        }
        Backend::Service(client) => match ask_service(client, scenario, &mut desc, config) {
            Ok(p) => Ok((desc, p)),
            Err(e) if !config.fallback => Err(ProposerError::ServiceFailed(e)),
            Err(e) => {
                log::warn!("service proposal failed, using rule table: {e}");
                let mut p = heuristic(scenario, &desc, config)?;
                p.backend = Some(ProposalBackend::HeuristicFallback);
                Ok((desc, p))
            }
        },
    }
}
