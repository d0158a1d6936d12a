//! Structured interaction proposals: a selected agent pair and one intent
//! per agent. This is also the JSON wire format exchanged with the chat
//! service.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec2;
use crate::scenario::Scenario;

/// High-level instruction for one vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Intent {
    LaneChangeLeft { target_lane: String },
    LaneChangeRight { target_lane: String },
    MaintainSpeed { target_speed: f64 },
    Yield { yield_to: String },
    ReachPoint { goal: Vec2 },
}

impl Intent {
    pub const KINDS: [&'static str; 5] = ["LaneChangeLeft", "LaneChangeRight", "MaintainSpeed", "Yield", "ReachPoint"];

    pub fn kind(&self) -> &'static str {
        match self {
            Intent::LaneChangeLeft { .. } => "LaneChangeLeft",
            Intent::LaneChangeRight { .. } => "LaneChangeRight",
            Intent::MaintainSpeed { .. } => "MaintainSpeed",
            Intent::Yield { .. } => "Yield",
            Intent::ReachPoint { .. } => "ReachPoint",
        }
    }

    /// Checks parameters and resolves ids against `scenario`. `owner` is the
    /// agent the intent is assigned to.
    pub fn validate(&self, owner: &str, scenario: &Scenario) -> Result<(), IntentError> {
        match self {
            Intent::LaneChangeLeft { target_lane } | Intent::LaneChangeRight { target_lane } => {
                if scenario.map.lane(target_lane).is_none() {
                    return Err(IntentError::UnknownLane(target_lane.clone()));
                }
            }
            Intent::MaintainSpeed { target_speed } => {
                if !(target_speed.is_finite() && *target_speed >= 0.0) {
                    return Err(IntentError::Invalid(format!("target_speed must be finite and >= 0, got {target_speed}")));
                }
            }
            Intent::Yield { yield_to } => {
                if scenario.agent(yield_to).is_none() {
                    return Err(IntentError::UnknownAgent(yield_to.clone()));
                }
                if yield_to == owner {
                    return Err(IntentError::Invalid(format!("agent {owner} cannot yield to itself")));
                }
            }
            Intent::ReachPoint { goal } => {
                if !goal.is_finite() {
                    return Err(IntentError::Invalid("goal must be finite".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntentError {
    #[error("unknown lane {0}")]
    UnknownLane(String),
    #[error("unknown agent {0}")]
    UnknownAgent(String),
    #[error("{0}")]
    Invalid(String),
}

/// Which backend produced a proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalBackend {
    Heuristic,
    Service,
    HeuristicFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Proposal {
    pub agent_i: String,
    pub agent_j: String,
    pub intent_i: Intent,
    pub intent_j: Intent,
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<ProposalBackend>,
}

impl Proposal {
    /// Canonical JSON rendering (sorted keys, pretty-printed).
    pub fn render(&self) -> String {
        let value = serde_json::to_value(self).expect("proposal serializes");
        serde_json::to_string_pretty(&value).expect("value serializes")
    }

    pub fn pair(&self) -> (&str, &str) {
        (&self.agent_i, &self.agent_j)
    }
}
