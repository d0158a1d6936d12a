//! Socially-aware multi-agent driving scenario synthesis.
//!
//! The pipeline proposes an interacting vehicle pair with structured
//! intents, scores joint trajectories with a social-value-orientation reward,
//! and generates new trajectories with a diffusion sampler whose every
//! denoising step is steered by reward-weighted elite resampling.

pub mod diffusion;
pub mod geom;
pub mod guidance;
pub mod llm_gateway;
pub mod metrics;
pub mod pipeline;
pub mod proposal;
pub mod proposer;
pub mod scenario;
pub mod social_reward;

pub use geom::Vec2;
