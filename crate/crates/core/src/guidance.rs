//! Gradient-free evolutionary guidance of the reverse diffusion chain.
//!
//! A population of noisy joint trajectories is denoised in lockstep. At every
//! step each member's clean-sample estimate is scored, the population is
//! resampled from a reward softmax, and the survivors take one reverse step.
//! Outer search steps renoise the finished population and run the chain
//! again from an intermediate noise level. The best estimate seen anywhere is
//! archived and returned.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{
    constant_velocity_prior, forward_noise, initial_noise, predict_x0, reverse_step, standard_normal, Denoiser, DiffusionError,
    DiffusionSchedule, GaussianPriorDenoiser, TrajectoryTensor,
};
use crate::geom::Vec2;
use crate::metrics::DEFAULT_RADIUS;
use crate::proposal::Proposal;
use crate::scenario::{Scenario, Trajectory};
use crate::social_reward::{
    intrinsic_reward, ExtrinsicRegistry, IntrinsicWeights, JointReward, RewardError, RewardedAgent, SocialParams,
};

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("invalid guidance config: {0}")]
    InvalidConfig(String),
    #[error("non-finite reward for member {member} at search step {step_k}, t = {t}")]
    NonFiniteReward { member: usize, step_k: usize, t: usize },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Population size M.
    pub population: usize,
    /// Outer search steps K.
    pub search_steps: usize,
    pub tau_low: f64,
    pub tau_high: f64,
    pub renoise_fraction: f64,
    pub seed: u64,
    /// Select only once per search step, at t = 1.
    pub terminal_only: bool,
    /// Evaluate members on the rayon pool. Results do not depend on this.
    pub parallel: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            population: 32,
            search_steps: 4,
            tau_low: 1.0,
            tau_high: 50.0,
            renoise_fraction: 0.7,
            seed: 0,
            terminal_only: false,
            parallel: true,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        let bad = |m: String| Err(GuidanceError::InvalidConfig(m));
        if !(2..1 << 24).contains(&self.population) {
            return bad(format!("population must be in [2, 2^24), got {}", self.population));
        }
        if !(1..1 << 16).contains(&self.search_steps) {
            return bad(format!("search_steps must be in [1, 2^16), got {}", self.search_steps));
        }
        if !(self.tau_low.is_finite() && self.tau_high.is_finite() && 0.0 <= self.tau_low && self.tau_low <= self.tau_high) {
            return bad(format!("need 0 <= tau_low <= tau_high, got {} and {}", self.tau_low, self.tau_high));
        }
        if !(self.renoise_fraction > 0.0 && self.renoise_fraction <= 1.0) {
            return bad(format!("renoise_fraction must be in (0, 1], got {}", self.renoise_fraction));
        }
        Ok(())
    }
}

/// Selection gain at step `t`: `tau_low` at t = T rising linearly to
/// `tau_high` at t = 0.
pub fn temperature(t: usize, steps: usize, tau_low: f64, tau_high: f64) -> f64 {
    let s = t as f64 / steps as f64;
    tau_low * s + tau_high * (1.0 - s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EliteDistribution {
    pub weights: Vec<f64>,
}

impl EliteDistribution {
    pub fn uniform(m: usize) -> Self {
        Self { weights: vec![1.0 / m as f64; m] }
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.weights.iter().filter(|&&w| w > 0.0).map(|w| w * w.ln()).sum::<f64>()
    }
}

/// Softmax of `tau · rewards`, shifted by the maximum reward.
pub fn elite_distribution(rewards: &[f64], tau: f64) -> EliteDistribution {
    let max = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = rewards.iter().map(|r| (tau * (r - max)).exp()).collect();
    let z: f64 = e.iter().sum();
    EliteDistribution { weights: e.into_iter().map(|x| x / z).collect() }
}

/// `m` multinomial draws of member indices from `q`.
pub fn elite_indices<R: rand::Rng + ?Sized>(q: &EliteDistribution, m: usize, rng: &mut R) -> Vec<usize> {
    let dist = WeightedIndex::new(&q.weights).expect("elite weights form a distribution");
    (0..m).map(|_| dist.sample(rng)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub members: Vec<TrajectoryTensor>,
    pub rewards: Vec<f64>,
    pub t: usize,
}

/// Draws a new population of the same size from `q`, carrying rewards along.
pub fn resample_elites<R: rand::Rng + ?Sized>(pop: &Population, q: &EliteDistribution, rng: &mut R) -> Population {
    let idx = elite_indices(q, pop.members.len(), rng);
    Population {
        members: idx.iter().map(|&i| pop.members[i].clone()).collect(),
        rewards: idx.iter().map(|&i| pop.rewards[i]).collect(),
        t: pop.t,
    }
}

#[derive(Clone, Copy)]
#[repr(u64)]
enum Purpose {
    Init = 0,
    Renoise = 1,
    Step = 2,
    Resample = 3,
}

/// Independent stream for one (search step, timestep, member, purpose).
fn substream(seed: u64, k: usize, t: usize, member: usize, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((k as u64) << 48) | ((t as u64 & 0xffff) << 32) | ((member as u64) << 8) | purpose as u64);
    rng
}

fn map_members<T: Send, F>(parallel: bool, n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
{
    if parallel {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step_k: usize,
    pub t: usize,
    pub best_reward: f64,
    pub mean_reward: f64,
    pub entropy_q: f64,
}

pub const TRACE_HEADER: &str = "step_k,t,best_reward,mean_reward,entropy_q";

pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for r in trace {
        out.push_str(&format!("{},{},{},{},{}\n", r.step_k, r.t, r.best_reward, r.mean_reward, r.entropy_q));
    }
    out
}

#[derive(Debug, Clone)]
pub struct EvolutionOutcome {
    /// Archived best clean-sample estimate.
    pub best: TrajectoryTensor,
    pub best_reward: f64,
    pub trace: Vec<TraceRow>,
    /// Clean samples at the end of the last search step.
    pub population: Vec<TrajectoryTensor>,
}

/// The guidance loop over an arbitrary objective on clean-sample estimates.
pub fn evolve<F>(
    template: &TrajectoryTensor,
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    config: &GuidanceConfig,
    objective: F,
) -> Result<EvolutionOutcome, GuidanceError>
where
    F: Fn(&TrajectoryTensor) -> Result<f64, GuidanceError> + Sync,
{
    config.validate()?;
    let steps = schedule.steps();
    if steps >= 1 << 16 {
        return Err(GuidanceError::InvalidConfig(format!("schedule too long: {steps} steps")));
    }
    let m = config.population;
    let seed = config.seed;
    let par = config.parallel;
    let renoise_t = ((config.renoise_fraction * steps as f64).ceil() as usize).clamp(1, steps);

    let mut members: Vec<TrajectoryTensor> =
        map_members(par, m, |i| initial_noise(template, &mut substream(seed, 0, steps, i, Purpose::Init)));
    let mut archive: Option<(f64, TrajectoryTensor)> = None;
    let mut trace = Vec::new();

    for k in 1..=config.search_steps {
        let t_start = if k == 1 {
            steps
        } else {
            let renoised = map_members(par, m, |i| {
                let noise = standard_normal(&mut substream(seed, k, renoise_t, i, Purpose::Renoise), template.len());
                forward_noise(&members[i], renoise_t, schedule, &noise)
            });
            members = renoised.into_iter().collect::<Result<_, _>>()?;
            renoise_t
        };

        for t in (1..=t_start).rev() {
            let select = !config.terminal_only || t == 1;
            let scored = map_members(par, m, |i| -> Result<(TrajectoryTensor, f64), GuidanceError> {
                let x0 = predict_x0(&members[i], t, schedule, denoiser)?;
                let r = if select { objective(&x0)? } else { 0.0 };
                if !r.is_finite() {
                    return Err(GuidanceError::NonFiniteReward { member: i, step_k: k, t });
                }
                Ok((x0, r))
            });
            let (mut x0s, rewards): (Vec<_>, Vec<_>) = scored.into_iter().collect::<Result<Vec<_>, _>>()?.into_iter().unzip();

            if select {
                let (bi, &br) = rewards.iter().enumerate().fold((0, &f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
                if archive.as_ref().is_none_or(|(r, _)| br > *r) {
                    archive = Some((br, x0s[bi].clone()));
                }
                let q = elite_distribution(&rewards, temperature(t, steps, config.tau_low, config.tau_high));
                trace.push(TraceRow {
                    step_k: k,
                    t,
                    best_reward: archive.as_ref().map(|a| a.0).unwrap_or(br),
                    mean_reward: rewards.iter().sum::<f64>() / m as f64,
                    entropy_q: q.entropy(),
                });
                let idx = elite_indices(&q, m, &mut substream(seed, k, t, 0, Purpose::Resample));
                members = idx.iter().map(|&i| members[i].clone()).collect();
                x0s = idx.iter().map(|&i| x0s[i].clone()).collect();
            }

            let next = map_members(par, m, |i| {
                reverse_step(&members[i], t, &x0s[i], schedule, &mut substream(seed, k, t, i, Purpose::Step))
            });
            members = next.into_iter().collect::<Result<_, _>>()?;
        }
    }

    let (best_reward, best) = archive.expect("at least one selection step");
    Ok(EvolutionOutcome { best, best_reward, trace, population: members })
}

/// Options describing which agents to regenerate and how.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationOptions {
    /// Leading timesteps of every generated agent kept as observed.
    pub observed_steps: usize,
    /// Regenerate every agent instead of only the proposal pair.
    pub joint_all: bool,
    pub smoothness: f64,
    pub ridge: f64,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            observed_steps: 10,
            joint_all: false,
            smoothness: crate::diffusion::DEFAULT_SMOOTHNESS,
            ridge: crate::diffusion::DEFAULT_RIDGE,
        }
    }
}

/// A scenario, a proposal and the social parameters of the two proposal
/// agents, compiled into a tensor template and a reward.
pub struct GenerationProblem {
    pub scenario: Scenario,
    pub proposal: Proposal,
    pub options: GenerationOptions,
    generated: Vec<bool>,
    template: TrajectoryTensor,
    prior_mean: Vec<f64>,
    reward: JointReward,
}

impl GenerationProblem {
    pub fn new(
        scenario: &Scenario,
        proposal: &Proposal,
        params: [SocialParams; 2],
        weights: IntrinsicWeights,
        options: GenerationOptions,
    ) -> Result<Self, GuidanceError> {
        let (ai, aj) = proposal.pair();
        let ii = scenario.agent_index(ai).ok_or_else(|| GuidanceError::InvalidRequest(format!("unknown agent {ai}")))?;
        let ij = scenario.agent_index(aj).ok_or_else(|| GuidanceError::InvalidRequest(format!("unknown agent {aj}")))?;
        if ii == ij {
            return Err(GuidanceError::InvalidRequest(format!("proposal pairs {ai} with itself")));
        }
        for (owner, intent) in [(ai, &proposal.intent_i), (aj, &proposal.intent_j)] {
            intent.validate(owner, scenario).map_err(|e| GuidanceError::InvalidRequest(e.to_string()))?;
        }
        let steps = scenario.num_steps();
        if options.observed_steps < 1 || options.observed_steps >= steps {
            return Err(GuidanceError::InvalidRequest(format!(
                "observed_steps must be in [1, {steps}), got {}",
                options.observed_steps
            )));
        }
        let n = scenario.num_agents();
        let generated: Vec<bool> = (0..n).map(|a| options.joint_all || a == ii || a == ij).collect();

        let mut template = TrajectoryTensor::zeros(n, steps);
        let mut prior_mean = vec![0.0; template.len()];
        for (a, traj) in scenario.trajectories.iter().enumerate() {
            let positions = traj.positions();
            let reference =
                if generated[a] { constant_velocity_prior(&positions, options.observed_steps, steps) } else { positions.clone() };
            for (k, (r, p)) in reference.iter().zip(&positions).enumerate() {
                for (c, (rv, pv)) in [(r.x, p.x), (r.y, p.y)].into_iter().enumerate() {
                    let i = template.index(a, k, c);
                    template.reference[i] = rv;
                    prior_mean[i] = rv;
                    if !generated[a] || k < options.observed_steps {
                        template.condition(i, pv - rv);
                    }
                }
            }
        }

        let registry = ExtrinsicRegistry::default();
        let reward = JointReward::new(
            [
                RewardedAgent::new(ai, params[0], proposal.intent_i.clone(), &registry)?,
                RewardedAgent::new(aj, params[1], proposal.intent_j.clone(), &registry)?,
            ],
            weights,
        );
        Ok(Self { scenario: scenario.clone(), proposal: proposal.clone(), options, generated, template, prior_mean, reward })
    }

    pub fn template(&self) -> &TrajectoryTensor {
        &self.template
    }

    /// Smoothness-prior denoiser centred on the constant-velocity rollout.
    pub fn default_denoiser(&self) -> Result<GaussianPriorDenoiser, GuidanceError> {
        Ok(GaussianPriorDenoiser::with_params(
            self.template.agents,
            self.template.steps,
            self.prior_mean.clone(),
            self.options.smoothness,
            self.options.ridge,
        )?)
    }

    pub fn is_generated(&self, agent: usize) -> bool {
        self.generated[agent]
    }

    /// Tensor → scenario. Generated agents get speed and heading re-derived
    /// from positions; frozen agents are copied unchanged.
    pub fn decode(&self, x: &TrajectoryTensor) -> Scenario {
        let trajectories = self
            .scenario
            .trajectories
            .iter()
            .enumerate()
            .map(|(a, orig)| {
                if self.generated[a] {
                    Trajectory::from_positions(orig.agent_id.clone(), &x.positions(a), orig.dt, orig.states[0].heading)
                } else {
                    orig.clone()
                }
            })
            .collect();
        Scenario { trajectories, map: self.scenario.map.clone(), metadata: self.scenario.metadata.clone() }
    }

    /// Joint reward of a decoded sample. In joint-all mode each agent outside
    /// the pair adds its own intrinsic reward against everyone else.
    pub fn reward(&self, joint: &Scenario) -> Result<f64, GuidanceError> {
        let mut total = self.reward.evaluate(joint)?;
        if self.options.joint_all {
            let pair = self.proposal.pair();
            for t in &joint.trajectories {
                if t.agent_id == pair.0 || t.agent_id == pair.1 {
                    continue;
                }
                let others: Vec<&Trajectory> = joint.trajectories.iter().filter(|o| o.agent_id != t.agent_id).collect();
                total += intrinsic_reward(t, &others, &joint.map, &self.reward.weights);
            }
        }
        Ok(total)
    }
}

#[derive(Debug, Clone)]
pub struct GenerationResult {
    pub scenario: Scenario,
    pub best_reward: f64,
    pub trace: Vec<TraceRow>,
    pub population: Vec<Scenario>,
    /// No two vehicle discs overlap at any timestep of `scenario`.
    pub collision_free: bool,
}

/// True when no pair of agents comes within two disc radii at a shared step.
pub fn collision_free(scenario: &Scenario, radius: f64) -> bool {
    let pos: Vec<Vec<Vec2>> = scenario.trajectories.iter().map(|t| t.positions()).collect();
    for a in 0..pos.len() {
        for b in a + 1..pos.len() {
            if pos[a].iter().zip(&pos[b]).any(|(p, q)| p.distance(*q) < 2.0 * radius) {
                return false;
            }
        }
    }
    true
}

/// Guided generation of the proposal pair (or all agents) for one scenario.
pub fn guided_sample(
    problem: &GenerationProblem,
    config: &GuidanceConfig,
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
) -> Result<GenerationResult, GuidanceError> {
    if problem.scenario.num_steps() != problem.template.steps {
        return Err(GuidanceError::InvalidRequest("template does not match scenario".into()));
    }
    let outcome = evolve(&problem.template, denoiser, schedule, config, |x0| problem.reward(&problem.decode(x0)))?;
    let scenario = problem.decode(&outcome.best);
    Ok(GenerationResult {
        collision_free: collision_free(&scenario, DEFAULT_RADIUS),
        scenario,
        best_reward: outcome.best_reward,
        trace: outcome.trace,
        population: outcome.population.iter().map(|x| problem.decode(x)).collect(),
    })
}
