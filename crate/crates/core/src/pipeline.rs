//! End-to-end runs: configuration, proposal, generation, batch metrics,
//! parameter sweeps, and file outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::diffusion::{make_schedule, DiffusionError, DiffusionSchedule, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_STEPS};
use crate::geom::Vec2;
use crate::guidance::{guided_sample, trace_to_csv, GenerationOptions, GenerationProblem, GenerationResult, GuidanceConfig, GuidanceError};
use crate::llm_gateway::{ApiKey, ChatClient, GatewayConfig};
use crate::metrics::{engagement_ratio, reports_to_csv, MetricsReport, DEFAULT_RADIUS, DEFAULT_TTC_THRESHOLD};
use crate::proposal::Proposal;
use crate::proposer::{parse_proposal_text, propose, Backend, ProposerConfig, ProposerError, SceneDescription};
use crate::scenario::{load_scenario, scenario_to_json, Scenario, ScenarioError};
use crate::social_reward::{make_extrinsic, IntrinsicWeights, RewardError, SocialParams};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_GATEWAY: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Proposer(#[from] ProposerError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

impl PipelineError {
    /// 2 input/validation, 3 gateway, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Proposer(ProposerError::Gateway(_) | ProposerError::ServiceFailed(_)) => EXIT_GATEWAY,
            PipelineError::Guidance(GuidanceError::NonFiniteReward { .. })
            | PipelineError::Guidance(GuidanceError::Diffusion(DiffusionError::SolverFailure { .. })) => EXIT_NUMERIC,
            _ => EXIT_INPUT,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Heuristic,
    Service,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, beta_min: DEFAULT_BETA_MIN, beta_max: DEFAULT_BETA_MAX }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule, PipelineError> {
        make_schedule(self.steps, self.beta_min, self.beta_max).map_err(|e| PipelineError::Input(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Per-vehicle disc radius (m).
    pub radius: f64,
    /// Engagement threshold on minimum TTC (s).
    pub ttc_threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { radius: DEFAULT_RADIUS, ttc_threshold: DEFAULT_TTC_THRESHOLD }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairParams {
    pub agent_i: SocialParams,
    pub agent_j: SocialParams,
}

impl Default for PairParams {
    fn default() -> Self {
        Self { agent_i: SocialParams::RATIONAL_EGOIST, agent_j: SocialParams::RATIONAL_EGOIST }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub phi: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Number of seeds per cell, starting at the run seed.
    pub seeds: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        use std::f64::consts::FRAC_PI_4;
        Self { phi: vec![-FRAC_PI_4, 0.0, FRAC_PI_4], lambda: vec![0.3, 0.5, 1.0], seeds: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Option<PathBuf>,
    /// Precomputed proposal; skips the proposer when set.
    pub proposal: Option<PathBuf>,
    pub backend: BackendKind,
    pub gateway: GatewayConfig,
    pub proposer: ProposerConfig,
    pub social: PairParams,
    pub weights: IntrinsicWeights,
    pub guidance: GuidanceConfig,
    pub generation: GenerationOptions,
    pub schedule: ScheduleConfig,
    pub metrics: MetricsConfig,
    pub sweep: SweepConfig,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub plot: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: None,
            proposal: None,
            backend: BackendKind::Heuristic,
            gateway: GatewayConfig::default(),
            proposer: ProposerConfig::default(),
            social: PairParams::default(),
            weights: IntrinsicWeights::default(),
            guidance: GuidanceConfig::default(),
            generation: GenerationOptions::default(),
            schedule: ScheduleConfig::default(),
            metrics: MetricsConfig::default(),
            sweep: SweepConfig::default(),
            out: PathBuf::from("out"),
            seed: None,
            plot: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))
    }

    /// Pretty JSON of the effective configuration. The API key is never
    /// serialized.
    pub fn resolved_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.guidance.validate()?;
        self.weights.validate()?;
        for path in self.scenario.iter().chain(&self.proposal) {
            if !path.exists() {
                return Err(PipelineError::Input(format!("{} does not exist", path.display())));
            }
        }
        if !(self.metrics.radius > 0.0 && self.metrics.ttc_threshold > 0.0) {
            return Err(PipelineError::Input("metrics radius and ttc_threshold must be positive".into()));
        }
        self.schedule.build()?;
        Ok(())
    }

    pub fn load_scenario(&self) -> Result<Scenario, PipelineError> {
        let path = self.scenario.as_ref().ok_or_else(|| PipelineError::Input("no scenario given (--scenario)".into()))?;
        Ok(load_scenario(path)?)
    }

    pub fn require_seed(&self) -> Result<u64, PipelineError> {
        self.seed.ok_or_else(|| PipelineError::Input("a seed is required (--seed)".into()))
    }
}

/// Proposal from the configured file, or from the configured backend.
pub fn make_proposal(config: &RunConfig, scenario: &Scenario) -> Result<(Option<SceneDescription>, Proposal), PipelineError> {
    if let Some(path) = &config.proposal {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let p = parse_proposal_text(&text, scenario).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
        return Ok((None, p));
    }
    let (desc, p) = match config.backend {
        BackendKind::Heuristic => propose(scenario, Backend::Heuristic, &config.proposer)?,
        BackendKind::Service => {
            let mut gateway = config.gateway.clone();
            if gateway.api_key.is_empty() {
                gateway.api_key = ApiKey::from_env().unwrap_or_default();
            }
            let client = ChatClient::new(gateway);
            propose(scenario, Backend::Service(&client), &config.proposer)?
        }
    };
    Ok((Some(desc), p))
}

/// Extrinsic rewards of the proposal pair on `scenario`.
pub fn pair_extrinsic(scenario: &Scenario, proposal: &Proposal) -> Result<(f64, f64), PipelineError> {
    let get = |id: &str| scenario.agent(id).ok_or_else(|| PipelineError::Input(format!("unknown agent {id}")));
    let (ti, tj) = (get(&proposal.agent_i)?, get(&proposal.agent_j)?);
    Ok((make_extrinsic(&proposal.intent_i)?.evaluate(ti, scenario), make_extrinsic(&proposal.intent_j)?.evaluate(tj, scenario)))
}

pub fn report_for(id: &str, scenario: &Scenario, proposal: &Proposal, metrics: &MetricsConfig) -> Result<MetricsReport, PipelineError> {
    let ext = pair_extrinsic(scenario, proposal)?;
    MetricsReport::compute(id, scenario, proposal.pair(), ext, metrics.radius, metrics.ttc_threshold)
        .map_err(|e| PipelineError::Input(e.to_string()))
}

pub struct Generated {
    pub result: GenerationResult,
    pub report: MetricsReport,
}

/// One guided generation with the given social parameters and seed.
pub fn generate(
    scenario: &Scenario,
    proposal: &Proposal,
    params: PairParams,
    config: &RunConfig,
    seed: u64,
) -> Result<Generated, PipelineError> {
    let schedule = config.schedule.build()?;
    let problem = GenerationProblem::new(scenario, proposal, [params.agent_i, params.agent_j], config.weights, config.generation)?;
    let denoiser = problem.default_denoiser()?;
    let guidance = GuidanceConfig { seed, ..config.guidance };
    let mut result = guided_sample(&problem, &guidance, &denoiser, &schedule)?;
    let meta = &mut result.scenario.metadata;
    meta.insert("proposal".into(), serde_json::to_value(proposal).expect("proposal serializes"));
    meta.insert("social_params".into(), serde_json::to_value(params).expect("params serialize"));
    meta.insert("seed".into(), Value::from(seed));
    meta.insert("best_reward".into(), Value::from(result.best_reward));
    let report = report_for(&format!("seed_{seed}"), &result.scenario, proposal, &config.metrics)?;
    Ok(Generated { result, report })
}

/// Independent generations for consecutive seeds, in seed order.
pub fn run_batch(
    scenario: &Scenario,
    proposal: &Proposal,
    params: PairParams,
    config: &RunConfig,
    seeds: &[u64],
) -> Vec<Result<MetricsReport, PipelineError>> {
    seeds.par_iter().map(|&s| generate(scenario, proposal, params, config, s).map(|g| g.report)).collect()
}

/// File outputs of a single generation.
pub fn write_generation(dir: &Path, generated: &Generated, plot: bool) -> Result<(), PipelineError> {
    write_file(&dir.join("generated_scenario.json"), &scenario_to_json(&generated.result.scenario))?;
    write_file(&dir.join("trace.csv"), &trace_to_csv(&generated.result.trace))?;
    write_file(&dir.join("metrics.csv"), &reports_to_csv(std::slice::from_ref(&generated.report)))?;
    if plot {
        let pair = generated.result.scenario.metadata.get("proposal").and_then(|p| {
            Some((p.get("agent_i")?.as_str()?.to_string(), p.get("agent_j")?.as_str()?.to_string()))
        });
        write_file(&dir.join("generated_scenario.svg"), &scenario_svg(&generated.result.scenario, pair.as_ref()))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub phi: f64,
    pub lambda: f64,
    pub runs: usize,
    pub failed: usize,
    /// Percent.
    pub engagement_ratio: f64,
    /// Binomial standard error of the ratio, percent.
    pub engagement_se: f64,
    pub mean_max_accel: f64,
    pub mean_extrinsic: f64,
    pub first_error: Option<String>,
}

pub const SWEEP_HEADER: &str = "phi,lambda,runs,failed,engagement_ratio,engagement_se,mean_max_accel,mean_extrinsic";

impl SweepRow {
    pub fn from_reports(phi: f64, lambda: f64, results: Vec<Result<MetricsReport, PipelineError>>) -> Self {
        let failed = results.iter().filter(|r| r.is_err()).count();
        let first_error = results.iter().find_map(|r| r.as_ref().err().map(|e| e.to_string()));
        let ok: Vec<MetricsReport> = results.into_iter().filter_map(Result::ok).collect();
        let n = ok.len();
        let mean = |f: &dyn Fn(&MetricsReport) -> f64| if n == 0 { f64::NAN } else { ok.iter().map(f).sum::<f64>() / n as f64 };
        let ratio = engagement_ratio(&ok).unwrap_or(f64::NAN);
        let p = ratio / 100.0;
        Self {
            phi,
            lambda,
            runs: n,
            failed,
            engagement_ratio: ratio,
            engagement_se: 100.0 * (p * (1.0 - p) / n as f64).sqrt(),
            mean_max_accel: mean(&|r| r.max_acceleration),
            mean_extrinsic: mean(&|r| r.extrinsic_reward_i),
            first_error,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.3},{},{},{:.4},{:.4},{:.6},{:.6}",
            self.phi,
            self.lambda,
            self.runs,
            self.failed,
            self.engagement_ratio,
            self.engagement_se,
            self.mean_max_accel,
            self.mean_extrinsic
        )
    }
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Every (φ, λ) cell of the sweep. The swept parameters apply to agent i;
/// agent j keeps the configured parameters. Cells share seeds.
pub fn sweep(scenario: &Scenario, proposal: &Proposal, config: &RunConfig) -> Result<Vec<SweepRow>, PipelineError> {
    let sw = &config.sweep;
    if sw.phi.is_empty() || sw.lambda.is_empty() || sw.seeds == 0 {
        return Err(PipelineError::Input("sweep needs non-empty phi and lambda lists and at least one seed".into()));
    }
    let base = config.seed.unwrap_or(0);
    let seeds: Vec<u64> = (0..sw.seeds as u64).map(|s| base + s).collect();
    let mut cells = Vec::new();
    for &phi in &sw.phi {
        for &lambda in &sw.lambda {
            cells.push((phi, lambda, SocialParams::new(lambda, phi).map_err(|e| PipelineError::Input(e.to_string()))?));
        }
    }
    Ok(cells
        .into_par_iter()
        .map(|(phi, lambda, params_i)| {
            let params = PairParams { agent_i: params_i, agent_j: config.social.agent_j };
            SweepRow::from_reports(phi, lambda, run_batch(scenario, proposal, params, config, &seeds))
        })
        .collect())
}

/// Metrics for every scenario file in `dir`, in file-name order. Files that
/// fail to load are skipped with a warning.
pub fn evaluate_dir(dir: &Path, config: &RunConfig) -> Result<(Vec<MetricsReport>, Vec<String>), PipelineError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json") && p.file_name().is_some_and(|n| n != "run_config.resolved.json"))
        .collect();
    files.sort();
    let mut reports = Vec::new();
    let mut warnings = Vec::new();
    for path in files {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        match evaluate_file(&path, &id, config) {
            Ok(r) => reports.push(r),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                warnings.push(format!("{}: {e}", path.display()));
            }
        }
    }
    if reports.is_empty() {
        return Err(PipelineError::Input(format!("no valid scenario files in {}", dir.display())));
    }
    Ok((reports, warnings))
}

fn evaluate_file(path: &Path, id: &str, config: &RunConfig) -> Result<MetricsReport, PipelineError> {
    let scenario = load_scenario(path)?;
    let stored = scenario.metadata.get("proposal").and_then(|v| serde_json::from_value::<Proposal>(v.clone()).ok());
    let proposal = match stored {
        Some(p) => p,
        None => propose(&scenario, Backend::Heuristic, &config.proposer)?.1,
    };
    report_for(id, &scenario, &proposal, &config.metrics)
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Static SVG of lane boundaries and agent paths. The pair, if given, is
/// drawn thicker.
pub fn scenario_svg(scenario: &Scenario, pair: Option<&(String, String)>) -> String {
    let mut lines: Vec<(Vec<Vec2>, &str, f64, bool)> = Vec::new();
    for lane in &scenario.map.lanes {
        let c = &lane.centerline;
        for side in [-0.5, 0.5] {
            let edge = (0..c.len())
                .map(|k| {
                    let dir = if k + 1 < c.len() { c[k + 1] - c[k] } else { c[k] - c[k - 1] };
                    let n = dir * (1.0 / dir.norm().max(1e-12));
                    c[k] + Vec2::new(-n.y, n.x) * (side * lane.width)
                })
                .collect();
            lines.push((edge, "#999999", 0.5, false));
        }
        lines.push((c.clone(), "#cccccc", 0.3, true));
    }
    for (a, t) in scenario.trajectories.iter().enumerate() {
        let bold = pair.is_some_and(|(i, j)| t.agent_id == *i || t.agent_id == *j);
        lines.push((t.positions(), COLORS[a % COLORS.len()], if bold { 1.2 } else { 0.6 }, false));
    }
    let agent_points = scenario.trajectories.iter().flat_map(|t| t.states.iter().map(|s| s.position));
    let (mut lo, mut hi) = (Vec2::new(f64::INFINITY, f64::INFINITY), Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
    for p in agent_points {
        lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    let pad = 10.0;
    let (x0, y0) = (lo.x - pad, lo.y - pad);
    let (w, h) = (hi.x - lo.x + 2.0 * pad, hi.y - lo.y + 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{x0:.2} {:.2} {w:.2} {h:.2}" width="{:.0}" height="{:.0}">"#, -(y0 + h), w * 8.0, h * 8.0);
    let _ = writeln!(s, r#"<g transform="scale(1,-1)" fill="none">"#);
    for (pts, color, width, dashed) in &lines {
        let path: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", p.x, p.y)).collect();
        let dash = if *dashed { r#" stroke-dasharray="2,2""# } else { "" };
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" stroke-width="{width}"{dash}/>"#, path.join(" "));
    }
    for (a, t) in scenario.trajectories.iter().enumerate() {
        let p = t.states[0].position;
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1" fill="{}"/>"#, p.x, p.y, COLORS[a % COLORS.len()]);
    }
    s.push_str("</g>\n</svg>\n");
    s
}
