use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use socialgen::llm_gateway::WIRE_DUMP_TARGETS;
use socialgen::metrics::{engagement_ratio, reports_to_csv};
use socialgen::pipeline::{
    evaluate_dir, generate, make_proposal, sweep, sweep_to_csv, write_file, write_generation, BackendKind, PipelineError, RunConfig,
};
use socialgen::social_reward::SocialParams;

#[derive(Parser)]
#[command(name = "socialgen", version, about = "Socially-aware driving scenario generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select an interacting pair and write proposal.json + description.txt
    Propose(Common),
    /// Generate a scenario with step-wise evolutionary guidance
    Generate(Common),
    /// Compute metrics for every scenario file in a directory
    Evaluate {
        /// Directory of scenario JSON files
        dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Batch generation over a grid of social parameters
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Seeds per (phi, lambda) cell
        #[arg(long)]
        seeds: Option<usize>,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Use this proposal instead of running the proposer
    #[arg(long)]
    proposal: Option<PathBuf>,
    #[arg(long, value_parser = parse_backend)]
    backend: Option<BackendKind>,
    /// Chat service base URL (service backend)
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// SVO angle for agent i; a comma-separated list for sweep. Accepts pi/4 style values.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, value_parser = parse_angle)]
    phi: Vec<f64>,
    /// Intrinsic scale for agent i; a comma-separated list for sweep
    #[arg(long = "lambda", value_delimiter = ',')]
    lambda: Vec<f64>,
    /// Population size
    #[arg(long)]
    pop: Option<usize>,
    /// Outer search steps
    #[arg(long)]
    search_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Apply selection only at the final denoising step
    #[arg(long)]
    terminal_only: bool,
    /// Regenerate every agent, not only the proposal pair
    #[arg(long)]
    joint_all: bool,
    /// Worker threads; 1 runs single-threaded
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write an SVG of the generated scenario
    #[arg(long)]
    plot: bool,
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    match s {
        "heuristic" => Ok(BackendKind::Heuristic),
        "service" => Ok(BackendKind::Service),
        _ => Err(format!("expected heuristic or service, got {s}")),
    }
}

/// Plain number, or `[-]pi[/d]`.
fn parse_angle(s: &str) -> Result<f64, String> {
    let s = s.trim();
    if let Ok(v) = s.parse::<f64>() {
        return Ok(v);
    }
    let (sign, rest) = s.strip_prefix('-').map_or((1.0, s), |r| (-1.0, r));
    let div = match rest.strip_prefix("pi") {
        Some("") => 1.0,
        Some(d) => d.strip_prefix('/').and_then(|d| d.parse::<f64>().ok()).ok_or_else(|| format!("bad angle {s}"))?,
        None => return Err(format!("bad angle {s}")),
    };
    Ok(sign * std::f64::consts::PI / div)
}

impl Common {
    fn resolve(&self, sweep_mode: bool) -> Result<RunConfig, PipelineError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.scenario {
            c.scenario = Some(v.clone());
        }
        if let Some(v) = &self.proposal {
            c.proposal = Some(v.clone());
        }
        if let Some(v) = self.backend {
            c.backend = v;
        }
        if let Some(v) = &self.base_url {
            c.gateway.base_url = v.clone();
        }
        if let Some(v) = &self.model {
            c.gateway.model = v.clone();
        }
        if sweep_mode {
            if !self.phi.is_empty() {
                c.sweep.phi = self.phi.clone();
            }
            if !self.lambda.is_empty() {
                c.sweep.lambda = self.lambda.clone();
            }
        } else if !self.phi.is_empty() || !self.lambda.is_empty() {
            if self.phi.len() > 1 || self.lambda.len() > 1 {
                return Err(PipelineError::Input("lists for --phi/--lambda are only accepted by sweep".into()));
            }
            let phi = self.phi.first().copied().unwrap_or(c.social.agent_i.phi);
            let lambda = self.lambda.first().copied().unwrap_or(c.social.agent_i.lambda);
            c.social.agent_i = SocialParams::new(lambda, phi).map_err(|e| PipelineError::Input(e.to_string()))?;
        }
        if let Some(v) = self.pop {
            c.guidance.population = v;
        }
        if let Some(v) = self.search_steps {
            c.guidance.search_steps = v;
        }
        if let Some(v) = self.seed {
            c.seed = Some(v);
        }
        if self.terminal_only {
            c.guidance.terminal_only = true;
        }
        if self.joint_all {
            c.generation.joint_all = true;
        }
        if self.threads == Some(1) {
            c.guidance.parallel = false;
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        if self.plot {
            c.plot = true;
        }
        c.validate()?;
        Ok(c)
    }
}

fn echo_config(c: &RunConfig) -> Result<(), PipelineError> {
    write_file(&c.out.join("run_config.resolved.json"), &c.resolved_json())
}

fn cmd_propose(common: &Common) -> Result<(), PipelineError> {
    let c = common.resolve(false)?;
    let scenario = c.load_scenario()?;
    echo_config(&c)?;
    let (desc, proposal) = make_proposal(&c, &scenario)?;
    write_file(&c.out.join("proposal.json"), &(proposal.render() + "\n"))?;
    if let Some(d) = desc {
        write_file(&c.out.join("description.txt"), &d.rendered_text)?;
    }
    println!("{}", proposal.render());
    Ok(())
}

fn cmd_generate(common: &Common) -> Result<(), PipelineError> {
    let c = common.resolve(false)?;
    let seed = c.require_seed()?;
    let scenario = c.load_scenario()?;
    echo_config(&c)?;
    let (_, proposal) = make_proposal(&c, &scenario)?;
    write_file(&c.out.join("proposal.json"), &(proposal.render() + "\n"))?;
    let g = generate(&scenario, &proposal, c.social, &c, seed)?;
    write_generation(&c.out, &g, c.plot)?;
    let r = &g.report;
    println!(
        "pair ({}, {}) best_reward {:.6} min_ttc {} engaged {} collision_free {}",
        proposal.agent_i, proposal.agent_j, g.result.best_reward, r.min_ttc, r.engaged, g.result.collision_free
    );
    Ok(())
}

fn cmd_evaluate(dir: &Path, common: &Common) -> Result<(), PipelineError> {
    let c = common.resolve(false)?;
    let (reports, warnings) = evaluate_dir(dir, &c)?;
    for w in &warnings {
        eprintln!("warning: skipped {w}");
    }
    let csv = reports_to_csv(&reports);
    write_file(&c.out.join("metrics.csv"), &csv)?;
    print!("{csv}");
    let engaged = reports.iter().filter(|r| r.engaged).count();
    let ratio = engagement_ratio(&reports).expect("non-empty");
    println!("engagement ratio: {ratio:.2}% ({engaged}/{})", reports.len());
    Ok(())
}

fn cmd_sweep(common: &Common, seeds: Option<usize>) -> Result<(), PipelineError> {
    let mut c = common.resolve(true)?;
    if let Some(n) = seeds {
        c.sweep.seeds = n;
    }
    let scenario = c.load_scenario()?;
    echo_config(&c)?;
    let (_, proposal) = make_proposal(&c, &scenario)?;
    let rows = sweep(&scenario, &proposal, &c)?;
    let csv = sweep_to_csv(&rows);
    write_file(&c.out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    for r in rows.iter().filter(|r| r.failed > 0) {
        eprintln!("warning: phi={} lambda={}: {} runs failed: {}", r.phi, r.lambda, r.failed, r.first_error.as_deref().unwrap_or(""));
    }
    if rows.iter().all(|r| r.runs == 0) {
        return Err(PipelineError::Input("every sweep cell failed".into()));
    }
    Ok(())
}

fn main() -> ExitCode {
    let mut logger = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"));
    // the wire dumps include the Authorization header
    for target in WIRE_DUMP_TARGETS {
        logger.filter_module(target, log::LevelFilter::Debug);
    }
    logger.init();
    let cli = Cli::parse();
    let threads = match &cli.command {
        Command::Propose(c) | Command::Generate(c) => c.threads,
        Command::Evaluate { common, .. } | Command::Sweep { common, .. } => common.threads,
    };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size thread pool: {e}");
        }
    }
    let result = match &cli.command {
        Command::Propose(c) => cmd_propose(c),
        Command::Generate(c) => cmd_generate(c),
        Command::Evaluate { dir, common } => cmd_evaluate(dir, common),
        Command::Sweep { common, seeds } => cmd_sweep(common, *seeds),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
