//! `qfrog` command implementations, kept out of `main` so tests can call them.

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use qfrog_core::env::{render, GridEnv, Outcome, MAX_CARS};
use qfrog_core::eval::{self, Policy};
use qfrog_core::experiment::{
    self, default_out_dir, ExperimentError, Overrides, RunManifest, StageConfig, Trained,
};
use qfrog_play::{AgentPolicy, Mode, PlayError, ServeError, ServeOptions, DEFAULT_PORT};
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "qfrog", version, about = "Train, evaluate and play Quantum Frog agents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every seed of a stage and write a run directory.
    Train(TrainArgs),
    /// Evaluate a run directory across traffic densities.
    Eval(EvalArgs),
    /// Per-density joint-win deltas (A minus B) between two evaluated runs.
    Compare { run_a: PathBuf, run_b: PathBuf },
    /// Serve the browser game and its HTTP API.
    Play(PlayArgs),
    /// Print a greedy replay of one episode as text frames.
    RenderEpisode(RenderArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Stage 1-5; may be omitted when the config file names it.
    #[arg(long)]
    pub stage: Option<u8>,
    /// TOML stage config layered over the stage defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub cars: Option<usize>,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub base_seed: Option<u64>,
    /// Episodes for tabular stages, environment steps otherwise.
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    /// Output root; defaults to $QF_OUT_DIR or ./runs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Retrain even if a run with the same config hash exists.
    #[arg(long)]
    pub force: bool,
    /// Evaluate right after training.
    #[arg(long)]
    pub eval: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub run_dir: PathBuf,
    /// Comma-separated car counts, default 1-6.
    #[arg(long, value_delimiter = ',')]
    pub densities: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct PlayArgs {
    /// hotseat, human-vs-agent or agent-demo.
    #[arg(long, default_value = "hotseat")]
    pub mode: Mode,
    /// Checkpoint file or directory; required for agent modes.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// Directory of built web assets served at `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub idle_minutes: u64,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    pub run_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed_index: usize,
    /// Car count; defaults to the run's training density.
    #[arg(long)]
    pub cars: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub episode_seed: u64,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Play(#[from] PlayError),
    #[error(transparent)]
    Serve(#[from] ServeError),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Experiment(e) => e.exit_code(),
            CliError::Usage(_) | CliError::Play(PlayError::PolicyRequired(_) | PlayError::NoPolicy(_)) => 2,
            CliError::Play(PlayError::Checkpoint(_)) => 3,
            CliError::Serve(ServeError::Play(PlayError::PolicyRequired(_))) => 2,
            CliError::Serve(ServeError::Bind(..) | ServeError::Io(_)) => 4,
            _ => 1,
        }
    }
}

/// Builds the stage config with precedence flags > file > defaults.
pub fn stage_config(args: &TrainArgs) -> Result<StageConfig, ExperimentError> {
    let mut cfg = match (&args.config, args.stage) {
        (Some(path), stage) => {
            let cfg = StageConfig::load(path)?;
            if let Some(s) = stage.filter(|&s| s != cfg.stage) {
                return Err(ExperimentError::Usage(format!(
                    "--stage {s} disagrees with stage {} in {}",
                    cfg.stage,
                    path.display()
                )));
            }
            cfg
        }
        (None, Some(stage)) => StageConfig::defaults(stage)?,
        (None, None) => return Err(ExperimentError::Usage("give --stage or --config".into())),
    };
    Overrides {
        cars: args.cars,
        seeds: args.seeds,
        base_seed: args.base_seed,
        budget: args.budget,
        eval_episodes: args.eval_episodes,
    }
    .apply(&mut cfg)?;
    Ok(cfg)
}

pub fn train(args: &TrainArgs) -> Result<String, CliError> {
    let cfg = stage_config(args)?;
    let out = args.out.clone().unwrap_or_else(default_out_dir);
    let run_dir = experiment::cmd_train(&cfg, &out, args.force)?;
    let mut text = format!("{}\n", run_dir.display());
    if args.eval {
        text += &eval_run(&run_dir, None)?;
    }
    Ok(text)
}

pub fn eval_run(run_dir: &Path, densities: Option<Vec<usize>>) -> Result<String, CliError> {
    let outcome = experiment::cmd_eval(run_dir, densities)?;
    let mut csv = Vec::new();
    eval::write_csv(&outcome.aggregate, &mut csv).map_err(ExperimentError::from)?;
    Ok(String::from_utf8(csv).expect("csv is utf-8"))
}

pub fn compare(a: &Path, b: &Path) -> Result<String, CliError> {
    Ok(experiment::format_deltas(&experiment::cmd_compare(a, b)?))
}

pub fn render_episode(args: &RenderArgs) -> Result<String, CliError> {
    let manifest = RunManifest::load(&args.run_dir)?;
    let cfg = manifest.config;
    if args.seed_index >= manifest.seeds.len() {
        return Err(CliError::Usage(format!(
            "seed index {} out of range; the run has {} seed(s)",
            args.seed_index,
            manifest.seeds.len()
        )));
    }
    let mut env_cfg = cfg.eval_env();
    env_cfg.cars = args.cars.unwrap_or(cfg.env.cars);
    if !(1..=MAX_CARS).contains(&env_cfg.cars) {
        return Err(CliError::Usage(format!("cars must lie in 1-{MAX_CARS}")));
    }
    let dir = args.run_dir.join(format!("seed{}", manifest.seeds[args.seed_index].index));
    let policy = Trained::load(cfg.algorithm, &dir)?.policy();
    let mut env = GridEnv::new(env_cfg, args.episode_seed).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let mut out = render(env.state());
    let mut outcome = Outcome::None;
    while !env.is_done() {
        let joint = policy
            .act_batch(&[env.observe()])
            .map_err(|e| ExperimentError::Train(e.to_string()))?[0];
        let frogs = policy.frogs();
        let step = env
            .step_joint(&joint[..frogs])
            .map_err(|e| ExperimentError::Train(e.to_string()))?;
        let names = ["A", "B"];
        let moves: Vec<String> = (0..frogs).map(|i| format!("{}:{}", names[i], joint[i])).collect();
        outcome = step.outcome;
        out += &format!("\n{} rewards {:?}\n", moves.join(" "), step.rewards);
        out += &render(env.state());
    }
    out += &format!("outcome {:?} after {} ticks\n", outcome, env.tick());
    Ok(out)
}

pub fn play_options(args: &PlayArgs) -> ServeOptions {
    ServeOptions {
        addr: SocketAddr::new(args.host, args.port),
        static_dir: args.static_dir.clone(),
        idle_timeout: Duration::from_secs(args.idle_minutes * 60),
        default_mode: args.mode,
    }
}

pub fn load_play_policy(args: &PlayArgs) -> Result<Option<AgentPolicy>, CliError> {
    match &args.ckpt {
        Some(path) => Ok(Some(AgentPolicy::load(path)?)),
        None if args.mode.needs_policy() => Err(PlayError::PolicyRequired(args.mode.name()).into()),
        None => Ok(None),
    }
}

pub async fn play(args: &PlayArgs) -> Result<(), CliError> {
    let policy = load_play_policy(args)?;
    let options = play_options(args);
    eprintln!("serving on http://{} (mode {})", options.addr, args.mode.name());
    qfrog_play::serve(policy, options).await?;
    Ok(())
}
