//! Stage configs, run directories and the train / eval / compare commands.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::info;

use crate::dqn::{self, DqnHyper};
use crate::env::{EnvConfig, MAX_CARS};
use crate::eval::{self, EvalReport, EvalSettings, GreedyPolicy};
use crate::mappo::{self, MappoModel, PpoHyper};
use crate::nn::{load_weights, save_weights, PolicyWeights};
use crate::tabular::{self, QTable, TabularHyper};

pub const OUT_DIR_ENV: &str = "QF_OUT_DIR";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("training failed: {0}")]
    Train(String),
    #[error("evaluation failed: {0}")]
    Eval(#[from] eval::EvalError),
}

impl ExperimentError {
    /// Process exit code: 2 usage, 3 config, 4 I/O, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Usage(_) => 2,
            ExperimentError::Config(_) => 3,
            ExperimentError::Io { .. } => 4,
            ExperimentError::Eval(eval::EvalError::Io(_)) => 4,
            ExperimentError::Eval(eval::EvalError::Arity { .. } | eval::EvalError::Grid(..)) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Tabular,
    Dqn,
    Idqn,
    Mappo,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Tabular, Algorithm::Dqn, Algorithm::Idqn, Algorithm::Mappo];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Tabular => "tabular",
            Algorithm::Dqn => "dqn",
            Algorithm::Idqn => "idqn",
            Algorithm::Mappo => "mappo",
        }
    }

    pub fn frogs(self) -> usize {
        match self {
            Algorithm::Tabular | Algorithm::Dqn => 1,
            Algorithm::Idqn | Algorithm::Mappo => 2,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| ExperimentError::Usage(format!("unknown algorithm {s:?} (tabular, dqn, idqn, mappo)")))
    }
}

/// Everything that determines the outcome of a run. The output directory
/// is deliberately not part of it, so the hash is location independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub algorithm: Algorithm,
    pub seeds: usize,
    /// Seed `i` trains with run seed `base_seed + i`.
    pub base_seed: u64,
    pub env: EnvConfig,
    #[serde(default)]
    pub tabular: TabularHyper,
    #[serde(default)]
    pub dqn: DqnHyper,
    #[serde(default)]
    pub ppo: PpoHyper,
    #[serde(default)]
    pub eval: EvalSettings,
}

impl StageConfig {
    /// The five-stage grid: tabular on 1 and 2 cars, DQN on 4 cars with
    /// mixed speeds, then the two-frog IDQN and MAPPO stages.
    pub fn defaults(stage: u8) -> Result<Self, ExperimentError> {
        let (algorithm, env) = match stage {
            1 => (Algorithm::Tabular, EnvConfig::new(1, 1, &[1])),
            2 => (Algorithm::Tabular, EnvConfig::new(1, 2, &[1])),
            3 => (Algorithm::Dqn, EnvConfig::new(1, 4, &[1, 2])),
            4 => (Algorithm::Idqn, EnvConfig::new(2, 2, &[1])),
            5 => (Algorithm::Mappo, EnvConfig::new(2, 4, &[1, 2])),
            other => return Err(ExperimentError::Usage(format!("unknown stage {other} (expected 1-5)"))),
        };
        let mut cfg = Self {
            stage,
            algorithm,
            seeds: 4,
            base_seed: 0,
            env,
            tabular: TabularHyper::default(),
            dqn: DqnHyper::default(),
            ppo: PpoHyper::default(),
            eval: EvalSettings::default(),
        };
        match stage {
            2 => cfg.tabular.episodes = 50_000,
            4 => cfg.dqn.total_steps = 200_000,
            _ => {}
        }
        Ok(cfg)
    }

    /// Parses a TOML document layered over the defaults of its `stage`.
    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        let file: toml::Table = text.parse().map_err(|e| ExperimentError::Config(format!("{e}")))?;
        let stage = file
            .get("stage")
            .and_then(toml::Value::as_integer)
            .ok_or_else(|| ExperimentError::Config("missing integer `stage`".into()))?;
        let stage = u8::try_from(stage).map_err(|_| ExperimentError::Config(format!("stage {stage} out of range")))?;
        let defaults = Self::defaults(stage).map_err(|e| ExperimentError::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(&defaults).map_err(|e| ExperimentError::Config(e.to_string()))?;
        merge(&mut merged, file);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_toml_str(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if !(1..=5).contains(&self.stage) {
            return bad(format!("stage {} (expected 1-5)", self.stage));
        }
        if !(1..=MAX_CARS).contains(&self.env.cars) {
            return bad(format!("cars = {} (expected 1-{MAX_CARS})", self.env.cars));
        }
        self.env.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        if self.env.frogs != self.algorithm.frogs() {
            return bad(format!(
                "{} drives {} frog(s), env has {}",
                self.algorithm,
                self.algorithm.frogs(),
                self.env.frogs
            ));
        }
        if self.seeds == 0 {
            return bad("seeds must be at least 1".into());
        }
        if self.eval.episodes == 0 || self.eval.densities.is_empty() {
            return bad("eval needs episodes and at least one density".into());
        }
        if let Some(c) = self.eval.densities.iter().find(|c| !(1..=MAX_CARS).contains(*c)) {
            return bad(format!("eval density {c} (expected 1-{MAX_CARS})"));
        }
        let d = &self.dqn;
        if d.n_envs == 0 || d.batch_size == 0 || d.buffer_capacity == 0 || d.train_freq == 0 || d.target_update == 0 {
            return bad("dqn sizes and intervals must be positive".into());
        }
        let p = &self.ppo;
        if p.n_envs == 0 || p.horizon == 0 || p.minibatch == 0 || p.epochs == 0 {
            return bad("ppo sizes must be positive".into());
        }
        Ok(())
    }

    /// sha256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn run_name(&self) -> String {
        format!("stage{}_{}_{}", self.stage, self.algorithm, &self.hash()[..12])
    }

    pub fn run_seed(&self, index: usize) -> u64 {
        self.base_seed.wrapping_add(index as u64)
    }

    /// Eval uses the stage's own traffic model with the car count varied.
    pub fn eval_env(&self) -> EnvConfig {
        self.env.clone()
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Flag-level overrides, applied after the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub cars: Option<usize>,
    pub seeds: Option<usize>,
    pub base_seed: Option<u64>,
    /// Episodes for tabular stages, environment steps otherwise.
    pub budget: Option<u64>,
    pub eval_episodes: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut StageConfig) -> Result<(), ExperimentError> {
        if let Some(c) = self.cars {
            cfg.env.cars = c;
        }
        if let Some(s) = self.seeds {
            cfg.seeds = s;
        }
        if let Some(b) = self.base_seed {
            cfg.base_seed = b;
        }
        if let Some(b) = self.budget {
            match cfg.algorithm {
                Algorithm::Tabular => cfg.tabular.episodes = b,
                Algorithm::Dqn | Algorithm::Idqn => cfg.dqn.total_steps = b,
                Algorithm::Mappo => cfg.ppo.total_steps = b,
            }
        }
        if let Some(e) = self.eval_episodes {
            cfg.eval.episodes = e;
        }
        cfg.validate().map_err(|e| match e {
            ExperimentError::Config(m) => ExperimentError::Usage(m),
            other => other,
        })
    }
}

/// `$QF_OUT_DIR`, or `./runs`.
pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedArtifacts {
    pub index: usize,
    pub run_seed: u64,
    /// Paths relative to the run directory.
    pub checkpoints: Vec<String>,
    pub train_log: String,
    pub eval_report: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: StageConfig,
    pub config_hash: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub seeds: Vec<SeedArtifacts>,
    pub aggregate_report: Option<String>,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self, ExperimentError> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, run_dir: &Path) -> Result<(), ExperimentError> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        fs::write(&path, text + "\n").map_err(io_err(&path))
    }
}

/// A trained policy of any algorithm.
#[derive(Debug, Clone)]
pub enum Trained {
    Tabular(QTable),
    Dqn(PolicyWeights),
    Idqn(PolicyWeights, PolicyWeights),
    Mappo(MappoModel),
}

impl Trained {
    pub fn checkpoint_files(algo: Algorithm) -> &'static [&'static str] {
        match algo {
            Algorithm::Tabular => &["qtable.txt"],
            Algorithm::Dqn => &["q.qfw"],
            Algorithm::Idqn => &["q_A.qfw", "q_B.qfw"],
            Algorithm::Mappo => &["actor_A.qfw", "actor_B.qfw", "critic.qfw", "manifest.json"],
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), ExperimentError> {
        let nn = |e: crate::nn::NnError| ExperimentError::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        };
        match self {
            Trained::Tabular(q) => {
                let path = dir.join("qtable.txt");
                let f = fs::File::create(&path).map_err(io_err(&path))?;
                q.write_text(std::io::BufWriter::new(f)).map_err(io_err(&path))
            }
            Trained::Dqn(w) => save_weights(w, dir.join("q.qfw")).map_err(nn),
            Trained::Idqn(a, b) => {
                save_weights(a, dir.join("q_A.qfw")).map_err(nn)?;
                save_weights(b, dir.join("q_B.qfw")).map_err(nn)
            }
            Trained::Mappo(m) => m.save(dir).map_err(|e| ExperimentError::Io {
                path: dir.to_path_buf(),
                source: std::io::Error::other(e.to_string()),
            }),
        }
    }

    pub fn load(algo: Algorithm, dir: &Path) -> Result<Self, ExperimentError> {
        let corrupt = |e: String| ExperimentError::Config(format!("checkpoint in {}: {e}", dir.display()));
        let net = |name: &str| load_weights(dir.join(name)).map_err(|e| corrupt(e.to_string()));
        Ok(match algo {
            Algorithm::Tabular => {
                let path = dir.join("qtable.txt");
                let f = fs::File::open(&path).map_err(io_err(&path))?;
                Trained::Tabular(QTable::read_text(std::io::BufReader::new(f)).map_err(|e| corrupt(e.to_string()))?)
            }
            Algorithm::Dqn => Trained::Dqn(net("q.qfw")?),
            Algorithm::Idqn => Trained::Idqn(net("q_A.qfw")?, net("q_B.qfw")?),
            Algorithm::Mappo => Trained::Mappo(MappoModel::load(dir).map_err(|e| corrupt(e.to_string()))?),
        })
    }

    pub fn policy(&self) -> GreedyPolicy {
        match self {
            Trained::Tabular(q) => GreedyPolicy::tabular(q.clone()),
            Trained::Dqn(w) => GreedyPolicy::dqn(w.clone()),
            Trained::Idqn(a, b) => GreedyPolicy::idqn(a.clone(), b.clone()),
            Trained::Mappo(m) => GreedyPolicy::mappo(m),
        }
    }
}

fn write_log<T: Serialize>(rows: &[T], path: &Path) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| ExperimentError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    for r in rows {
        w.serialize(r).map_err(|e| ExperimentError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
    }
    w.flush().map_err(io_err(path))
}

/// Trains one seed and writes its checkpoints and log into `dir`.
pub fn train_seed(cfg: &StageConfig, run_seed: u64, dir: &Path) -> Result<Trained, ExperimentError> {
    let train = |e: String| ExperimentError::Train(e);
    let log_path = dir.join("train_log.csv");
    let trained = match cfg.algorithm {
        Algorithm::Tabular => {
            let (q, log) = tabular::train_tabular(&cfg.env, &cfg.tabular, run_seed).map_err(|e| train(e.to_string()))?;
            write_log(&log, &log_path)?;
            Trained::Tabular(q)
        }
        Algorithm::Dqn => {
            let (agent, log) = dqn::train_dqn(&cfg.env, &cfg.dqn, run_seed).map_err(|e| train(e.to_string()))?;
            write_log(&log, &log_path)?;
            Trained::Dqn(agent.online)
        }
        Algorithm::Idqn => {
            let ([a, b], log) = dqn::train_idqn(&cfg.env, &cfg.dqn, run_seed).map_err(|e| train(e.to_string()))?;
            write_log(&log, &log_path)?;
            Trained::Idqn(a.online, b.online)
        }
        Algorithm::Mappo => {
            let (model, log) = mappo::train_mappo(&cfg.env, &cfg.ppo, run_seed).map_err(|e| train(e.to_string()))?;
            write_log(&log, &log_path)?;
            Trained::Mappo(model)
        }
    };
    trained.save(dir)?;
    Ok(trained)
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Trains every seed of `cfg` into `out_dir/<run name>` and returns that
/// directory. An existing run with the same config hash is refused unless
/// `force` is set.
pub fn cmd_train(cfg: &StageConfig, out_dir: &Path, force: bool) -> Result<PathBuf, ExperimentError> {
    cfg.validate()?;
    let run_dir = out_dir.join(cfg.run_name());
    if run_dir.join(MANIFEST_FILE).exists() && !force {
        let prior = RunManifest::load(&run_dir)?;
        if prior.config_hash == cfg.hash() {
            return Err(ExperimentError::Usage(format!(
                "{} already holds a run with this config hash (use --force to retrain)",
                run_dir.display()
            )));
        }
    }
    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    let mut manifest = RunManifest {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        started_at: now(),
        finished_at: None,
        seeds: Vec::new(),
        aggregate_report: None,
    };
    manifest.save(&run_dir)?;
    for index in 0..cfg.seeds {
        let run_seed = cfg.run_seed(index);
        let rel = format!("seed{index}");
        let dir = run_dir.join(&rel);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        info!(stage = cfg.stage, algo = %cfg.algorithm, index, run_seed, "training");
        train_seed(cfg, run_seed, &dir)?;
        manifest.seeds.push(SeedArtifacts {
            index,
            run_seed,
            checkpoints: Trained::checkpoint_files(cfg.algorithm)
                .iter()
                .map(|f| format!("{rel}/{f}"))
                .collect(),
            train_log: format!("{rel}/train_log.csv"),
            eval_report: None,
        });
        manifest.save(&run_dir)?;
    }
    manifest.finished_at = Some(now());
    manifest.save(&run_dir)?;
    Ok(run_dir)
}

/// Per-seed and aggregated evaluation of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub per_seed: Vec<EvalReport>,
    pub aggregate: EvalReport,
}

/// Evaluates every seed in `run_dir`, writing
/// `eval/stage{N}_{algo}_{seed}.csv`, the aggregate CSV and JSON, and
/// recording them in the manifest.
pub fn cmd_eval(run_dir: &Path, densities: Option<Vec<usize>>) -> Result<EvalOutcome, ExperimentError> {
    let mut manifest = RunManifest::load(run_dir)?;
    let cfg = manifest.config.clone();
    let mut settings = cfg.eval.clone();
    if let Some(d) = densities {
        if d.is_empty() || d.iter().any(|c| !(1..=MAX_CARS).contains(c)) {
            return Err(ExperimentError::Usage(format!("densities must lie in 1-{MAX_CARS}, got {d:?}")));
        }
        settings.densities = d;
    }
    if manifest.seeds.is_empty() {
        return Err(ExperimentError::Config(format!("{} has no trained seeds", run_dir.display())));
    }
    let eval_dir = run_dir.join("eval");
    fs::create_dir_all(&eval_dir).map_err(io_err(&eval_dir))?;
    let mut per_seed = Vec::new();
    for seed in &mut manifest.seeds {
        let ckpt_dir = run_dir.join(format!("seed{}", seed.index));
        let trained = Trained::load(cfg.algorithm, &ckpt_dir)?;
        let report = eval::evaluate(&trained.policy(), &cfg.eval_env(), &settings)?;
        let rel = format!("eval/stage{}_{}_{}.csv", cfg.stage, cfg.algorithm, seed.run_seed);
        eval::write_report(&report, &run_dir.join(&rel), "csv")?;
        seed.eval_report = Some(rel);
        per_seed.push(report);
    }
    let aggregate = eval::aggregate_seeds(&per_seed)?;
    let rel = format!("eval/stage{}_{}_aggregate.csv", cfg.stage, cfg.algorithm);
    eval::write_report(&aggregate, &run_dir.join(&rel), "csv")?;
    eval::write_report(&aggregate, &run_dir.join(rel.replace(".csv", ".json")), "json")?;
    manifest.aggregate_report = Some(rel);
    manifest.save(run_dir)?;
    Ok(EvalOutcome { per_seed, aggregate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub cars: usize,
    pub joint_win_a: f64,
    pub joint_win_b: f64,
    /// `(a − b)` in percentage points.
    pub delta_pp: f64,
}

pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> Result<Vec<DeltaRow>, ExperimentError> {
    if a.cars() != b.cars() {
        return Err(ExperimentError::Usage(format!(
            "density grids differ: {:?} vs {:?}",
            a.cars(),
            b.cars()
        )));
    }
    Ok(a.cells
        .iter()
        .zip(&b.cells)
        .map(|(x, y)| DeltaRow {
            cars: x.cars,
            joint_win_a: x.joint_win,
            joint_win_b: y.joint_win,
            delta_pp: 100.0 * (x.joint_win - y.joint_win),
        })
        .collect())
}

fn aggregate_of(run_dir: &Path) -> Result<EvalReport, ExperimentError> {
    let manifest = RunManifest::load(run_dir)?;
    let rel = manifest
        .aggregate_report
        .ok_or_else(|| ExperimentError::Usage(format!("{} has not been evaluated yet", run_dir.display())))?;
    Ok(eval::read_report(&run_dir.join(rel))?)
}

/// Per-density joint-win deltas `a − b` between two evaluated runs.
pub fn cmd_compare(run_a: &Path, run_b: &Path) -> Result<Vec<DeltaRow>, ExperimentError> {
    compare_reports(&aggregate_of(run_a)?, &aggregate_of(run_b)?)
}

pub fn format_deltas(rows: &[DeltaRow]) -> String {
    let mut out = String::from("cars  joint_a  joint_b  delta_pp\n");
    for r in rows {
        out.push_str(&format!(
            "{:>4}  {:>7.3}  {:>7.3}  {:>+8.1}\n",
            r.cars, r.joint_win_a, r.joint_win_b, r.delta_pp
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_grid_defaults() {
        let s1 = StageConfig::defaults(1).unwrap();
        assert_eq!((s1.algorithm, s1.env.frogs, s1.env.cars, s1.env.speeds.clone()), (Algorithm::Tabular, 1, 1, vec![1]));
        assert_eq!(s1.tabular.episodes, 20_000);
        let s2 = StageConfig::defaults(2).unwrap();
        assert_eq!((s2.env.cars, s2.tabular.episodes), (2, 50_000));
        let s3 = StageConfig::defaults(3).unwrap();
        assert_eq!((s3.algorithm, s3.env.frogs, s3.env.cars, s3.env.speeds.clone()), (Algorithm::Dqn, 1, 4, vec![1, 2]));
        assert_eq!(s3.dqn.total_steps, 150_000);
        let s4 = StageConfig::defaults(4).unwrap();
        assert_eq!((s4.algorithm, s4.env.frogs, s4.env.cars, s4.dqn.total_steps), (Algorithm::Idqn, 2, 2, 200_000));
        let s5 = StageConfig::defaults(5).unwrap();
        assert_eq!((s5.algorithm, s5.env.cars, s5.ppo.total_steps), (Algorithm::Mappo, 4, 300_000));
        assert_eq!(s5.seeds, 4);
        assert!(matches!(StageConfig::defaults(6), Err(ExperimentError::Usage(_))));
    }

    #[test]
    fn toml_round_trip_and_layering() {
        for stage in 1..=5 {
            let cfg = StageConfig::defaults(stage).unwrap();
            assert_eq!(StageConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        }
        let cfg = StageConfig::from_toml_str("stage = 3\nseeds = 2\n[env]\ncars = 5\n[dqn]\nlr = 0.0005\n").unwrap();
        assert_eq!(cfg.seeds, 2);
        assert_eq!(cfg.env.cars, 5);
        assert_eq!(cfg.env.speeds, vec![1, 2]);
        assert_eq!(cfg.dqn.lr, 5e-4);
        assert_eq!(cfg.dqn.batch_size, 128);
        assert!(matches!(StageConfig::from_toml_str("seeds = 2"), Err(ExperimentError::Config(_))));
        assert!(matches!(StageConfig::from_toml_str("stage = 1\nbogus = 1"), Err(ExperimentError::Config(_))));
    }

    #[test]
    fn overrides_validate() {
        let mut cfg = StageConfig::defaults(3).unwrap();
        let err = Overrides {
            cars: Some(9),
            ..Default::default()
        }
        .apply(&mut cfg)
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let mut cfg = StageConfig::defaults(5).unwrap();
        Overrides {
            seeds: Some(2),
            budget: Some(4096),
            ..Default::default()
        }
        .apply(&mut cfg)
        .unwrap();
        assert_eq!((cfg.seeds, cfg.ppo.total_steps), (2, 4096));
    }

    #[test]
    fn hash_tracks_content() {
        let a = StageConfig::defaults(3).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.base_seed = 7;
        assert_ne!(a.hash(), b.hash());
        assert!(a.run_name().starts_with("stage3_dqn_"));
        assert_eq!(a.run_name().len(), "stage3_dqn_".len() + 12);
    }

    fn report(joint: &[f64]) -> EvalReport {
        EvalReport {
            cells: joint
                .iter()
                .enumerate()
                .map(|(i, &j)| eval::EvalCell {
                    cars: i + 1,
                    joint_win: j,
                    win_a: Some(j),
                    win_b: Some(j),
                    avg_steps: 8.0,
                    std_joint_win: 0.0,
                    n_seeds: 1,
                })
                .collect(),
        }
    }

    #[test]
    fn deltas() {
        let mappo = report(&[0.75, 0.6]);
        let idqn = report(&[0.43, 0.2]);
        let fwd = compare_reports(&mappo, &idqn).unwrap();
        assert!((fwd[0].delta_pp - 32.0).abs() < 1e-9);
        let back = compare_reports(&idqn, &mappo).unwrap();
        for (f, b) in fwd.iter().zip(&back) {
            assert_eq!(f.delta_pp, -b.delta_pp);
        }
        assert!(compare_reports(&mappo, &mappo).unwrap().iter().all(|r| r.delta_pp == 0.0));
        assert!(compare_reports(&mappo, &report(&[0.1])).is_err());
    }

    #[test]
    fn train_eval_compare_small_runs() {
        let out = tempfile::tempdir().unwrap();
        let mut cfg = StageConfig::defaults(1).unwrap();
        cfg.seeds = 2;
        cfg.tabular.episodes = 300;
        cfg.eval.episodes = 10;
        cfg.eval.densities = vec![1, 2];
        let run = cmd_train(&cfg, out.path(), false).unwrap();
        assert!(run.ends_with(cfg.run_name()));
        assert!(matches!(cmd_train(&cfg, out.path(), false), Err(ExperimentError::Usage(_))));
        let result = cmd_eval(&run, None).unwrap();
        assert_eq!(result.per_seed.len(), 2);
        assert_eq!(result.aggregate.cells[0].n_seeds, 2);
        let manifest = RunManifest::load(&run).unwrap();
        assert_eq!(manifest.config_hash, cfg.hash());
        assert!(manifest.finished_at.is_some());
        for s in &manifest.seeds {
            assert!(run.join(s.eval_report.as_ref().unwrap()).exists());
            for c in &s.checkpoints {
                assert!(run.join(c).exists(), "{c}");
            }
        }
        assert!(cmd_compare(&run, &run).unwrap().iter().all(|r| r.delta_pp == 0.0));
        let err = cmd_eval(out.path(), None).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }
}
