//! Greedy evaluation across traffic densities and seed aggregation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, EnvConfig, EnvError, FrogStatus, GridEnv, Observation, Outcome};
use crate::mappo::MappoModel;
use crate::nn::{NnError, PolicyWeights};
use crate::seed;
use crate::tabular::QTable;
use crate::vec_env::obs_batch;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("policy controls {policy} frog(s) but the environment has {env}")]
    Arity { policy: usize, env: usize },
    #[error("reports cover different density grids: {0:?} vs {1:?}")]
    Grid(Vec<usize>, Vec<usize>),
    #[error("no reports to aggregate")]
    Empty,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown report format {0:?} (expected csv or json)")]
    Format(String),
}

/// Anything that picks one action per frog from the shared observation.
pub trait Policy {
    fn frogs(&self) -> usize;
    fn act_batch(&self, obs: &[Observation]) -> Result<Vec<[Action; 2]>, NnError>;
}

/// Decision maker for one frog.
#[derive(Debug, Clone)]
pub enum Brain {
    Table(QTable),
    /// Q-network or actor; either way the argmax of the output is taken.
    Net(PolicyWeights),
}

impl Brain {
    /// Q-values or logits for one observation.
    pub fn scores(&self, obs: &Observation) -> Result<Vec<f32>, NnError> {
        match self {
            Brain::Table(q) => Ok(q.get(&obs.canonical_key()).iter().map(|&v| v as f32).collect()),
            Brain::Net(w) => Ok(w.predict(obs_batch(std::iter::once(obs)).view())?.row(0).to_vec()),
        }
    }

    pub fn greedy(&self, obs: &[Observation]) -> Result<Vec<Action>, NnError> {
        match self {
            Brain::Table(q) => Ok(obs.iter().map(|o| q.greedy(&o.canonical_key())).collect()),
            Brain::Net(w) => {
                let out = w.predict(obs_batch(obs.iter()).view())?;
                Ok(out
                    .rows()
                    .into_iter()
                    .map(|r| Action::argmax(r.as_slice().expect("row-major output")))
                    .collect())
            }
        }
    }
}

/// One greedy brain per frog, ties broken toward the lowest action code.
#[derive(Debug, Clone)]
pub struct GreedyPolicy {
    pub brains: Vec<Brain>,
}

impl GreedyPolicy {
    pub fn tabular(q: QTable) -> Self {
        Self { brains: vec![Brain::Table(q)] }
    }

    pub fn dqn(q: PolicyWeights) -> Self {
        Self { brains: vec![Brain::Net(q)] }
    }

    pub fn idqn(a: PolicyWeights, b: PolicyWeights) -> Self {
        Self {
            brains: vec![Brain::Net(a), Brain::Net(b)],
        }
    }

    pub fn mappo(model: &MappoModel) -> Self {
        Self::idqn(model.actor_a.clone(), model.actor_b.clone())
    }
}

impl Policy for GreedyPolicy {
    fn frogs(&self) -> usize {
        self.brains.len()
    }

    fn act_batch(&self, obs: &[Observation]) -> Result<Vec<[Action; 2]>, NnError> {
        let mut out = vec![[Action::Stay; 2]; obs.len()];
        for (i, brain) in self.brains.iter().enumerate() {
            for (slot, a) in out.iter_mut().zip(brain.greedy(obs)?) {
                slot[i] = a;
            }
        }
        Ok(out)
    }
}

/// A policy from a plain function, mostly for tests and baselines.
pub struct FnPolicy<F> {
    pub frogs: usize,
    pub f: F,
}

impl<F: Fn(&Observation) -> [Action; 2]> Policy for FnPolicy<F> {
    fn frogs(&self) -> usize {
        self.frogs
    }

    fn act_batch(&self, obs: &[Observation]) -> Result<Vec<[Action; 2]>, NnError> {
        Ok(obs.iter().map(&self.f).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub episodes: usize,
    pub densities: Vec<usize>,
    pub base_seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            episodes: 200,
            densities: (1..=6).collect(),
            base_seed: 0x5EED_E7A1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeRecord {
    pub outcome: Outcome,
    pub length: u32,
    /// Frogs that reached row 0, whatever happened to the partner.
    pub finished: [bool; 2],
}

impl EpisodeRecord {
    pub fn joint_win(&self) -> bool {
        self.outcome == Outcome::Success
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityEpisodes {
    pub cars: usize,
    pub frogs: usize,
    pub episodes: Vec<EpisodeRecord>,
}

impl DensityEpisodes {
    pub fn cell(&self) -> EvalCell {
        let n = self.episodes.len().max(1) as f64;
        let rate = |pred: &dyn Fn(&EpisodeRecord) -> bool| self.episodes.iter().filter(|e| pred(e)).count() as f64 / n;
        let (win_a, win_b) = if self.frogs == 2 {
            (Some(rate(&|e| e.finished[0])), Some(rate(&|e| e.finished[1])))
        } else {
            (None, None)
        };
        EvalCell {
            cars: self.cars,
            joint_win: rate(&|e| e.joint_win()),
            win_a,
            win_b,
            avg_steps: self.episodes.iter().map(|e| f64::from(e.length)).sum::<f64>() / n,
            std_joint_win: 0.0,
            n_seeds: 1,
        }
    }

    /// Mean length over successful episodes only, `None` if there were none.
    pub fn mean_success_length(&self) -> Option<f64> {
        let wins: Vec<f64> = self
            .episodes
            .iter()
            .filter(|e| e.joint_win())
            .map(|e| f64::from(e.length))
            .collect();
        (!wins.is_empty()).then(|| wins.iter().sum::<f64>() / wins.len() as f64)
    }
}

/// One row of a report. Rates are fractions in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub cars: usize,
    pub joint_win: f64,
    #[serde(rename = "win_A")]
    pub win_a: Option<f64>,
    #[serde(rename = "win_B")]
    pub win_b: Option<f64>,
    pub avg_steps: f64,
    pub std_joint_win: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<EvalCell>,
}

impl EvalReport {
    pub fn cars(&self) -> Vec<usize> {
        self.cells.iter().map(|c| c.cars).collect()
    }

    pub fn cell(&self, cars: usize) -> Option<&EvalCell> {
        self.cells.iter().find(|c| c.cars == cars)
    }
}

/// Runs every episode of each density in lock-step lanes. Deterministic in
/// `(policy, config, settings)`.
pub fn evaluate_episodes(
    policy: &dyn Policy,
    config: &EnvConfig,
    settings: &EvalSettings,
) -> Result<Vec<DensityEpisodes>, EvalError> {
    if policy.frogs() != config.frogs {
        return Err(EvalError::Arity {
            policy: policy.frogs(),
            env: config.frogs,
        });
    }
    let mut out = Vec::with_capacity(settings.densities.len());
    for &cars in &settings.densities {
        let cfg = config.with_cars(cars);
        let mut envs = (0..settings.episodes)
            .map(|ep| GridEnv::new(cfg.clone(), seed::eval_episode(settings.base_seed, cars, ep)))
            .collect::<Result<Vec<_>, _>>()?;
        let mut records: Vec<Option<EpisodeRecord>> = vec![None; envs.len()];
        let mut live: Vec<usize> = (0..envs.len()).collect();
        while !live.is_empty() {
            let obs: Vec<Observation> = live.iter().map(|&i| envs[i].observe()).collect();
            let actions = policy.act_batch(&obs)?;
            let mut still = Vec::with_capacity(live.len());
            for (&i, joint) in live.iter().zip(&actions) {
                let env = &mut envs[i];
                let r = env.step_joint(&joint[..cfg.frogs])?;
                if r.done() {
                    let mut finished = [false; 2];
                    for (k, f) in env.frogs().iter().enumerate() {
                        finished[k] = f.status == FrogStatus::Finished;
                    }
                    records[i] = Some(EpisodeRecord {
                        outcome: r.outcome,
                        length: env.tick(),
                        finished,
                    });
                } else {
                    still.push(i);
                }
            }
            live = still;
        }
        out.push(DensityEpisodes {
            cars,
            frogs: cfg.frogs,
            episodes: records.into_iter().map(|r| r.expect("every lane finishes")).collect(),
        });
    }
    Ok(out)
}

pub fn evaluate(policy: &dyn Policy, config: &EnvConfig, settings: &EvalSettings) -> Result<EvalReport, EvalError> {
    Ok(EvalReport {
        cells: evaluate_episodes(policy, config, settings)?.iter().map(DensityEpisodes::cell).collect(),
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1); zero for a single value.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Cell-wise mean across seeds, with the sample std of the joint win rate.
pub fn aggregate_seeds(reports: &[EvalReport]) -> Result<EvalReport, EvalError> {
    let first = reports.first().ok_or(EvalError::Empty)?;
    let grid = first.cars();
    for r in reports {
        if r.cars() != grid {
            return Err(EvalError::Grid(grid, r.cars()));
        }
    }
    let cells = (0..grid.len())
        .map(|k| {
            let col = |f: &dyn Fn(&EvalCell) -> f64| reports.iter().map(|r| f(&r.cells[k])).collect::<Vec<_>>();
            let opt = |f: &dyn Fn(&EvalCell) -> Option<f64>| {
                let vals: Option<Vec<f64>> = reports.iter().map(|r| f(&r.cells[k])).collect();
                vals.map(|v| mean(&v))
            };
            let joint = col(&|c| c.joint_win);
            EvalCell {
                cars: grid[k],
                joint_win: mean(&joint),
                win_a: opt(&|c| c.win_a),
                win_b: opt(&|c| c.win_b),
                avg_steps: mean(&col(&|c| c.avg_steps)),
                std_joint_win: sample_std(&joint),
                n_seeds: reports.len(),
            }
        })
        .collect();
    Ok(EvalReport { cells })
}

pub const CSV_HEADER: &str = "cars,joint_win,win_A,win_B,avg_steps,std_joint_win,n_seeds";

pub fn write_csv<W: std::io::Write>(report: &EvalReport, out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for c in &report.cells {
        w.serialize(c)?;
    }
    if report.cells.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<EvalReport, EvalError> {
    let mut r = csv::Reader::from_reader(input);
    let cells = r.deserialize().collect::<Result<Vec<EvalCell>, _>>()?;
    Ok(EvalReport { cells })
}

/// Writes `report` as CSV or JSON, chosen by `format`.
pub fn write_report(report: &EvalReport, path: &Path, format: &str) -> Result<(), EvalError> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    match format {
        "csv" => write_csv(report, file),
        "json" => {
            let mut file = file;
            serde_json::to_writer_pretty(&mut file, report)?;
            std::io::Write::write_all(&mut file, b"\n")?;
            Ok(())
        }
        other => Err(EvalError::Format(other.to_string())),
    }
}

pub fn read_report(path: &Path) -> Result<EvalReport, EvalError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => Ok(serde_json::from_reader(file)?),
        _ => read_csv(file),
    }
}
