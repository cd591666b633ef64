//! Lock-step bundle of environment lanes with automatic resets.

use ndarray::Array2;

use crate::env::{Action, EnvConfig, EnvError, FrogStatus, GridEnv, Observation, Outcome, StepResult, OBS_LEN};
use crate::seed;

/// End-of-episode summary reported by a lane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeEnd {
    pub outcome: Outcome,
    pub length: u32,
    /// Which frogs reached row 0 before the episode ended.
    pub finished: [bool; 2],
}

/// What happened on one lane during one vector step.
#[derive(Debug, Clone)]
pub struct LaneStep {
    /// Observation the actions were chosen from.
    pub obs: Observation,
    pub result: StepResult,
    /// Frogs that acted this tick.
    pub acted: [bool; 2],
    /// Frogs that are no longer active after this tick.
    pub stopped: [bool; 2],
    pub episode_end: Option<EpisodeEnd>,
}

pub struct VecEnv {
    lanes: Vec<GridEnv>,
    obs: Vec<Observation>,
    episodes: Vec<u64>,
    run_seed: u64,
}

impl VecEnv {
    pub fn new(config: &EnvConfig, lanes: usize, run_seed: u64) -> Result<Self, EnvError> {
        let envs = (0..lanes)
            .map(|lane| GridEnv::new(config.clone(), seed::train_episode(run_seed, lane, 0)))
            .collect::<Result<Vec<_>, _>>()?;
        let obs = envs.iter().map(|e| e.observe()).collect();
        Ok(Self {
            lanes: envs,
            obs,
            episodes: vec![0; lanes],
            run_seed,
        })
    }

    pub fn len(&self) -> usize {
        self.lanes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lanes.is_empty()
    }

    pub fn frogs(&self) -> usize {
        self.lanes.first().map_or(0, |e| e.config().frogs)
    }

    pub fn observations(&self) -> &[Observation] {
        &self.obs
    }

    pub fn lane(&self, i: usize) -> &GridEnv {
        &self.lanes[i]
    }

    /// Steps every lane with one action per frog (entries for inactive
    /// frogs are ignored) and resets lanes whose episode ended.
    pub fn step(&mut self, actions: &[[Action; 2]]) -> Result<Vec<LaneStep>, EnvError> {
        assert_eq!(actions.len(), self.lanes.len(), "one joint action per lane");
        let frogs = self.frogs();
        let mut out = Vec::with_capacity(self.lanes.len());
        for (lane, env) in self.lanes.iter_mut().enumerate() {
            let acted = frog_flags(env, |s| s == FrogStatus::Active);
            let result = env.step_joint(&actions[lane][..frogs])?;
            let stopped = frog_flags(env, |s| s != FrogStatus::Active);
            let obs = self.obs[lane];
            let episode_end = if result.done() {
                let end = EpisodeEnd {
                    outcome: result.outcome,
                    length: env.tick(),
                    finished: frog_flags(env, |s| s == FrogStatus::Finished),
                };
                self.episodes[lane] += 1;
                self.obs[lane] = env.reset(seed::train_episode(self.run_seed, lane, self.episodes[lane]));
                Some(end)
            } else {
                self.obs[lane] = result.observation;
                None
            };
            out.push(LaneStep {
                obs,
                result,
                acted,
                stopped,
                episode_end,
            });
        }
        Ok(out)
    }
}

fn frog_flags(env: &GridEnv, pred: impl Fn(FrogStatus) -> bool) -> [bool; 2] {
    let mut flags = [false; 2];
    for (i, f) in env.frogs().iter().enumerate() {
        flags[i] = pred(f.status);
    }
    flags
}

/// Stacks observations into a `(batch, 192)` network input.
pub fn obs_batch<'a>(obs: impl ExactSizeIterator<Item = &'a Observation>) -> Array2<f32> {
    let mut x = Array2::zeros((obs.len(), OBS_LEN));
    for (mut row, o) in x.rows_mut().into_iter().zip(obs) {
        o.write_f32(row.as_slice_mut().expect("standard layout"));
    }
    x
}

/// Fixed-size window of recent episode outcomes for training logs.
#[derive(Debug, Clone)]
pub struct RollingEpisodes {
    window: usize,
    items: std::collections::VecDeque<(bool, u32)>,
    pub total: u64,
}

impl RollingEpisodes {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            items: Default::default(),
            total: 0,
        }
    }

    pub fn push(&mut self, win: bool, length: u32) {
        if self.items.len() == self.window {
            self.items.pop_front();
        }
        self.items.push_back((win, length));
        self.total += 1;
    }

    pub fn win_rate(&self) -> f64 {
        if self.items.is_empty() {
            return 0.0;
        }
        self.items.iter().filter(|i| i.0).count() as f64 / self.items.len() as f64
    }

    pub fn mean_length(&self) -> f64 {
        if self.items.is_empty() {
            return 0.0;
        }
        self.items.iter().map(|i| f64::from(i.1)).sum::<f64>() / self.items.len() as f64
    }
}
