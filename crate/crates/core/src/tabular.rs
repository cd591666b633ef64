//! One-step Q-learning over exact observation keys.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, EnvConfig, EnvError, GridEnv, Outcome, StateKey};
use crate::seed;

#[derive(Debug, Error)]
pub enum TabularError {
    #[error("non-finite reward {0}")]
    NonFiniteReward(f64),
    #[error("tabular learner drives exactly one frog, config has {0}")]
    FrogCount(usize),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("bad table file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TabularHyper {
    pub episodes: u64,
    pub alpha: f64,
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_min: f64,
    pub eps_decay: f64,
    /// Episodes between log rows.
    pub log_interval: u64,
}

impl Default for TabularHyper {
    fn default() -> Self {
        Self {
            episodes: 20_000,
            alpha: 0.1,
            gamma: 0.99,
            eps_start: 1.0,
            eps_min: 0.01,
            eps_decay: 0.9995,
            log_interval: 1_000,
        }
    }
}

/// `ε(episode) = max(eps_min, eps_start · decay^episode)`, evaluated at
/// the start of each episode (so episode 0 explores with `eps_start`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonDecay {
    pub start: f64,
    pub min: f64,
    pub decay: f64,
}

impl EpsilonDecay {
    pub fn value(&self, episode: u64) -> f64 {
        let e = i32::try_from(episode).unwrap_or(i32::MAX);
        (self.start * self.decay.powi(e)).max(self.min)
    }
}

impl From<&TabularHyper> for EpsilonDecay {
    fn from(h: &TabularHyper) -> Self {
        Self {
            start: h.eps_start,
            min: h.eps_min,
            decay: h.eps_decay,
        }
    }
}

/// Action values per observed state; unseen states read as zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QTable {
    values: HashMap<StateKey, [f64; Action::COUNT]>,
}

impl QTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, key: &StateKey) -> [f64; Action::COUNT] {
        self.values.get(key).copied().unwrap_or([0.0; Action::COUNT])
    }

    pub fn set(&mut self, key: StateKey, values: [f64; Action::COUNT]) {
        self.values.insert(key, values);
    }

    pub fn max_abs(&self) -> f64 {
        self.values.values().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn greedy(&self, key: &StateKey) -> Action {
        Action::argmax(&self.get(key))
    }

    /// ε-greedy: uniform with probability `eps`, otherwise greedy.
    pub fn select_action<R: Rng>(&self, key: &StateKey, eps: f64, rng: &mut R) -> Action {
        if rng.random::<f64>() < eps {
            Action::ALL[rng.random_range(0..Action::COUNT)]
        } else {
            self.greedy(key)
        }
    }

    /// `Q(s,a) += α [r + γ max_a' Q(s',a') − Q(s,a)]`, with no bootstrap
    /// when `done`. Returns the new value.
    #[allow(clippy::too_many_arguments)]
    pub fn update(
        &mut self,
        key: StateKey,
        action: Action,
        reward: f64,
        next_key: &StateKey,
        done: bool,
        alpha: f64,
        gamma: f64,
    ) -> Result<f64, TabularError> {
        if !reward.is_finite() {
            return Err(TabularError::NonFiniteReward(reward));
        }
        let bootstrap = if done {
            0.0
        } else {
            self.get(next_key).into_iter().fold(f64::NEG_INFINITY, f64::max)
        };
        let row = self.values.entry(key).or_insert([0.0; Action::COUNT]);
        let q = &mut row[usize::from(action.code())];
        *q += alpha * (reward + gamma * bootstrap - *q);
        Ok(*q)
    }

    /// Line format, sorted by key: `<hex key>\t<v0> <v1> <v2> <v3> <v4>`.
    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# qtable v1 states={}", self.values.len())?;
        let mut keys: Vec<&StateKey> = self.values.keys().collect();
        keys.sort();
        for k in keys {
            let v = &self.values[k];
            writeln!(out, "{}\t{:e} {:e} {:e} {:e} {:e}", k.to_hex(), v[0], v[1], v[2], v[3], v[4])?;
        }
        out.flush()
    }

    pub fn read_text<R: BufRead>(input: R) -> Result<Self, TabularError> {
        let mut table = QTable::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let err = |msg: &str| TabularError::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            let (k, vals) = line.split_once('\t').ok_or_else(|| err("missing tab"))?;
            let key = StateKey::from_hex(k).ok_or_else(|| err("bad key"))?;
            let parsed: Vec<f64> = vals
                .split(' ')
                .map(|v| v.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| err("bad value"))?;
            let row: [f64; Action::COUNT] = parsed.try_into().map_err(|_| err("expected 5 values"))?;
            table.values.insert(key, row);
        }
        Ok(table)
    }
}

/// Free-function form of [`QTable::update`].
#[allow(clippy::too_many_arguments)]
pub fn q_update(
    table: &mut QTable,
    key: StateKey,
    action: Action,
    reward: f64,
    next_key: &StateKey,
    done: bool,
    alpha: f64,
    gamma: f64,
) -> Result<f64, TabularError> {
    table.update(key, action, reward, next_key, done, alpha, gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularLogRow {
    pub episode: u64,
    pub epsilon: f64,
    pub rolling_win_rate: f64,
    pub rolling_ep_len: f64,
    pub states: usize,
}

/// Trains a single-frog table for `hyper.episodes` episodes.
pub fn train_tabular(
    env_config: &EnvConfig,
    hyper: &TabularHyper,
    run_seed: u64,
) -> Result<(QTable, Vec<TabularLogRow>), TabularError> {
    if env_config.frogs != 1 {
        return Err(TabularError::FrogCount(env_config.frogs));
    }
    let mut env = GridEnv::new(env_config.clone(), seed::train_episode(run_seed, 0, 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive("tabular-explore", &[run_seed]));
    let schedule = EpsilonDecay::from(hyper);
    let mut table = QTable::new();
    let mut log = Vec::new();
    let window = hyper.log_interval.max(1) as usize;
    let mut recent: Vec<(bool, u32)> = Vec::with_capacity(window);

    for episode in 0..hyper.episodes {
        let eps = schedule.value(episode);
        let mut key = env.reset(seed::train_episode(run_seed, 0, episode)).canonical_key();
        let outcome = loop {
            let action = table.select_action(&key, eps, &mut rng);
            let r = env.step(&[action])?;
            let next = r.observation.canonical_key();
            table.update(key, action, f64::from(r.rewards[0]), &next, r.terminated, hyper.alpha, hyper.gamma)?;
            key = next;
            if r.done() {
                break r.outcome;
            }
        };
        if recent.len() == window {
            recent.remove(0);
        }
        recent.push((outcome == Outcome::Success, env.tick()));
        if (episode + 1) % hyper.log_interval.max(1) == 0 || episode + 1 == hyper.episodes {
            let n = recent.len() as f64;
            log.push(TabularLogRow {
                episode: episode + 1,
                epsilon: schedule.value(episode + 1),
                rolling_win_rate: recent.iter().filter(|r| r.0).count() as f64 / n,
                rolling_ep_len: recent.iter().map(|r| f64::from(r.1)).sum::<f64>() / n,
                states: table.len(),
            });
        }
    }
    Ok((table, log))
}
