//! The quantized-time grid game.
//!
//! The world is frozen between calls to [`GridEnv::step`]; each call
//! resolves exactly one tick for all frogs at once. Cars only move as part
//! of a tick, so deliberation between actions is free.

mod observation;
mod render;

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use observation::{Observation, StateKey, CHANNELS, OBS_LEN};
pub use render::render;

pub const GRID: usize = 8;
pub const GOAL_ROW: u8 = 0;
pub const START_ROW: u8 = 7;
pub const MAX_CARS: usize = 6;
pub const MAX_FROGS: usize = 2;
pub const DEFAULT_MAX_STEPS: u32 = 200;

pub const REWARD_GOAL: f32 = 100.0;
pub const REWARD_COLLISION: f32 = -100.0;
pub const REWARD_PROGRESS: f32 = 1.0;
pub const REWARD_STEP: f32 = -1.0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnvError {
    #[error("frog count {0} not in 1..=2")]
    FrogCount(usize),
    #[error("car count {0} not in 1..=6")]
    CarCount(usize),
    #[error("speed set is empty")]
    EmptySpeedSet,
    #[error("speed {0} not in 1..=3")]
    Speed(u8),
    #[error("start column {0} outside the grid")]
    StartColumn(u8),
    #[error("max_steps must be positive")]
    MaxSteps,
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("episode already ended; reset before stepping")]
    EpisodeOver,
    #[error("expected {expected} action(s), got {got}")]
    ActionArity { expected: usize, got: usize },
}

impl EnvError {
    /// True for errors caused by a bad configuration rather than misuse of
    /// a live environment.
    pub fn is_config(&self) -> bool {
        !matches!(self, EnvError::EpisodeOver | EnvError::ActionArity { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
#[repr(u8)]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
    Stay = 4,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; 5] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Stay,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Action> {
        Action::ALL.get(usize::from(code)).copied()
    }

    /// Index of the largest value; ties go to the lowest action code.
    pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> Action {
        let mut best = 0;
        for (i, v) in values.iter().enumerate().take(Action::COUNT).skip(1) {
            if *v > values[best] {
                best = i;
            }
        }
        Action::ALL[best]
    }

    fn delta(self) -> (i8, i8) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
            Action::Stay => (0, 0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Up => "UP",
            Action::Down => "DOWN",
            Action::Left => "LEFT",
            Action::Right => "RIGHT",
            Action::Stay => "STAY",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Action::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown action {s:?}; expected one of UP, DOWN, LEFT, RIGHT, STAY"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Car {
    pub row: u8,
    pub col: u8,
    /// Cells per tick; positive moves toward higher columns.
    pub velocity: i8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrogStatus {
    Active,
    Finished,
    Dead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Frog {
    pub row: u8,
    pub col: u8,
    pub status: FrogStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    None,
    Success,
    Collision,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub frogs: usize,
    pub cars: usize,
    pub speeds: Vec<u8>,
    #[serde(default = "default_max_steps")]
    pub max_steps: u32,
    #[serde(default = "default_start_cols")]
    pub start_cols: [u8; 2],
}

fn default_max_steps() -> u32 {
    DEFAULT_MAX_STEPS
}

fn default_start_cols() -> [u8; 2] {
    [2, 5]
}

impl EnvConfig {
    pub fn new(frogs: usize, cars: usize, speeds: &[u8]) -> Self {
        Self {
            frogs,
            cars,
            speeds: speeds.to_vec(),
            max_steps: DEFAULT_MAX_STEPS,
            start_cols: default_start_cols(),
        }
    }

    pub fn with_cars(&self, cars: usize) -> Self {
        Self {
            cars,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !(1..=MAX_FROGS).contains(&self.frogs) {
            return Err(EnvError::FrogCount(self.frogs));
        }
        if !(1..=MAX_CARS).contains(&self.cars) {
            return Err(EnvError::CarCount(self.cars));
        }
        if self.speeds.is_empty() {
            return Err(EnvError::EmptySpeedSet);
        }
        if let Some(&s) = self.speeds.iter().find(|s| !(1..=3).contains(*s)) {
            return Err(EnvError::Speed(s));
        }
        if let Some(&c) = self.start_cols.iter().find(|c| usize::from(**c) >= GRID) {
            return Err(EnvError::StartColumn(c));
        }
        if self.max_steps == 0 {
            return Err(EnvError::MaxSteps);
        }
        Ok(())
    }
}

/// Complete state of one episode.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GridState {
    pub frogs: Vec<Frog>,
    pub cars: Vec<Car>,
    pub tick: u32,
    /// Seed the episode was generated from. Nothing random happens after
    /// reset, so this is the whole generator state.
    pub seed: u64,
}

impl GridState {
    pub fn car_at(&self, row: u8, col: u8) -> Option<&Car> {
        self.cars.iter().find(|c| c.row == row && c.col == col)
    }

    pub fn active_frogs(&self) -> impl Iterator<Item = usize> + '_ {
        self.frogs
            .iter()
            .enumerate()
            .filter(|(_, f)| f.status == FrogStatus::Active)
            .map(|(i, _)| i)
    }

    fn check(&self, config: &EnvConfig) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidState(m));
        if self.frogs.len() != config.frogs {
            return bad(format!("{} frogs for a {}-frog config", self.frogs.len(), config.frogs));
        }
        let mut rows = [false; GRID];
        for car in &self.cars {
            if !(1..=6).contains(&car.row) || usize::from(car.col) >= GRID {
                return bad(format!("car at ({}, {})", car.row, car.col));
            }
            if car.velocity == 0 {
                return bad("car with zero velocity".into());
            }
            if rows[usize::from(car.row)] {
                return bad(format!("two cars in row {}", car.row));
            }
            rows[usize::from(car.row)] = true;
        }
        for f in &self.frogs {
            if usize::from(f.row) >= GRID || usize::from(f.col) >= GRID {
                return bad(format!("frog at ({}, {})", f.row, f.col));
            }
            if (f.status == FrogStatus::Finished) != (f.row == GOAL_ROW) {
                return bad("finished status must match row 0".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    /// One entry per frog; frogs that were already finished get 0.
    pub rewards: Vec<f32>,
    pub terminated: bool,
    pub truncated: bool,
    pub outcome: Outcome,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// A single environment instance. Not shared between threads; vectorised
/// runners own one instance per lane.
#[derive(Debug, Clone)]
pub struct GridEnv {
    config: EnvConfig,
    state: GridState,
    done: bool,
}

impl GridEnv {
    /// Validates `config` and resets to the episode generated by `seed`.
    pub fn new(config: EnvConfig, seed: u64) -> Result<Self, EnvError> {
        config.validate()?;
        let state = generate(&config, seed);
        Ok(Self {
            config,
            state,
            done: false,
        })
    }

    /// Starts from a hand-built state, e.g. for scripted scenarios.
    pub fn from_state(config: EnvConfig, state: GridState) -> Result<Self, EnvError> {
        config.validate()?;
        state.check(&config)?;
        let done = state.frogs.iter().any(|f| f.status == FrogStatus::Dead)
            || state.frogs.iter().all(|f| f.status == FrogStatus::Finished);
        Ok(Self {
            config,
            state,
            done,
        })
    }

    pub fn reset(&mut self, seed: u64) -> Observation {
        self.state = generate(&self.config, seed);
        self.done = false;
        self.observe()
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &GridState {
        &self.state
    }

    pub fn frogs(&self) -> &[Frog] {
        &self.state.frogs
    }

    pub fn tick(&self) -> u32 {
        self.state.tick
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn observe(&self) -> Observation {
        Observation::encode(&self.state)
    }

    /// Advances one tick. `actions` holds one action per currently active
    /// frog, in frog order.
    pub fn step(&mut self, actions: &[Action]) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let expected = self.state.active_frogs().count();
        if actions.len() != expected {
            return Err(EnvError::ActionArity {
                expected,
                got: actions.len(),
            });
        }
        let mut per_frog = [None; MAX_FROGS];
        for (i, &a) in self.state.active_frogs().collect::<Vec<_>>().iter().zip(actions) {
            per_frog[*i] = Some(a);
        }
        Ok(self.resolve(per_frog))
    }

    /// Like [`step`](Self::step) but takes one action for every frog and
    /// ignores the entries of frogs that are no longer active.
    pub fn step_joint(&mut self, actions: &[Action]) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        if actions.len() != self.state.frogs.len() {
            return Err(EnvError::ActionArity {
                expected: self.state.frogs.len(),
                got: actions.len(),
            });
        }
        let mut per_frog = [None; MAX_FROGS];
        for i in self.state.active_frogs().collect::<Vec<_>>() {
            per_frog[i] = Some(actions[i]);
        }
        Ok(self.resolve(per_frog))
    }

    fn resolve(&mut self, actions: [Option<Action>; MAX_FROGS]) -> StepResult {
        let state = &mut self.state;
        let n = state.frogs.len();
        let mut progressed = [false; MAX_FROGS];
        let mut arrived = [false; MAX_FROGS];
        let mut moved = [false; MAX_FROGS];

        // 1. frog moves, clamped at the border
        for (i, frog) in state.frogs.iter_mut().enumerate() {
            let Some(action) = actions[i] else { continue };
            moved[i] = true;
            let (dr, dc) = action.delta();
            let row = (frog.row as i8 + dr).clamp(0, GRID as i8 - 1) as u8;
            let col = (frog.col as i8 + dc).clamp(0, GRID as i8 - 1) as u8;
            progressed[i] = row < frog.row;
            frog.row = row;
            frog.col = col;
            if row == GOAL_ROW {
                frog.status = FrogStatus::Finished;
                arrived[i] = true;
            }
        }

        // 2. frog stepped onto a car
        for frog in state.frogs.iter_mut() {
            if frog.status == FrogStatus::Active
                && state.cars.iter().any(|c| c.row == frog.row && c.col == frog.col)
            {
                frog.status = FrogStatus::Dead;
            }
        }

        // 3-4. cars advance, every swept cell counts as occupied
        for car in state.cars.iter_mut() {
            let dir = car.velocity.signum();
            let mut col = car.col as i8;
            for _ in 0..car.velocity.unsigned_abs() {
                col = (col + dir).rem_euclid(GRID as i8);
                for frog in state.frogs.iter_mut() {
                    if frog.status == FrogStatus::Active && frog.row == car.row && frog.col as i8 == col {
                        frog.status = FrogStatus::Dead;
                    }
                }
            }
            car.col = col as u8;
        }

        let mut rewards = vec![0.0; n];
        for (i, frog) in state.frogs.iter().enumerate() {
            if !moved[i] {
                continue;
            }
            rewards[i] = if frog.status == FrogStatus::Dead {
                REWARD_COLLISION
            } else if arrived[i] {
                REWARD_GOAL
            } else if progressed[i] {
                REWARD_PROGRESS
            } else {
                REWARD_STEP
            };
        }

        state.tick += 1;
        let collision = state.frogs.iter().any(|f| f.status == FrogStatus::Dead);
        let success = state.frogs.iter().all(|f| f.status == FrogStatus::Finished);
        let terminated = collision || success;
        let truncated = !terminated && state.tick >= self.config.max_steps;
        self.done = terminated || truncated;
        let outcome = if collision {
            Outcome::Collision
        } else if success {
            Outcome::Success
        } else if truncated {
            Outcome::Timeout
        } else {
            Outcome::None
        };
        StepResult {
            observation: Observation::encode(state),
            rewards,
            terminated,
            truncated,
            outcome,
        }
    }
}

fn generate(config: &EnvConfig, seed: u64) -> GridState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = index::sample(&mut rng, MAX_CARS, config.cars);
    let cars = rows
        .iter()
        .map(|r| {
            let col = rng.random_range(0..GRID as u8);
            let speed = config.speeds[rng.random_range(0..config.speeds.len())] as i8;
            let velocity = if rng.random_bool(0.5) { speed } else { -speed };
            Car {
                row: r as u8 + 1,
                col,
                velocity,
            }
        })
        .collect();
    let frogs = config.start_cols[..config.frogs]
        .iter()
        .map(|&col| Frog {
            row: START_ROW,
            col,
            status: FrogStatus::Active,
        })
        .collect();
    GridState {
        frogs,
        cars,
        tick: 0,
        seed,
    }
}
