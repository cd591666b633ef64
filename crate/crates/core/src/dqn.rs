//! DQN for the single-frog game and independent DQN for the two-frog game.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, EnvConfig, EnvError, Observation, Outcome, OBS_LEN};
use crate::nn::{AdamConfig, AdamState, Gradients, MlpSpec, NnError, PolicyWeights, Role};
use crate::seed;
use crate::vec_env::{obs_batch, LaneStep, RollingEpisodes, VecEnv};

#[derive(Debug, Error)]
pub enum DqnError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite TD loss at update {update}")]
    NonFiniteLoss { update: u64 },
    #[error("{algo} needs {expected} frog(s), config has {got}")]
    FrogCount { algo: &'static str, expected: usize, got: usize },
    #[error("buffer holds {have} transitions, need {need}")]
    NotEnoughData { have: usize, need: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnHyper {
    pub total_steps: u64,
    pub n_envs: usize,
    pub lr: f32,
    pub gamma: f32,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub target_update: u64,
    pub train_freq: u64,
    pub warmup: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_fraction: f64,
    pub grad_clip: f64,
    pub loss: TdLoss,
    pub hidden: Vec<usize>,
    pub log_interval: u64,
}

/// Per-sample regression loss on the TD error `δ = Q(s,a) − y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TdLoss {
    /// `δ²`
    Mse,
    /// `δ²/2` for `|δ| < 1`, `|δ| − 1/2` beyond: the error-clipped form.
    /// With ±100 terminal rewards the squared loss lets a few large errors
    /// swamp the one-point action gaps and training stalls.
    Huber,
}

impl TdLoss {
    /// `(loss, dloss/dδ)`.
    pub fn eval(self, diff: f32) -> (f32, f32) {
        match self {
            TdLoss::Mse => (diff * diff, 2.0 * diff),
            TdLoss::Huber if diff.abs() < 1.0 => (0.5 * diff * diff, diff),
            TdLoss::Huber => (diff.abs() - 0.5, diff.signum()),
        }
    }
}

impl Default for DqnHyper {
    fn default() -> Self {
        Self {
            total_steps: 150_000,
            n_envs: 32,
            lr: 1e-3,
            gamma: 0.99,
            batch_size: 128,
            buffer_capacity: 100_000,
            target_update: 1_000,
            train_freq: 4,
            warmup: 1_000,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_fraction: 0.3,
            grad_clip: 10.0,
            loss: TdLoss::Huber,
            hidden: vec![256, 256],
            log_interval: 5_000,
        }
    }
}

impl DqnHyper {
    pub fn spec(&self) -> MlpSpec {
        let mut sizes = vec![OBS_LEN];
        sizes.extend(&self.hidden);
        sizes.push(Action::COUNT);
        MlpSpec { layer_sizes: sizes }
    }

    pub fn schedule(&self) -> LinearEpsSchedule {
        LinearEpsSchedule {
            start: self.eps_start,
            end: self.eps_end,
            horizon: self.eps_fraction * self.total_steps as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: Action,
    pub reward: f32,
    pub next_obs: Observation,
    /// True only for genuine terminal states; truncated steps bootstrap.
    pub done: bool,
}

/// Fixed-capacity ring of transitions with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// Contents from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.cursor };
        self.items[split..].iter().chain(self.items[..split].iter())
    }

    /// Uniform draw with replacement.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        (0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
    }
}

/// `ε(t) = start + (end − start) · min(1, t / horizon)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearEpsSchedule {
    pub start: f64,
    pub end: f64,
    pub horizon: f64,
}

impl LinearEpsSchedule {
    pub fn value(&self, step: u64) -> f64 {
        let frac = if self.horizon <= 0.0 {
            1.0
        } else {
            (step as f64 / self.horizon).min(1.0)
        };
        self.start + (self.end - self.start) * frac
    }
}

/// `y = r + γ · max_a Q_target(s', a) · (1 − done)` for each transition.
pub fn td_targets(batch: &[&Transition], target: &PolicyWeights, gamma: f32) -> Result<Vec<f32>, NnError> {
    let next = target.predict(obs_batch(batch.iter().map(|t| &t.next_obs)).view())?;
    Ok(batch
        .iter()
        .zip(next.rows())
        .map(|(t, q)| {
            if t.done {
                t.reward
            } else {
                t.reward + gamma * q.iter().copied().fold(f32::NEG_INFINITY, f32::max)
            }
        })
        .collect())
}

/// Greedy actions of a Q-network (or actor logits) for a batch.
pub fn greedy_actions(weights: &PolicyWeights, obs: &[Observation]) -> Result<Vec<Action>, NnError> {
    let q = weights.predict(obs_batch(obs.iter()).view())?;
    Ok(q.rows().into_iter().map(|r| Action::argmax(r.as_slice().unwrap())).collect())
}

/// Online and target networks with their optimizer.
#[derive(Debug, Clone)]
pub struct DqnAgent {
    pub online: PolicyWeights,
    pub target: PolicyWeights,
    pub adam: AdamState,
    adam_cfg: AdamConfig,
    gamma: f32,
    batch_size: usize,
    grad_clip: f64,
    loss: TdLoss,
    pub updates: u64,
    pub syncs: u64,
}

impl DqnAgent {
    pub fn new<R: Rng>(hyper: &DqnHyper, rng: &mut R) -> Self {
        let online = PolicyWeights::init(hyper.spec(), Role::QNetwork, rng);
        Self::from_weights(online, hyper)
    }

    pub fn from_weights(online: PolicyWeights, hyper: &DqnHyper) -> Self {
        Self {
            target: online.clone(),
            adam: AdamState::new(&online),
            online,
            adam_cfg: AdamConfig::new(hyper.lr),
            gamma: hyper.gamma,
            batch_size: hyper.batch_size,
            grad_clip: hyper.grad_clip,
            loss: hyper.loss,
            updates: 0,
            syncs: 0,
        }
    }

    /// ε-greedy actions from the online network.
    pub fn act<R: Rng>(&self, obs: &[Observation], eps: f64, rng: &mut R) -> Result<Vec<Action>, NnError> {
        let greedy = greedy_actions(&self.online, obs)?;
        Ok(greedy
            .into_iter()
            .map(|g| {
                if rng.random::<f64>() < eps {
                    Action::ALL[rng.random_range(0..Action::COUNT)]
                } else {
                    g
                }
            })
            .collect())
    }

    pub fn sync_target(&mut self) {
        self.target = self.online.clone();
        self.syncs += 1;
    }

    /// One minibatch regression of `Q(s,a)` toward the frozen TD targets:
    /// mean TD loss, norm clipping, then Adam. Returns the loss.
    pub fn gradient_step<R: Rng>(&mut self, buffer: &ReplayBuffer, rng: &mut R) -> Result<f64, DqnError> {
        if buffer.len() < self.batch_size {
            return Err(DqnError::NotEnoughData {
                have: buffer.len(),
                need: self.batch_size,
            });
        }
        let batch = buffer.sample(self.batch_size, rng);
        self.train_on(&batch)
    }

    /// Gradient step on an explicit batch.
    pub fn train_on(&mut self, batch: &[&Transition]) -> Result<f64, DqnError> {
        let (loss, mut grads) = self.loss_and_grads(batch)?;
        if !loss.is_finite() {
            return Err(DqnError::NonFiniteLoss { update: self.updates });
        }
        grads.clip_norm(self.grad_clip);
        self.adam.step(&mut self.online, &grads, &self.adam_cfg)?;
        self.updates += 1;
        Ok(loss)
    }

    /// Mean TD loss of the online net and its unclipped gradient.
    pub fn loss_and_grads(&self, batch: &[&Transition]) -> Result<(f64, Gradients), DqnError> {
        let targets = td_targets(batch, &self.target, self.gamma)?;
        let cache = self.online.forward(obs_batch(batch.iter().map(|t| &t.obs)).view())?;
        let q = cache.output();
        let n = batch.len() as f32;
        let mut upstream = Array2::<f32>::zeros(q.raw_dim());
        let mut loss = 0.0f64;
        for (i, (t, y)) in batch.iter().zip(&targets).enumerate() {
            let a = usize::from(t.action.code());
            let diff = q[[i, a]] - y;
            let (l, g) = self.loss.eval(diff);
            loss += f64::from(l);
            upstream[[i, a]] = g / n;
        }
        loss /= f64::from(n);
        let grads = self.online.backward(&cache, upstream.view())?;
        Ok((loss, grads))
    }
}

/// Per-agent transitions for one IDQN lane step. Agent `i` sees only its
/// own reward, and only frogs that acted produce a transition.
pub fn idqn_transitions(step: &LaneStep, actions: [Action; 2]) -> [Option<Transition>; 2] {
    [0, 1].map(|i| {
        step.acted[i].then(|| Transition {
            obs: step.obs,
            action: actions[i],
            reward: step.result.rewards[i],
            next_obs: step.result.observation,
            done: step.result.terminated || step.stopped[i],
        })
    })
}

/// One row of the DQN/IDQN training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DqnLogRow {
    pub global_step: u64,
    pub episode_count: u64,
    pub epsilon: f64,
    pub mean_loss: f64,
    pub rolling_win_rate: f64,
    pub rolling_ep_len: f64,
}

/// Shared step accounting: ε on the global counter, one gradient step
/// per `train_freq` environment steps, target sync every `target_update`.
struct Clock {
    global: u64,
    update_credit: u64,
    next_sync: u64,
    next_log: u64,
}

impl Clock {
    fn new(hyper: &DqnHyper) -> Self {
        Self {
            global: 0,
            update_credit: 0,
            next_sync: hyper.target_update,
            next_log: hyper.log_interval,
        }
    }

    fn advance(&mut self, lanes: u64, hyper: &DqnHyper) -> (u64, bool) {
        self.global += lanes;
        self.update_credit += lanes;
        let updates = self.update_credit / hyper.train_freq;
        self.update_credit %= hyper.train_freq;
        let mut sync = false;
        while self.global >= self.next_sync {
            sync = true;
            self.next_sync += hyper.target_update;
        }
        (updates, sync)
    }

    fn should_log(&mut self, hyper: &DqnHyper) -> bool {
        if self.global >= self.next_log {
            while self.global >= self.next_log {
                self.next_log += hyper.log_interval;
            }
            true
        } else {
            false
        }
    }
}

#[derive(Default)]
struct LossMeter {
    sum: f64,
    n: u64,
}

impl LossMeter {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn take(&mut self) -> f64 {
        let m = if self.n == 0 { 0.0 } else { self.sum / self.n as f64 };
        *self = Self::default();
        m
    }
}

fn check_frogs(cfg: &EnvConfig, algo: &'static str, expected: usize) -> Result<(), DqnError> {
    if cfg.frogs != expected {
        return Err(DqnError::FrogCount {
            algo,
            expected,
            got: cfg.frogs,
        });
    }
    Ok(())
}

/// Single-frog DQN over `hyper.n_envs` lanes.
pub fn train_dqn(env_config: &EnvConfig, hyper: &DqnHyper, run_seed: u64) -> Result<(DqnAgent, Vec<DqnLogRow>), DqnError> {
    check_frogs(env_config, "dqn", 1)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed::derive("dqn-init", &[run_seed, 0]));
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive("dqn-explore", &[run_seed, 0]));
    let mut agent = DqnAgent::new(hyper, &mut init_rng);
    let mut buffer = ReplayBuffer::new(hyper.buffer_capacity);
    let mut envs = VecEnv::new(env_config, hyper.n_envs, run_seed)?;
    let schedule = hyper.schedule();
    let mut clock = Clock::new(hyper);
    let mut episodes = RollingEpisodes::new(100);
    let mut losses = LossMeter::default();
    let mut log = Vec::new();
    let warmup = hyper.warmup.max(hyper.batch_size);

    while clock.global < hyper.total_steps {
        let eps = schedule.value(clock.global);
        let actions = agent.act(envs.observations(), eps, &mut rng)?;
        let joint: Vec<[Action; 2]> = actions.iter().map(|&a| [a, Action::Stay]).collect();
        for (step, &action) in envs.step(&joint)?.iter().zip(&actions) {
            buffer.push(Transition {
                obs: step.obs,
                action,
                reward: step.result.rewards[0],
                next_obs: step.result.observation,
                done: step.result.terminated,
            });
            if let Some(end) = step.episode_end {
                episodes.push(end.outcome == Outcome::Success, end.length);
            }
        }
        let (updates, sync) = clock.advance(envs.len() as u64, hyper);
        if buffer.len() >= warmup {
            for _ in 0..updates {
                losses.add(agent.gradient_step(&buffer, &mut rng)?);
            }
        }
        if sync {
            agent.sync_target();
        }
        if clock.should_log(hyper) {
            log.push(DqnLogRow {
                global_step: clock.global,
                episode_count: episodes.total,
                epsilon: eps,
                mean_loss: losses.take(),
                rolling_win_rate: episodes.win_rate(),
                rolling_ep_len: episodes.mean_length(),
            });
        }
    }
    Ok((agent, log))
}

/// Two fully independent DQN learners sharing only the environment.
/// Agent `i` learns from its own reward; its transitions end when its own
/// frog stops (finished or dead) or the episode terminates.
pub fn train_idqn(
    env_config: &EnvConfig,
    hyper: &DqnHyper,
    run_seed: u64,
) -> Result<([DqnAgent; 2], Vec<DqnLogRow>), DqnError> {
    check_frogs(env_config, "idqn", 2)?;
    let mut agents = [0u64, 1].map(|i| {
        let mut init = ChaCha8Rng::seed_from_u64(seed::derive("dqn-init", &[run_seed, i + 1]));
        DqnAgent::new(hyper, &mut init)
    });
    let mut rngs = [0u64, 1].map(|i| ChaCha8Rng::seed_from_u64(seed::derive("dqn-explore", &[run_seed, i + 1])));
    let mut buffers = [ReplayBuffer::new(hyper.buffer_capacity), ReplayBuffer::new(hyper.buffer_capacity)];
    let mut envs = VecEnv::new(env_config, hyper.n_envs, run_seed)?;
    let schedule = hyper.schedule();
    let mut clock = Clock::new(hyper);
    let mut episodes = RollingEpisodes::new(100);
    let mut losses = LossMeter::default();
    let mut log = Vec::new();
    let warmup = hyper.warmup.max(hyper.batch_size);

    while clock.global < hyper.total_steps {
        let eps = schedule.value(clock.global);
        let a = agents[0].act(envs.observations(), eps, &mut rngs[0])?;
        let b = agents[1].act(envs.observations(), eps, &mut rngs[1])?;
        let joint: Vec<[Action; 2]> = a.iter().zip(&b).map(|(&x, &y)| [x, y]).collect();
        for (step, actions) in envs.step(&joint)?.iter().zip(&joint) {
            for (buffer, t) in buffers.iter_mut().zip(idqn_transitions(step, *actions)) {
                if let Some(t) = t {
                    buffer.push(t);
                }
            }
            if let Some(end) = step.episode_end {
                episodes.push(end.outcome == Outcome::Success, end.length);
            }
        }
        let (updates, sync) = clock.advance(envs.len() as u64, hyper);
        for i in 0..2 {
            if buffers[i].len() >= warmup {
                for _ in 0..updates {
                    losses.add(agents[i].gradient_step(&buffers[i], &mut rngs[i])?);
                }
            }
            if sync {
                agents[i].sync_target();
            }
        }
        if clock.should_log(hyper) {
            log.push(DqnLogRow {
                global_step: clock.global,
                episode_count: episodes.total,
                epsilon: eps,
                mean_loss: losses.take(),
                rolling_win_rate: episodes.win_rate(),
                rolling_ep_len: episodes.mean_length(),
            });
        }
    }
    Ok((agents, log))
}
