//! Session state machine: the tick barrier, agent moves and episode log.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use qfrog_core::env::{Action, EnvConfig, FrogStatus, GridEnv, Outcome};
use qfrog_core::eval::Brain;
use qfrog_core::mappo::MappoModel;
use qfrog_core::nn::load_weights;
use qfrog_core::tabular::QTable;
use thiserror::Error;
use tokio::sync::broadcast;
use uuid::Uuid;

use crate::message::{Controller, FrogView, Hint, Mode, StateMessage, SubmitResponse, FROG_IDS, SCHEMA_VERSION};

#[derive(Debug, Error, PartialEq)]
pub enum PlayError {
    #[error("no session {0}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("mode {0} needs a loaded policy (start the server with --ckpt)")]
    PolicyRequired(&'static str),
    #[error("no policy is loaded for frog {0}")]
    NoPolicy(String),
    #[error("frog {0} is controlled by the agent")]
    AgentControlled(String),
    #[error("frog {0} already has an action pending for this tick")]
    AlreadySubmitted(String),
    #[error("frog {0} is not active")]
    FrogInactive(String),
    #[error("episode is over; reset the session to play again")]
    EpisodeOver,
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Internal(String),
}

impl PlayError {
    pub fn code(&self) -> &'static str {
        match self {
            PlayError::NotFound(_) => "not_found",
            PlayError::BadRequest(_) => "bad_request",
            PlayError::PolicyRequired(_) => "policy_required",
            PlayError::NoPolicy(_) => "no_policy",
            PlayError::AgentControlled(_) => "agent_controlled",
            PlayError::AlreadySubmitted(_) => "already_submitted",
            PlayError::FrogInactive(_) => "frog_inactive",
            PlayError::EpisodeOver => "episode_over",
            PlayError::Checkpoint(_) => "bad_checkpoint",
            PlayError::Internal(_) => "internal",
        }
    }
}

/// Greedy brains for frogs A and B loaded from a checkpoint.
#[derive(Debug, Clone, Default)]
pub struct AgentPolicy {
    pub brains: [Option<Brain>; 2],
}

impl AgentPolicy {
    /// Accepts a single `.qfw` network or `qtable.txt`, or a directory
    /// holding a MAPPO checkpoint, an IDQN pair, `q.qfw` or `qtable.txt`.
    /// A single network drives whichever frogs the mode hands to the agent.
    pub fn load(path: &Path) -> Result<Self, PlayError> {
        let bad = |e: String| PlayError::Checkpoint(format!("{}: {e}", path.display()));
        let net = |p: &Path| load_weights(p).map(Brain::Net).map_err(|e| bad(e.to_string()));
        let table = |p: &Path| {
            let f = std::fs::File::open(p).map_err(|e| bad(e.to_string()))?;
            QTable::read_text(std::io::BufReader::new(f))
                .map(Brain::Table)
                .map_err(|e| bad(e.to_string()))
        };
        let single = |b: Brain| Self {
            brains: [Some(b.clone()), Some(b)],
        };
        if path.is_file() {
            return if path.extension().is_some_and(|e| e == "txt") {
                Ok(single(table(path)?))
            } else {
                Ok(single(net(path)?))
            };
        }
        if !path.is_dir() {
            return Err(bad("no such file or directory".into()));
        }
        if path.join("manifest.json").exists() && path.join("actor_A.qfw").exists() {
            let m = MappoModel::load(path).map_err(|e| bad(e.to_string()))?;
            return Ok(Self {
                brains: [Some(Brain::Net(m.actor_a)), Some(Brain::Net(m.actor_b))],
            });
        }
        if path.join("q_A.qfw").exists() {
            return Ok(Self {
                brains: [Some(net(&path.join("q_A.qfw"))?), Some(net(&path.join("q_B.qfw"))?)],
            });
        }
        if path.join("q.qfw").exists() {
            return Ok(single(net(&path.join("q.qfw"))?));
        }
        if path.join("qtable.txt").exists() {
            return Ok(single(table(&path.join("qtable.txt"))?));
        }
        Err(bad("no recognised checkpoint files".into()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub seed: u64,
    pub actions: Vec<Vec<Action>>,
    pub outcome: Outcome,
    pub returns: Vec<f32>,
}

pub fn frog_index(id: &str) -> Option<usize> {
    FROG_IDS.iter().position(|f| f.eq_ignore_ascii_case(id))
}

pub struct Session {
    pub id: String,
    pub mode: Mode,
    env: GridEnv,
    policy: Option<Arc<AgentPolicy>>,
    pending: [Option<Action>; 2],
    last_reward: [f32; 2],
    cumulative: [f32; 2],
    episode: u32,
    seed: u64,
    current: Vec<Vec<Action>>,
    pub history: Vec<EpisodeLog>,
    pub last_touched: Instant,
    pub events: broadcast::Sender<StateMessage>,
}

impl Session {
    pub fn new(
        mode: Mode,
        config: EnvConfig,
        seed: u64,
        policy: Option<Arc<AgentPolicy>>,
    ) -> Result<Self, PlayError> {
        config.validate().map_err(|e| PlayError::BadRequest(e.to_string()))?;
        if mode.needs_policy() && policy.is_none() {
            return Err(PlayError::PolicyRequired(mode.name()));
        }
        if let Some(p) = &policy {
            for frog in (0..config.frogs).filter(|&f| mode.agent_controls(f)) {
                if p.brains[frog].is_none() {
                    return Err(PlayError::NoPolicy(FROG_IDS[frog].into()));
                }
            }
        }
        let env = GridEnv::new(config, seed).map_err(|e| PlayError::BadRequest(e.to_string()))?;
        Ok(Self {
            id: Uuid::new_v4().to_string(),
            mode,
            env,
            policy,
            pending: [None; 2],
            last_reward: [0.0; 2],
            cumulative: [0.0; 2],
            episode: 0,
            seed,
            current: Vec::new(),
            history: Vec::new(),
            last_touched: Instant::now(),
            events: broadcast::channel(64).0,
        })
    }

    pub fn tick(&self) -> u32 {
        self.env.tick()
    }

    pub fn config(&self) -> &EnvConfig {
        self.env.config()
    }

    fn frogs(&self) -> usize {
        self.env.config().frogs
    }

    fn controller(&self, frog: usize) -> Controller {
        if self.mode.agent_controls(frog) {
            Controller::Agent
        } else {
            Controller::Human
        }
    }

    pub fn state(&self) -> StateMessage {
        let st = self.env.state();
        StateMessage {
            schema_version: SCHEMA_VERSION,
            session_id: self.id.clone(),
            mode: self.mode,
            episode: self.episode,
            seed: self.seed,
            tick: st.tick,
            max_steps: self.env.config().max_steps,
            cells: StateMessage::cells_from(st),
            frogs: st
                .frogs
                .iter()
                .enumerate()
                .map(|(i, f)| FrogView {
                    id: FROG_IDS[i].to_string(),
                    row: f.row,
                    col: f.col,
                    status: f.status,
                    controller: self.controller(i),
                    last_reward: self.last_reward[i],
                    cumulative_reward: self.cumulative[i],
                    pending: self.pending[i].is_some(),
                })
                .collect(),
            outcome: self.outcome(),
            done: self.env.is_done(),
        }
    }

    fn outcome(&self) -> Outcome {
        if !self.env.is_done() {
            return Outcome::None;
        }
        let frogs = self.env.frogs();
        if frogs.iter().all(|f| f.status == FrogStatus::Finished) {
            Outcome::Success
        } else if frogs.iter().any(|f| f.status == FrogStatus::Dead) {
            Outcome::Collision
        } else {
            Outcome::Timeout
        }
    }

    /// Human frogs that are active and have not submitted yet.
    fn waiting_for(&self) -> Vec<usize> {
        (0..self.frogs())
            .filter(|&i| {
                !self.mode.agent_controls(i)
                    && self.env.frogs()[i].status == FrogStatus::Active
                    && self.pending[i].is_none()
            })
            .collect()
    }

    fn agent_action(&self, frog: usize) -> Result<Action, PlayError> {
        let brain = self
            .policy
            .as_ref()
            .and_then(|p| p.brains[frog].as_ref())
            .ok_or_else(|| PlayError::NoPolicy(FROG_IDS[frog].into()))?;
        let obs = self.env.observe();
        Ok(brain
            .greedy(std::slice::from_ref(&obs))
            .map_err(|e| PlayError::Internal(e.to_string()))?[0])
    }

    pub fn hint(&self, frog: usize) -> Result<Hint, PlayError> {
        if frog >= self.frogs() {
            return Err(PlayError::BadRequest(format!("no frog {frog}")));
        }
        let brain = self
            .policy
            .as_ref()
            .and_then(|p| p.brains[frog].as_ref())
            .ok_or_else(|| PlayError::NoPolicy(FROG_IDS[frog].into()))?;
        let scores = brain
            .scores(&self.env.observe())
            .map_err(|e| PlayError::Internal(e.to_string()))?;
        Ok(Hint {
            schema_version: SCHEMA_VERSION,
            frog: FROG_IDS[frog].into(),
            action: Action::argmax(&scores),
            scores,
        })
    }

    /// Stores a human action. When the last required action arrives the
    /// agent moves are computed from the same frozen state and exactly one
    /// tick is resolved.
    pub fn submit(&mut self, frog: usize, action: Action) -> Result<SubmitResponse, PlayError> {
        if self.env.is_done() {
            return Err(PlayError::EpisodeOver);
        }
        if frog >= self.frogs() {
            return Err(PlayError::BadRequest(format!("no frog {frog} in a {}-frog game", self.frogs())));
        }
        let id = FROG_IDS[frog].to_string();
        if self.mode.agent_controls(frog) {
            return Err(PlayError::AgentControlled(id));
        }
        if self.env.frogs()[frog].status != FrogStatus::Active {
            return Err(PlayError::FrogInactive(id));
        }
        if self.pending[frog].is_some() {
            return Err(PlayError::AlreadySubmitted(id));
        }
        self.pending[frog] = Some(action);
        let resolved = if self.waiting_for().is_empty() {
            self.resolve()?;
            true
        } else {
            false
        };
        Ok(self.response(resolved))
    }

    /// Advances an all-agent session by one tick.
    pub fn advance(&mut self) -> Result<SubmitResponse, PlayError> {
        if self.env.is_done() {
            return Err(PlayError::EpisodeOver);
        }
        if !self.waiting_for().is_empty() {
            return Err(PlayError::BadRequest("human frogs still owe actions; use the action endpoint".into()));
        }
        self.resolve()?;
        Ok(self.response(true))
    }

    fn response(&self, resolved: bool) -> SubmitResponse {
        SubmitResponse {
            schema_version: SCHEMA_VERSION,
            resolved,
            waiting_for: self.waiting_for().into_iter().map(|i| FROG_IDS[i].to_string()).collect(),
            state: self.state(),
        }
    }

    fn resolve(&mut self) -> Result<(), PlayError> {
        let mut joint = vec![Action::Stay; self.frogs()];
        for (i, slot) in joint.iter_mut().enumerate() {
            if self.env.frogs()[i].status != FrogStatus::Active {
                continue;
            }
            *slot = if self.mode.agent_controls(i) {
                self.agent_action(i)?
            } else {
                self.pending[i].expect("barrier complete")
            };
        }
        let result = self
            .env
            .step_joint(&joint)
            .map_err(|e| PlayError::Internal(e.to_string()))?;
        for (i, r) in result.rewards.iter().enumerate() {
            self.last_reward[i] = *r;
            self.cumulative[i] += r;
        }
        self.current.push(joint);
        self.pending = [None; 2];
        // no subscribers is fine
        let _ = self.events.send(self.state());
        Ok(())
    }

    /// New episode in the same session; the finished one is archived.
    pub fn reset(&mut self, seed: u64) -> StateMessage {
        self.history.push(EpisodeLog {
            seed: self.seed,
            actions: std::mem::take(&mut self.current),
            outcome: self.outcome(),
            returns: self.cumulative[..self.frogs()].to_vec(),
        });
        self.env.reset(seed);
        self.seed = seed;
        self.episode += 1;
        self.pending = [None; 2];
        self.last_reward = [0.0; 2];
        self.cumulative = [0.0; 2];
        let state = self.state();
        let _ = self.events.send(state.clone());
        state
    }
}

/// All live sessions, each behind its own lock so ticks are atomic per
/// session and sessions never contend with each other.
pub struct SessionStore {
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    pub idle_timeout: Duration,
}

impl SessionStore {
    pub fn new(idle_timeout: Duration) -> Self {
        Self {
            sessions: Mutex::new(HashMap::new()),
            idle_timeout,
        }
    }

    pub fn insert(&self, session: Session) -> Arc<Mutex<Session>> {
        let id = session.id.clone();
        let s = Arc::new(Mutex::new(session));
        self.sessions.lock().expect("store lock").insert(id, s.clone());
        s
    }

    pub fn get(&self, id: &str) -> Result<Arc<Mutex<Session>>, PlayError> {
        let s = self
            .sessions
            .lock()
            .expect("store lock")
            .get(id)
            .cloned()
            .ok_or_else(|| PlayError::NotFound(id.to_string()))?;
        s.lock().expect("session lock").last_touched = Instant::now();
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops sessions idle for longer than the timeout; returns how many.
    pub fn expire(&self, now: Instant) -> usize {
        let mut map = self.sessions.lock().expect("store lock");
        let before = map.len();
        map.retain(|_, s| {
            let s = s.lock().expect("session lock");
            now.saturating_duration_since(s.last_touched) <= self.idle_timeout
        });
        before - map.len()
    }
}
