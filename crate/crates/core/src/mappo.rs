//! MAPPO: two decentralised actors, one centralised critic, team reward.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, EnvConfig, EnvError, Observation, OBS_LEN};
use crate::eval::{self, EvalSettings, GreedyPolicy};
use crate::nn::{
    clip_grad_norm, load_weights, save_weights, AdamConfig, AdamState, Gradients, MlpSpec, NnError, PolicyWeights, Role,
};
use crate::seed;
use crate::vec_env::{obs_batch, VecEnv};

#[derive(Debug, Error)]
pub enum MappoError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite PPO loss in update {update}")]
    NonFiniteLoss { update: u64 },
    #[error("mappo needs 2 frogs, config has {0}")]
    FrogCount(usize),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoHyper {
    pub total_steps: u64,
    pub n_envs: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub lr: f32,
    pub grad_clip: f64,
    pub hidden: Vec<usize>,
    /// Rounds between deterministic eval snapshots; 0 disables them.
    pub eval_interval: usize,
    pub eval_episodes: usize,
}

impl Default for PpoHyper {
    fn default() -> Self {
        Self {
            total_steps: 300_000,
            n_envs: 32,
            horizon: 128,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            epochs: 4,
            minibatch: 512,
            vf_coef: 0.5,
            ent_coef: 0.01,
            lr: 3e-4,
            grad_clip: 0.5,
            hidden: vec![256, 256],
            eval_interval: 10,
            eval_episodes: 50,
        }
    }
}

impl PpoHyper {
    fn spec(&self, out: usize) -> MlpSpec {
        let mut sizes = vec![OBS_LEN];
        sizes.extend(&self.hidden);
        sizes.push(out);
        MlpSpec { layer_sizes: sizes }
    }
}

/// Actor A, actor B and the critic, each with its own Adam moments.
#[derive(Debug, Clone)]
pub struct MappoModel {
    pub actor_a: PolicyWeights,
    pub actor_b: PolicyWeights,
    pub critic: PolicyWeights,
    adam: [AdamState; 3],
    pub updates: u64,
}

impl MappoModel {
    pub fn new<R: Rng>(hyper: &PpoHyper, rng: &mut R) -> Self {
        let actor_a = PolicyWeights::init(hyper.spec(Action::COUNT), Role::Actor, rng);
        let actor_b = PolicyWeights::init(hyper.spec(Action::COUNT), Role::Actor, rng);
        let critic = PolicyWeights::init(hyper.spec(1), Role::Critic, rng);
        Self::from_weights(actor_a, actor_b, critic)
    }

    pub fn from_weights(actor_a: PolicyWeights, actor_b: PolicyWeights, critic: PolicyWeights) -> Self {
        let adam = [AdamState::new(&actor_a), AdamState::new(&actor_b), AdamState::new(&critic)];
        Self {
            actor_a,
            actor_b,
            critic,
            adam,
            updates: 0,
        }
    }

    pub fn actor(&self, agent: usize) -> &PolicyWeights {
        if agent == 0 {
            &self.actor_a
        } else {
            &self.actor_b
        }
    }

    pub fn values(&self, x: ArrayView2<f32>) -> Result<Vec<f32>, NnError> {
        Ok(self.critic.predict(x)?.column(0).to_vec())
    }

    /// Writes `actor_A.qfw`, `actor_B.qfw`, `critic.qfw` and `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<(), MappoError> {
        std::fs::create_dir_all(dir).map_err(NnError::from)?;
        save_weights(&self.actor_a, dir.join("actor_A.qfw"))?;
        save_weights(&self.actor_b, dir.join("actor_B.qfw"))?;
        save_weights(&self.critic, dir.join("critic.qfw"))?;
        let manifest = CheckpointManifest {
            actor_a: "actor_A.qfw".into(),
            actor_b: "actor_B.qfw".into(),
            critic: "critic.qfw".into(),
            updates: self.updates,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| MappoError::Manifest(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), text + "\n").map_err(NnError::from)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, MappoError> {
        let text = std::fs::read_to_string(dir.join("manifest.json")).map_err(NnError::from)?;
        let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| MappoError::Manifest(e.to_string()))?;
        let mut model = Self::from_weights(
            load_weights(dir.join(&m.actor_a))?,
            load_weights(dir.join(&m.actor_b))?,
            load_weights(dir.join(&m.critic))?,
        );
        model.updates = m.updates;
        Ok(model)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    actor_a: String,
    actor_b: String,
    critic: String,
    updates: u64,
}

/// Softmax probabilities in f64.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&z| f64::from(z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_prob(logits: &[f32], action: Action) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = logits.iter().map(|&z| f64::from(z - max).exp()).sum::<f64>().ln();
    f64::from(logits[usize::from(action.code())] - max) - lse
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

fn sample_action<R: Rng>(probs: &[f64], rng: &mut R) -> Action {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Action::ALL[i];
        }
    }
    Action::ALL[probs.len() - 1]
}

/// `min(ρ·Â, clip(ρ, 1−ε, 1+ε)·Â)`.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// d surrogate / d log π. Zero where the clipped branch is the active one.
pub fn surrogate_grad(ratio: f64, adv: f64, eps: f64) -> f64 {
    let clipped = (adv > 0.0 && ratio > 1.0 + eps) || (adv < 0.0 && ratio < 1.0 - eps);
    if clipped {
        0.0
    } else {
        adv * ratio
    }
}

/// Time-major rollout: entry `t * lanes + n` is tick `t` of lane `n`.
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    pub horizon: usize,
    pub lanes: usize,
    pub obs: Vec<Observation>,
    pub actions: [Vec<Action>; 2],
    pub log_probs: [Vec<f32>; 2],
    /// Whether the frog was active; inactive frogs' actions are ignored by
    /// the environment and excluded from the actor loss.
    pub acted: [Vec<bool>; 2],
    /// Team reward `r_A + r_B`. On truncation `γ·V(s_final)` is folded in.
    pub rewards: Vec<f32>,
    pub values: Vec<f32>,
    pub dones: Vec<bool>,
    /// `V(s_T)` per lane.
    pub bootstrap: Vec<f32>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    fn with_capacity(horizon: usize, lanes: usize) -> Self {
        let n = horizon * lanes;
        Self {
            horizon,
            lanes,
            obs: Vec::with_capacity(n),
            actions: [Vec::with_capacity(n), Vec::with_capacity(n)],
            log_probs: [Vec::with_capacity(n), Vec::with_capacity(n)],
            acted: [Vec::with_capacity(n), Vec::with_capacity(n)],
            rewards: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
            dones: Vec::with_capacity(n),
            bootstrap: Vec::new(),
            advantages: Vec::new(),
            returns: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn finish(&mut self, gamma: f64, lambda: f64) {
        let (adv, ret) = compute_gae(
            &self.rewards,
            &self.values,
            &self.dones,
            &self.bootstrap,
            self.lanes,
            gamma,
            lambda,
        );
        self.advantages = adv;
        self.returns = ret;
    }
}

/// Backward GAE recursion over a time-major buffer:
/// `δ_t = r_t + γ V_{t+1} (1 − d_t) − V_t`, `Â_t = δ_t + γλ (1 − d_t) Â_{t+1}`.
/// Returns `(Â, Â + V)`.
pub fn compute_gae(
    rewards: &[f32],
    values: &[f32],
    dones: &[bool],
    bootstrap: &[f32],
    lanes: usize,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(lanes > 0 && n.is_multiple_of(lanes) && values.len() == n && dones.len() == n && bootstrap.len() == lanes);
    let horizon = n / lanes;
    let mut adv = vec![0.0f64; n];
    for lane in 0..lanes {
        let mut next_value = f64::from(bootstrap[lane]);
        let mut next_adv = 0.0;
        for t in (0..horizon).rev() {
            let i = t * lanes + lane;
            let live = if dones[i] { 0.0 } else { 1.0 };
            let delta = f64::from(rewards[i]) + gamma * next_value * live - f64::from(values[i]);
            next_adv = delta + gamma * lambda * live * next_adv;
            adv[i] = next_adv;
            next_value = f64::from(values[i]);
        }
    }
    let ret = adv.iter().zip(values).map(|(a, &v)| a + f64::from(v)).collect();
    (adv, ret)
}

/// Completed-episode summary from a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSummary {
    pub team_return: f64,
    pub length: u32,
    pub joint_win: bool,
}

/// Persistent lanes plus the sampling rng; carries partial episodes across
/// rounds.
pub struct RolloutCollector {
    envs: VecEnv,
    running: Vec<f64>,
    rng: ChaCha8Rng,
}

impl RolloutCollector {
    pub fn new(config: &EnvConfig, lanes: usize, run_seed: u64) -> Result<Self, MappoError> {
        if config.frogs != 2 {
            return Err(MappoError::FrogCount(config.frogs));
        }
        Ok(Self {
            envs: VecEnv::new(config, lanes, run_seed)?,
            running: vec![0.0; lanes],
            rng: ChaCha8Rng::seed_from_u64(seed::derive("mappo-sample", &[run_seed])),
        })
    }

    pub fn collect(
        &mut self,
        model: &MappoModel,
        hyper: &PpoHyper,
    ) -> Result<(RolloutBuffer, Vec<EpisodeSummary>), MappoError> {
        let lanes = self.envs.len();
        let mut buf = RolloutBuffer::with_capacity(hyper.horizon, lanes);
        let mut episodes = Vec::new();
        for _ in 0..hyper.horizon {
            let obs = self.envs.observations().to_vec();
            let x = obs_batch(obs.iter());
            let logits = [model.actor_a.predict(x.view())?, model.actor_b.predict(x.view())?];
            let values = model.values(x.view())?;
            let mut joint = Vec::with_capacity(lanes);
            for lane in 0..lanes {
                let mut pair = [Action::Stay; 2];
                for (agent, l) in logits.iter().enumerate() {
                    let row = l.row(lane);
                    let row = row.as_slice().expect("row-major logits");
                    let a = sample_action(&softmax(row), &mut self.rng);
                    pair[agent] = a;
                    buf.actions[agent].push(a);
                    buf.log_probs[agent].push(log_prob(row, a) as f32);
                }
                joint.push(pair);
            }
            let steps = self.envs.step(&joint)?;

            let truncated: Vec<usize> = (0..lanes)
                .filter(|&l| steps[l].result.truncated && !steps[l].result.terminated)
                .collect();
            let tail_values = if truncated.is_empty() {
                Vec::new()
            } else {
                model.values(obs_batch(truncated.iter().map(|&l| &steps[l].result.observation)).view())?
            };

            for (lane, step) in steps.iter().enumerate() {
                let team: f32 = step.result.rewards.iter().sum();
                self.running[lane] += f64::from(team);
                let mut reward = team;
                if let Some(k) = truncated.iter().position(|&l| l == lane) {
                    reward += (hyper.gamma as f32) * tail_values[k];
                }
                buf.obs.push(step.obs);
                buf.acted[0].push(step.acted[0]);
                buf.acted[1].push(step.acted[1]);
                buf.rewards.push(reward);
                buf.values.push(values[lane]);
                buf.dones.push(step.result.done());
                if let Some(end) = step.episode_end {
                    episodes.push(EpisodeSummary {
                        team_return: self.running[lane],
                        length: end.length,
                        joint_win: end.finished == [true, true],
                    });
                    self.running[lane] = 0.0;
                }
            }
        }
        buf.bootstrap = model.values(obs_batch(self.envs.observations().iter()).view())?;
        buf.finish(hyper.gamma, hyper.gae_lambda);
        Ok((buf, episodes))
    }
}

/// One PPO minibatch with advantages already normalised.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub x: Array2<f32>,
    pub actions: [Vec<Action>; 2],
    pub old_log_probs: [Vec<f32>; 2],
    pub acted: [Vec<bool>; 2],
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Minibatch {
    pub fn from_indices(buf: &RolloutBuffer, idx: &[usize]) -> Self {
        let pick = |v: &Vec<Action>| idx.iter().map(|&i| v[i]).collect();
        let pick_f = |v: &Vec<f32>| idx.iter().map(|&i| v[i]).collect();
        let pick_b = |v: &Vec<bool>| idx.iter().map(|&i| v[i]).collect();
        Self {
            x: obs_batch(idx.iter().map(|&i| &buf.obs[i])),
            actions: [pick(&buf.actions[0]), pick(&buf.actions[1])],
            old_log_probs: [pick_f(&buf.log_probs[0]), pick_f(&buf.log_probs[1])],
            acted: [pick_b(&buf.acted[0]), pick_b(&buf.acted[1])],
            advantages: normalize(&idx.iter().map(|&i| buf.advantages[i]).collect::<Vec<_>>()),
            returns: idx.iter().map(|&i| buf.returns[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }
}

/// `(a − mean) / (std + 1e-8)` with the population standard deviation.
pub fn normalize(adv: &[f64]) -> Vec<f64> {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    adv.iter().map(|a| (a - mean) / (std + 1e-8)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PpoStats {
    pub loss: f64,
    pub policy_loss: [f64; 2],
    pub value_loss: f64,
    pub entropy: [f64; 2],
    pub clip_fraction: f64,
}

/// Combined loss
/// `L_A + L_B + c_v·MSE(V, R) − c_H·(H_A + H_B)` and its gradients for
/// actor A, actor B and the critic.
pub fn ppo_loss(model: &MappoModel, mb: &Minibatch, hyper: &PpoHyper) -> Result<(PpoStats, [Gradients; 3]), NnError> {
    let n = mb.len();
    let mut stats = PpoStats::default();
    let mut clipped = 0usize;
    let mut counted = 0usize;
    let mut actor_grads = Vec::with_capacity(2);
    for agent in 0..2 {
        let actor = model.actor(agent);
        let cache = actor.forward(mb.x.view())?;
        let logits = cache.output();
        let active = mb.acted[agent].iter().filter(|&&a| a).count().max(1) as f64;
        let mut upstream = Array2::<f32>::zeros(logits.raw_dim());
        let (mut pl, mut ent) = (0.0, 0.0);
        for i in 0..n {
            if !mb.acted[agent][i] {
                continue;
            }
            let row = logits.row(i);
            let row = row.as_slice().expect("row-major logits");
            let probs = softmax(row);
            let a = usize::from(mb.actions[agent][i].code());
            let logp = probs[a].ln();
            let ratio = (logp - f64::from(mb.old_log_probs[agent][i])).exp();
            let adv = mb.advantages[i];
            pl -= clipped_surrogate(ratio, adv, hyper.clip_eps);
            if (ratio - 1.0).abs() > hyper.clip_eps {
                clipped += 1;
            }
            counted += 1;
            let h = entropy(&probs);
            ent += h;
            // d(−surrogate)/dz = −g·(onehot − p); d(−c·H)/dz_j = c·p_j(ln p_j + H)
            let g = surrogate_grad(ratio, adv, hyper.clip_eps);
            for (j, &p) in probs.iter().enumerate() {
                let onehot = if j == a { 1.0 } else { 0.0 };
                let mut d = -g * (onehot - p);
                if p > 0.0 {
                    d += hyper.ent_coef * p * (p.ln() + h);
                }
                upstream[[i, j]] = (d / active) as f32;
            }
        }
        stats.policy_loss[agent] = pl / active;
        stats.entropy[agent] = ent / active;
        actor_grads.push(actor.backward(&cache, upstream.view())?);
    }

    let cache = model.critic.forward(mb.x.view())?;
    let v = cache.output();
    let mut upstream = Array2::<f32>::zeros(v.raw_dim());
    let mut vl = 0.0;
    for i in 0..n {
        let diff = f64::from(v[[i, 0]]) - mb.returns[i];
        vl += diff * diff;
        upstream[[i, 0]] = (hyper.vf_coef * 2.0 * diff / n as f64) as f32;
    }
    stats.value_loss = vl / n as f64;
    let critic_grads = model.critic.backward(&cache, upstream.view())?;

    stats.clip_fraction = if counted == 0 { 0.0 } else { clipped as f64 / counted as f64 };
    stats.loss = stats.policy_loss[0] + stats.policy_loss[1] + hyper.vf_coef * stats.value_loss
        - hyper.ent_coef * (stats.entropy[0] + stats.entropy[1]);
    let grad_b = actor_grads.pop().expect("two actors");
    let grad_a = actor_grads.pop().expect("two actors");
    Ok((stats, [grad_a, grad_b, critic_grads]))
}

impl MappoModel {
    /// One optimiser step on the combined loss, clipping the joint norm.
    pub fn update(&mut self, mb: &Minibatch, hyper: &PpoHyper) -> Result<PpoStats, MappoError> {
        let (stats, [mut ga, mut gb, mut gc]) = ppo_loss(self, mb, hyper)?;
        if !stats.loss.is_finite() {
            return Err(MappoError::NonFiniteLoss { update: self.updates });
        }
        clip_grad_norm(&mut [&mut ga, &mut gb, &mut gc], hyper.grad_clip);
        let cfg = AdamConfig::new(hyper.lr);
        let [sa, sb, sc] = &mut self.adam;
        sa.step(&mut self.actor_a, &ga, &cfg)?;
        sb.step(&mut self.actor_b, &gb, &cfg)?;
        sc.step(&mut self.critic, &gc, &cfg)?;
        self.updates += 1;
        Ok(stats)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappoLogRow {
    pub global_step: u64,
    pub mean_team_return: f64,
    pub clip_fraction: f64,
    #[serde(rename = "entropy_A")]
    pub entropy_a: f64,
    #[serde(rename = "entropy_B")]
    pub entropy_b: f64,
    pub value_loss: f64,
    /// Present only on rounds with an eval snapshot.
    pub eval_joint_win: Option<f64>,
}

pub fn train_mappo(
    env_config: &EnvConfig,
    hyper: &PpoHyper,
    run_seed: u64,
) -> Result<(MappoModel, Vec<MappoLogRow>), MappoError> {
    let mut collector = RolloutCollector::new(env_config, hyper.n_envs, run_seed)?;
    let mut init = ChaCha8Rng::seed_from_u64(seed::derive("mappo-init", &[run_seed]));
    let mut shuffle = ChaCha8Rng::seed_from_u64(seed::derive("mappo-shuffle", &[run_seed]));
    let mut model = MappoModel::new(hyper, &mut init);
    let mut log = Vec::new();
    let mut global = 0u64;
    let mut round = 0usize;
    let eval_settings = EvalSettings {
        episodes: hyper.eval_episodes,
        densities: vec![env_config.cars],
        base_seed: seed::derive("mappo-eval", &[run_seed]),
    };

    while global < hyper.total_steps {
        let (buf, episodes) = collector.collect(&model, hyper)?;
        global += buf.len() as u64;
        round += 1;

        let mut idx: Vec<usize> = (0..buf.len()).collect();
        let mut totals = PpoStats::default();
        let mut batches = 0usize;
        for _ in 0..hyper.epochs {
            idx.shuffle(&mut shuffle);
            for chunk in idx.chunks(hyper.minibatch) {
                let mb = Minibatch::from_indices(&buf, chunk);
                let s = model.update(&mb, hyper)?;
                totals.clip_fraction += s.clip_fraction;
                totals.entropy[0] += s.entropy[0];
                totals.entropy[1] += s.entropy[1];
                totals.value_loss += s.value_loss;
                batches += 1;
            }
        }
        let b = batches.max(1) as f64;
        let mean_team_return = if episodes.is_empty() {
            f64::NAN
        } else {
            episodes.iter().map(|e| e.team_return).sum::<f64>() / episodes.len() as f64
        };
        let eval_joint_win = if hyper.eval_interval > 0 && round.is_multiple_of(hyper.eval_interval) {
            let report = eval::evaluate(&GreedyPolicy::mappo(&model), env_config, &eval_settings)?;
            Some(report.cells[0].joint_win)
        } else {
            None
        };
        log.push(MappoLogRow {
            global_step: global,
            mean_team_return,
            clip_fraction: totals.clip_fraction / b,
            entropy_a: totals.entropy[0] / b,
            entropy_b: totals.entropy[1] / b,
            value_loss: totals.value_loss / b,
            eval_joint_win,
        });
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests;
