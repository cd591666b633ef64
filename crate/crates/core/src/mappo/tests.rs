use super::*;
use rand::Rng;

#[test]
fn gae_hand_example() {
    let (adv, ret) = compute_gae(&[1.0, -1.0], &[0.5, 0.2], &[false, false], &[0.0], 1, 0.99, 0.95);
    let d0 = 1.0 + 0.99 * f64::from(0.2f32) - f64::from(0.5f32);
    let d1 = -1.0 - f64::from(0.2f32);
    assert!((d0 - 0.698).abs() < 1e-7);
    assert!((adv[1] - d1).abs() < 1e-12 && (adv[1] + 1.2).abs() < 1e-7);
    assert!((adv[0] - (d0 + 0.9405 * d1)).abs() < 1e-12);
    assert!((adv[0] + 0.4306).abs() < 1e-6, "{}", adv[0]);
    assert!((ret[0] - adv[0] - 0.5).abs() < 1e-7);
}

#[test]
fn gae_lambda_zero_and_masking() {
    let r = [0.5f32, -1.0, 2.0];
    let v = [0.1f32, 0.3, -0.2];
    let (adv, _) = compute_gae(&r, &v, &[false; 3], &[0.7], 1, 0.9, 0.0);
    for t in 0..3 {
        let next = if t == 2 { f64::from(0.7f32) } else { f64::from(v[t + 1]) };
        let delta = f64::from(r[t]) + 0.9 * next - f64::from(v[t]);
        assert!((adv[t] - delta).abs() < 1e-12);
    }
    let (masked, _) = compute_gae(&r, &v, &[false, true, false], &[0.7], 1, 0.9, 0.95);
    assert!((masked[1] - (f64::from(r[1]) - f64::from(v[1]))).abs() < 1e-12);
}

/// `Â_t = Σ_l (γλ)^l δ_{t+l}` truncated at the first done.
fn gae_double_sum(r: &[f32], v: &[f32], d: &[bool], boot: f32, g: f64, lam: f64) -> Vec<f64> {
    let n = r.len();
    let value = |i: usize| if i == n { f64::from(boot) } else { f64::from(v[i]) };
    let delta: Vec<f64> = (0..n)
        .map(|i| f64::from(r[i]) + g * value(i + 1) * if d[i] { 0.0 } else { 1.0 } - f64::from(v[i]))
        .collect();
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            for l in 0..n - t {
                total += (g * lam).powi(l as i32) * delta[t + l];
                if d[t + l] {
                    break;
                }
            }
            total
        })
        .collect()
}

#[test]
fn gae_matches_double_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..200 {
        let t = rng.random_range(1..=16);
        let lanes = rng.random_range(1..=3);
        let n = t * lanes;
        let r: Vec<f32> = (0..n).map(|_| rng.random_range(-100.0..100.0)).collect();
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.2)).collect();
        let boot: Vec<f32> = (0..lanes).map(|_| rng.random_range(-50.0..50.0)).collect();
        let (g, lam) = (rng.random_range(0.5..1.0), rng.random_range(0.0..1.0));
        let (adv, ret) = compute_gae(&r, &v, &d, &boot, lanes, g, lam);
        for lane in 0..lanes {
            let pick = |xs: &[f32]| (0..t).map(|k| xs[k * lanes + lane]).collect::<Vec<_>>();
            let dl: Vec<bool> = (0..t).map(|k| d[k * lanes + lane]).collect();
            let oracle = gae_double_sum(&pick(&r), &pick(&v), &dl, boot[lane], g, lam);
            for k in 0..t {
                assert!((adv[k * lanes + lane] - oracle[k]).abs() <= 1e-10, "{} vs {}", adv[k * lanes + lane], oracle[k]);
            }
        }
        for i in 0..n {
            assert!((ret[i] - adv[i] - f64::from(v[i])).abs() <= 1e-12 * ret[i].abs().max(1.0));
        }
    }
}

#[test]
fn clip_objective_cases() {
    assert_eq!(clipped_surrogate(1.0, 0.7, 0.2), 0.7);
    assert_eq!(clipped_surrogate(1.0, -0.3, 0.2), -0.3);
    assert_eq!(surrogate_grad(1.0, 0.7, 0.2), 0.7);
    assert_eq!(-clipped_surrogate(1.5, 1.0, 0.2), -1.2);
    assert_eq!(surrogate_grad(1.5, 1.0, 0.2), 0.0);
    assert_eq!(-clipped_surrogate(0.5, -1.0, 0.2), 0.8);
    assert_eq!(surrogate_grad(0.5, -1.0, 0.2), 0.0);
    // outside the band on the unfavourable side the gradient survives
    assert_eq!(surrogate_grad(1.5, -1.0, 0.2), -1.5);
}

#[test]
fn entropy_bounds() {
    assert!((entropy(&softmax(&[0.0; 5])) - 5f64.ln()).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..500 {
        let z: Vec<f32> = (0..5).map(|_| rng.random_range(-30.0..30.0)).collect();
        let h = entropy(&softmax(&z));
        assert!((0.0..=5f64.ln() + 1e-12).contains(&h));
    }
    assert!(entropy(&softmax(&[1000.0, 0.0, 0.0, 0.0, 0.0])) < 1e-12);
}

#[test]
fn normalisation_statistics() {
    let adv: Vec<f64> = (0..37).map(|i| (i as f64 * 0.7).sin() * 5.0 + 2.0).collect();
    let z = normalize(&adv);
    let mean = z.iter().sum::<f64>() / 37.0;
    let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 37.0).sqrt();
    assert!(mean.abs() < 1e-6);
    assert!((std - 1.0).abs() < 1e-6);
}

fn small_hyper() -> PpoHyper {
    PpoHyper {
        total_steps: 2 * 4 * 16,
        n_envs: 4,
        horizon: 16,
        minibatch: 16,
        hidden: vec![12],
        eval_interval: 1,
        eval_episodes: 5,
        ..PpoHyper::default()
    }
}

fn rollout(seed: u64) -> (MappoModel, RolloutBuffer, Vec<EpisodeSummary>, PpoHyper) {
    let hyper = small_hyper();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = MappoModel::new(&hyper, &mut rng);
    let mut c = RolloutCollector::new(&EnvConfig::new(2, 3, &[1, 2]), hyper.n_envs, seed).unwrap();
    let (buf, eps) = c.collect(&model, &hyper).unwrap();
    (model, buf, eps, hyper)
}

#[test]
fn rollout_shapes_and_log_probs() {
    let (model, buf, _, hyper) = rollout(4);
    let n = hyper.horizon * hyper.n_envs;
    assert_eq!(buf.len(), n);
    for agent in 0..2 {
        assert_eq!(buf.actions[agent].len(), n);
        assert_eq!(buf.log_probs[agent].len(), n);
    }
    assert_eq!(buf.advantages.len(), n);
    let x = obs_batch(buf.obs.iter());
    for agent in 0..2 {
        let logits = model.actor(agent).predict(x.view()).unwrap();
        for i in 0..n {
            let p = softmax(logits.row(i).as_slice().unwrap());
            let stored = f64::from(buf.log_probs[agent][i]);
            assert!((stored - p[usize::from(buf.actions[agent][i].code())].ln()).abs() < 1e-6);
        }
    }
    for i in 0..n {
        assert_eq!(buf.returns[i] - buf.advantages[i], f64::from(buf.values[i]));
    }
}

#[test]
fn team_reward_is_summed() {
    use crate::env::{Frog, FrogStatus, GridEnv, GridState};
    // A climbs (+1); B sidesteps (−1): team reward 0
    let state = GridState {
        frogs: vec![
            Frog { row: 7, col: 2, status: FrogStatus::Active },
            Frog { row: 7, col: 5, status: FrogStatus::Active },
        ],
        cars: vec![Car { row: 3, col: 0, velocity: 1 }],
        tick: 0,
        seed: 0,
    };
    let mut env = GridEnv::from_state(EnvConfig::new(2, 1, &[1]), state).unwrap();
    let r = env.step_joint(&[Action::Up, Action::Left]).unwrap();
    assert_eq!(r.rewards, vec![1.0, -1.0]);
    assert_eq!(r.rewards.iter().sum::<f32>(), 0.0);
}
use crate::env::Car;

#[test]
fn first_minibatch_ratio_is_one() {
    let (model, buf, _, hyper) = rollout(9);
    let idx: Vec<usize> = (0..hyper.minibatch).collect();
    let mb = Minibatch::from_indices(&buf, &idx);
    let (stats, _) = ppo_loss(&model, &mb, &hyper).unwrap();
    assert_eq!(stats.clip_fraction, 0.0);
    for agent in 0..2 {
        let logits = model.actor(agent).predict(mb.x.view()).unwrap();
        for i in 0..mb.len() {
            let lp = log_prob(logits.row(i).as_slice().unwrap(), mb.actions[agent][i]);
            let ratio = (lp - f64::from(mb.old_log_probs[agent][i])).exp();
            assert!((ratio - 1.0).abs() < 1e-5);
            let adv = mb.advantages[i];
            assert_eq!(clipped_surrogate(ratio, adv, 0.2), ratio * adv);
        }
    }
}

/// Loss recomputed from scratch in f64 for finite differences.
fn loss_only(model: &MappoModel, mb: &Minibatch, hyper: &PpoHyper) -> f64 {
    ppo_loss(model, mb, hyper).unwrap().0.loss
}

#[test]
fn ppo_gradient_matches_finite_differences() {
    let (model, buf, _, mut hyper) = rollout(12);
    hyper.clip_eps = 1e9; // keep the objective smooth
    let idx: Vec<usize> = (0..24).collect();
    let mb = Minibatch::from_indices(&buf, &idx);
    // perturb once so ratios differ from 1 and every loss term is live
    let mut model = model;
    for w in [&mut model.actor_a, &mut model.actor_b, &mut model.critic] {
        let mut flat = w.flat();
        for (k, v) in flat.iter_mut().enumerate() {
            *v += 0.05 * ((k as f32) * 0.37).sin();
        }
        w.set_flat(&flat).unwrap();
    }
    let (_, grads) = ppo_loss(&model, &mb, &hyper).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-3f32;
    for net in 0..3 {
        let analytic = grads[net].flat();
        let base = match net {
            0 => model.actor_a.flat(),
            1 => model.actor_b.flat(),
            _ => model.critic.flat(),
        };
        let mut checked = 0;
        while checked < 12 {
            let k = rng.random_range(0..base.len());
            let eval_at = |delta: f32| {
                let mut m = model.clone();
                let mut p = base.clone();
                p[k] += delta;
                match net {
                    0 => m.actor_a.set_flat(&p).unwrap(),
                    1 => m.actor_b.set_flat(&p).unwrap(),
                    _ => m.critic.set_flat(&p).unwrap(),
                }
                loss_only(&m, &mb, &hyper)
            };
            let fd = (eval_at(h) - eval_at(-h)) / (2.0 * f64::from(h));
            let g = f64::from(analytic[k]);
            if g.abs() < 1e-4 && fd.abs() < 1e-4 {
                continue;
            }
            let rel = (fd - g).abs() / fd.abs().max(g.abs());
            assert!(rel < 2e-2, "net {net} param {k}: fd {fd} vs {g}");
            checked += 1;
        }
    }
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let cfg = EnvConfig::new(2, 2, &[1]);
    let hyper = small_hyper();
    let (a, log_a) = train_mappo(&cfg, &hyper, 5).unwrap();
    let (b, log_b) = train_mappo(&cfg, &hyper, 5).unwrap();
    assert_eq!(a.actor_a.flat(), b.actor_a.flat());
    assert_eq!(a.critic.flat(), b.critic.flat());
    assert_eq!(format!("{log_a:?}"), format!("{log_b:?}"));
    assert_eq!(log_a.len(), 2);
    assert!(log_a.iter().all(|r| r.eval_joint_win.is_some()));
    assert_ne!(a.actor_a.flat(), a.actor_b.flat());

    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let back = MappoModel::load(dir.path()).unwrap();
    assert_eq!(back.actor_b.flat(), a.actor_b.flat());
    assert_eq!(back.updates, a.updates);
    assert!(matches!(RolloutCollector::new(&EnvConfig::new(1, 1, &[1]), 2, 0), Err(MappoError::FrogCount(1))));
}
