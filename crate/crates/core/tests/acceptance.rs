//! End-to-end acceptance checks. Each test prints exactly one line,
//! `PASS <criterion>: ...` or `FAIL <criterion>: ...`, and fails on FAIL.
//!
//! Training runs are shared between tests, so the whole target costs one
//! Stage 1, two Stage 3, two Stage 4 and two Stage 5 trainings.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

use ndarray::Array2;
use qfrog_core::env::{
    Action, EnvConfig, Frog, FrogStatus, GridEnv, GridState, Outcome, REWARD_COLLISION, REWARD_GOAL,
    REWARD_PROGRESS, REWARD_STEP,
};
use qfrog_core::env::{Observation, StateKey};
use qfrog_core::eval::{self, EvalCell, EvalReport, EvalSettings, FnPolicy};
use qfrog_core::experiment::{cmd_eval, cmd_train, EvalOutcome, RunManifest, StageConfig, Trained};
use qfrog_core::mappo::{clipped_surrogate, compute_gae};
use qfrog_core::nn::{MlpSpec, PolicyWeights, Role};
use qfrog_core::tabular::QTable;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes straight to stderr so the line shows up even when libtest
/// captures output of passing tests.
fn verdict(criterion: &str, pass: bool, detail: &str) {
    let line = format!("{} {criterion}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut err = std::io::stderr().lock();
    err.write_all(line.as_bytes()).unwrap();
    err.flush().unwrap();
    assert!(pass, "{criterion}: {detail}");
}

fn root() -> &'static Path {
    static ROOT: OnceLock<tempfile::TempDir> = OnceLock::new();
    ROOT.get_or_init(|| tempfile::tempdir().unwrap()).path()
}

struct StageRun {
    dir: PathBuf,
    cfg: StageConfig,
    eval: EvalOutcome,
}

/// Trains and evaluates a stage at its default settings, once per process.
fn stage(n: u8) -> &'static StageRun {
    static RUNS: [OnceLock<StageRun>; 6] = [const { OnceLock::new() }; 6];
    RUNS[usize::from(n)].get_or_init(|| {
        let mut cfg = StageConfig::defaults(n).unwrap();
        cfg.seeds = if n == 1 { 1 } else { 2 };
        let dir = cmd_train(&cfg, &root().join("stages"), false).unwrap();
        let eval = cmd_eval(&dir, None).unwrap();
        record_cells(&eval);
        StageRun { dir, cfg, eval }
    })
}

/// Every evaluation cell produced by this process, for the dominance check.
fn cells() -> &'static Mutex<Vec<(String, EvalCell)>> {
    static CELLS: OnceLock<Mutex<Vec<(String, EvalCell)>>> = OnceLock::new();
    CELLS.get_or_init(|| Mutex::new(Vec::new()))
}

fn record(tag: &str, report: &EvalReport) {
    let mut all = cells().lock().unwrap();
    all.extend(report.cells.iter().map(|c| (tag.to_string(), c.clone())));
}

fn record_cells(outcome: &EvalOutcome) {
    for (i, r) in outcome.per_seed.iter().enumerate() {
        record(&format!("seed{i}"), r);
    }
    record("aggregate", &outcome.aggregate);
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

// ---------------------------------------------------------------- env

fn rollout(cfg: &EnvConfig, seed: u64, actions: &[Action]) -> Vec<(GridState, Vec<f32>, bool)> {
    let mut env = GridEnv::new(cfg.clone(), seed).unwrap();
    let mut out = Vec::new();
    for (t, &a) in actions.iter().cycle().enumerate() {
        if env.is_done() || t >= 400 {
            break;
        }
        let joint = vec![a; cfg.frogs];
        let r = env.step_joint(&joint).unwrap();
        let done = r.done();
        out.push((env.state().clone(), r.rewards, done));
    }
    out
}

#[test]
fn environment_property_suite() {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let allowed = [REWARD_COLLISION, REWARD_GOAL, REWARD_PROGRESS, REWARD_STEP, 0.0];
    let mut episodes = 0;
    for frogs in 1..=2 {
        for cars in 1..=6 {
            for speeds in [&[1u8][..], &[1, 2]] {
                let cfg = EnvConfig::new(frogs, cars, speeds);
                for _ in 0..10 {
                    let seed = rng.random();
                    let script: Vec<Action> = (0..50).map(|_| Action::ALL[rng.random_range(0..5)]).collect();
                    let a = rollout(&cfg, seed, &script);
                    if a != rollout(&cfg, seed, &script) {
                        failures.push(format!("nondeterministic seed {seed}"));
                    }
                    let start = GridEnv::new(cfg.clone(), seed).unwrap();
                    let rows: Vec<u8> = start.state().cars.iter().map(|c| c.row).collect();
                    for (t, (state, rewards, _)) in a.iter().enumerate() {
                        if state.tick as usize != t + 1 {
                            failures.push(format!("tick {} after {} steps", state.tick, t + 1));
                        }
                        let now: Vec<u8> = state.cars.iter().map(|c| c.row).collect();
                        if now != rows {
                            failures.push("car count or rows changed".into());
                        }
                        if rewards.iter().any(|r| !allowed.contains(r)) {
                            failures.push(format!("reward outside range: {rewards:?}"));
                        }
                    }
                    episodes += 1;
                }
                // STAY on the car-free start row never ends early
                let stay = rollout(&cfg, 5, &[Action::Stay]);
                let (last, _, done) = stay.last().unwrap();
                if stay.len() != 200 || last.tick != 200 || !done {
                    failures.push(format!("STAY episode ended at {} ticks", stay.len()));
                }
            }
        }
    }
    // carless straight UP: 6 progress steps and the goal
    let cfg = EnvConfig::new(1, 1, &[1]);
    let empty = GridState {
        frogs: vec![Frog {
            row: 7,
            col: 3,
            status: FrogStatus::Active,
        }],
        cars: Vec::new(),
        tick: 0,
        seed: 0,
    };
    let mut env = GridEnv::from_state(cfg, empty).unwrap();
    let mut ret = 0.0;
    let mut outcome = Outcome::None;
    while !env.is_done() {
        let r = env.step(&[Action::Up]).unwrap();
        ret += r.rewards[0];
        outcome = r.outcome;
    }
    if env.tick() != 7 || ret != 106.0 || outcome != Outcome::Success {
        failures.push(format!("carless UP run: {} ticks, return {ret}, {outcome:?}", env.tick()));
    }
    verdict(
        "environment property suite",
        failures.is_empty(),
        &if failures.is_empty() {
            format!("{episodes} scripted episodes deterministic and conserved; truncation at 200; carless UP = 7 steps / +106")
        } else {
            failures[..failures.len().min(5)].join("; ")
        },
    );
}

// ------------------------------------------------------------ numerics

fn f64_forward(layers: &[(Vec<Vec<f64>>, Vec<f64>)], x: &[f64]) -> (Vec<f64>, f64) {
    let mut a = x.to_vec();
    let mut kink = f64::INFINITY;
    for (li, (w, b)) in layers.iter().enumerate() {
        let last = li + 1 == layers.len();
        a = (0..b.len())
            .map(|j| {
                let z = a.iter().enumerate().map(|(i, v)| v * w[i][j]).sum::<f64>() + b[j];
                if last {
                    z
                } else {
                    kink = kink.min(z.abs());
                    z.max(0.0)
                }
            })
            .collect();
    }
    (a, kink)
}

fn mlp_gradient_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let shapes: [&[usize]; 3] = [&[4, 5, 3], &[6, 8, 8, 2], &[3, 7, 5]];
    let mut worst = 0.0f64;
    let mut nets = 0;
    while nets < 100 {
        let sizes = shapes[nets % shapes.len()];
        let w = PolicyWeights::init(MlpSpec::new(sizes).unwrap(), Role::Critic, &mut rng);
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up: Vec<f64> = (0..*sizes.last().unwrap()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let layers: Vec<(Vec<Vec<f64>>, Vec<f64>)> = w
            .layers
            .iter()
            .map(|l| {
                (
                    l.weight.rows().into_iter().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect(),
                    l.bias.iter().map(|&v| f64::from(v)).collect(),
                )
            })
            .collect();
        let xf: Vec<f64> = x.iter().map(|&v| f64::from(v as f32)).collect();
        if f64_forward(&layers, &xf).1 < 0.05 {
            continue;
        }
        let x32 = Array2::from_shape_vec((1, x.len()), x.iter().map(|&v| v as f32).collect()).unwrap();
        let upstream = Array2::from_shape_vec((1, up.len()), up.iter().map(|&v| v as f32).collect()).unwrap();
        let upf: Vec<f64> = up.iter().map(|&v| f64::from(v as f32)).collect();
        let cache = w.forward(x32.view()).unwrap();
        let analytic = w.backward(&cache, upstream.view()).unwrap().flat();
        let objective = |ls: &[(Vec<Vec<f64>>, Vec<f64>)]| {
            f64_forward(ls, &xf).0.iter().zip(&upf).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut k = 0;
        for l in 0..layers.len() {
            let (rows, cols) = (layers[l].0.len(), layers[l].1.len());
            for p in 0..rows * cols + cols {
                let shifted = |d: f64| {
                    let mut ls = layers.clone();
                    if p < rows * cols {
                        ls[l].0[p / cols][p % cols] += d;
                    } else {
                        ls[l].1[p - rows * cols] += d;
                    }
                    objective(&ls)
                };
                let h = 1e-4;
                let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
                let a = f64::from(analytic[k]);
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
                k += 1;
            }
        }
        nets += 1;
    }
    worst
}

fn gae_double_sum_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (gamma, lambda) = (0.99, 0.95);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let t = rng.random_range(1..=16);
        let r: Vec<f32> = (0..t).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f32> = (0..t).map(|_| rng.random_range(-2.0..2.0)).collect();
        let boot: f32 = rng.random_range(-2.0..2.0);
        let (adv, _) = compute_gae(&r, &v, &vec![false; t], &[boot], 1, gamma, lambda);
        let value = |k: usize| if k < t { f64::from(v[k]) } else { f64::from(boot) };
        for s in 0..t {
            let direct: f64 = (0..t - s)
                .map(|k| {
                    let delta = f64::from(r[s + k]) + gamma * value(s + k + 1) - value(s + k);
                    (gamma * lambda).powi(k as i32) * delta
                })
                .sum();
            worst = worst.max((direct - adv[s]).abs());
        }
    }
    worst
}

fn key(b: u8) -> StateKey {
    let mut k = [0u8; 192];
    k[0] = b;
    StateKey(k)
}

#[test]
fn numerics_suite() {
    let grad = mlp_gradient_error();
    let gae = gae_double_sum_error();
    let clip_ok = clipped_surrogate(1.0, 0.7, 0.2) == 0.7
        && clipped_surrogate(1.5, 1.0, 0.2) == 1.2
        && clipped_surrogate(0.5, -1.0, 0.2) == -0.8;
    let mut t = QTable::new();
    let q1 = t.update(key(1), Action::Up, 1.0, &key(2), false, 0.1, 0.99).unwrap();
    let mut t = QTable::new();
    let q2 = t.update(key(1), Action::Up, 100.0, &key(2), true, 0.1, 0.99).unwrap();
    let mut t = QTable::new();
    t.set(key(1), [5.0, 0.0, 0.0, 0.0, 0.0]);
    t.set(key(2), [0.0, 10.0, 3.0, -2.0, 0.0]);
    let q3 = t.update(key(1), Action::Up, -1.0, &key(2), false, 0.1, 0.99).unwrap();
    let q_ok = (q1 - 0.1).abs() <= 1e-12 && (q2 - 10.0).abs() <= 1e-12 && (q3 - 5.39).abs() <= 1e-12;
    verdict(
        "numerics suite",
        grad <= 1e-4 && gae <= 1e-10 && clip_ok && q_ok,
        &format!(
            "MLP grad rel err {grad:.2e} (≤1e-4, 100 nets); GAE vs double sum {gae:.2e} (≤1e-10); \
             clip cases {}; Q-update {q1}, {q2}, {q3:.12}",
            if clip_ok { "exact" } else { "MISMATCH" }
        ),
    );
}

// -------------------------------------------------------------- stages

#[test]
fn stage1_tabular() {
    let run = stage(1);
    let trained = Trained::load(run.cfg.algorithm, &run.dir.join("seed0")).unwrap();
    let settings = EvalSettings {
        densities: vec![1],
        ..run.cfg.eval.clone()
    };
    let eps = eval::evaluate_episodes(&trained.policy(), &run.cfg.eval_env(), &settings).unwrap();
    let win = eps[0].cell().joint_win;
    let len = eps[0].mean_success_length().unwrap_or(f64::INFINITY);
    verdict(
        "Stage 1 tabular",
        win >= 0.90 && len <= 9.0,
        &format!("win {} over {} episodes (≥90%), mean successful length {len:.2} (≤9)", pct(win), eps[0].episodes.len()),
    );
}

#[test]
fn stage3_dqn() {
    let agg = &stage(3).eval.aggregate;
    let win1 = agg.cell(1).unwrap().joint_win;
    let wins: Vec<f64> = agg.cells.iter().map(|c| c.joint_win).collect();
    let worst_rise = wins.windows(2).map(|w| w[1] - w[0]).fold(0.0f64, f64::max);
    let steps: Vec<f64> = agg.cells.iter().map(|c| c.avg_steps).collect();
    let max_steps = steps.iter().cloned().fold(0.0, f64::max);
    let table: Vec<String> = agg
        .cells
        .iter()
        .map(|c| format!("{}:{}/{:.1}", c.cars, pct(c.joint_win), c.avg_steps))
        .collect();
    verdict(
        "Stage 3 DQN",
        win1 >= 0.85 && worst_rise <= 0.05 && max_steps <= 8.0,
        &format!(
            "1-car win {} (≥85%); largest inversion {:.1}pp (≤5); max avg steps {max_steps:.2} (≤8); cars:win/steps {}",
            pct(win1),
            100.0 * worst_rise,
            table.join(" ")
        ),
    );
}

#[test]
fn cooperation_gap() {
    let idqn = stage(4).eval.aggregate.cell(2).unwrap().clone();
    let mappo = stage(5).eval.aggregate.cell(2).unwrap().clone();
    let gap = mappo.joint_win - idqn.joint_win;
    verdict(
        "Stage 4 vs 5 cooperation gap",
        gap >= 0.15 && mappo.avg_steps <= 10.0 && idqn.avg_steps >= 25.0,
        &format!(
            "2 cars: MAPPO {} vs IDQN {} = {:+.1}pp (≥+15); MAPPO length {:.2} (≤10); IDQN length {:.2} (≥25)",
            pct(mappo.joint_win),
            pct(idqn.joint_win),
            100.0 * gap,
            mappo.avg_steps,
            idqn.avg_steps
        ),
    );
}

#[test]
fn mappo_symmetry() {
    let run = stage(5);
    let mut worst = (0.0f64, 0usize, 0usize);
    for (s, report) in run.eval.per_seed.iter().enumerate() {
        for c in &report.cells {
            let d = (c.win_a.unwrap() - c.win_b.unwrap()).abs();
            if d > worst.0 {
                worst = (d, s, c.cars);
            }
        }
    }
    verdict(
        "MAPPO symmetry",
        worst.0 <= 0.05,
        &format!(
            "largest |win_A - win_B| {:.1}pp (≤5) at seed {} / {} cars",
            100.0 * worst.0,
            worst.1,
            worst.2
        ),
    );
}

// --------------------------------------------------------- reproducibility

fn tiny(n: u8) -> StageConfig {
    let mut cfg = StageConfig::defaults(n).unwrap();
    cfg.seeds = 1;
    cfg.eval.episodes = 20;
    cfg.eval.densities = vec![1, 3];
    match n {
        1 | 2 => cfg.tabular.episodes = 500,
        3 | 4 => cfg.dqn.total_steps = 3_000,
        _ => cfg.ppo.total_steps = 8_192,
    }
    cfg
}

/// Every file of a run except the timestamped manifest.
fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let manifest = RunManifest::load(dir).unwrap();
    let mut files = BTreeMap::new();
    for s in &manifest.seeds {
        for rel in s.checkpoints.iter().chain([&s.train_log]).chain(&s.eval_report) {
            files.insert(rel.clone(), std::fs::read(dir.join(rel)).unwrap());
        }
    }
    let agg = manifest.aggregate_report.unwrap();
    for rel in [agg.clone(), agg.replace(".csv", ".json")] {
        files.insert(rel.clone(), std::fs::read(dir.join(&rel)).unwrap());
    }
    files
}

#[test]
fn reproducibility() {
    let mut differing = Vec::new();
    let mut compared = 0;
    for n in 1..=5u8 {
        let cfg = tiny(n);
        let a = cmd_train(&cfg, &root().join("repro_a"), false).unwrap();
        let b = cmd_train(&cfg, &root().join("repro_b"), false).unwrap();
        record_cells(&cmd_eval(&a, None).unwrap());
        cmd_eval(&b, None).unwrap();
        assert_eq!(a.file_name(), b.file_name(), "same config, same hash");
        let (fa, fb) = (artifacts(&a), artifacts(&b));
        assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
        for (k, v) in &fa {
            compared += 1;
            if fb[k] != *v {
                differing.push(format!("stage {n}: {k}"));
            }
        }
    }
    verdict(
        "Reproducibility",
        differing.is_empty(),
        &if differing.is_empty() {
            format!("{compared} checkpoint, log and report files byte-identical across reruns of stages 1-5")
        } else {
            format!("differing: {}", differing.join(", "))
        },
    );
}

// ------------------------------------------------------------ dominance

#[test]
fn joint_win_dominance() {
    // make sure every stage has contributed its cells
    for n in [1, 3, 4, 5] {
        stage(n);
    }
    // plus a scripted two-frog baseline over all densities
    let up = FnPolicy {
        frogs: 2,
        f: |_: &Observation| [Action::Up; 2],
    };
    record("always-up", &eval::evaluate(&up, &EnvConfig::new(2, 1, &[1, 2]), &EvalSettings::default()).unwrap());
    let all = cells().lock().unwrap();
    let bad: Vec<String> = all
        .iter()
        .filter(|(_, c)| {
            let floor = match (c.win_a, c.win_b) {
                (Some(a), Some(b)) => a.min(b),
                _ => 1.0,
            };
            c.joint_win > floor
        })
        .map(|(tag, c)| format!("{tag} cars {}", c.cars))
        .collect();
    verdict(
        "Joint-win dominance",
        bad.is_empty(),
        &format!("{} cells checked, {} violations {}", all.len(), bad.len(), bad.join(", ")),
    );
}
