//! Shortest safe crossing found by exhaustive search over the deterministic
//! car schedule, per traffic density. Upper bound for any learned policy.

use std::collections::VecDeque;

use qfrog_core::env::{Action, EnvConfig, FrogStatus, GridEnv, GridState};
use qfrog_core::seed;

fn shortest(env: &GridEnv, frog: usize) -> Option<u32> {
    // BFS over (tick, row, col) by simulating single-frog steps from cloned states.
    let mut single = env.state().clone();
    single.frogs = vec![single.frogs[frog]];
    let cfg = EnvConfig { frogs: 1, ..env.config().clone() };
    let start = GridEnv::from_state(cfg, single).ok()?;
    let mut seen = std::collections::HashSet::new();
    let mut q = VecDeque::new();
    q.push_back((start, 0u32));
    while let Some((e, d)) = q.pop_front() {
        for a in Action::ALL {
            let mut n = e.clone();
            let r = n.step(&[a]).ok()?;
            if r.terminated && n.frogs()[0].status == FrogStatus::Finished {
                return Some(d + 1);
            }
            if r.done() {
                continue;
            }
            let s: &GridState = n.state();
            let k = (s.tick, s.frogs[0].row, s.frogs[0].col);
            if seen.insert(k) {
                q.push_back((n, d + 1));
            }
        }
    }
    None
}

fn main() {
    for (frogs, speeds) in [(1usize, vec![1u8, 2]), (2, vec![1]), (2, vec![1, 2])] {
        println!("frogs={frogs} speeds={speeds:?}");
        for cars in 1..=6 {
            let cfg = EnvConfig::new(frogs, cars, &speeds);
            let n = 400;
            let (mut wins, mut steps) = (0, 0);
            for ep in 0..n {
                let env = GridEnv::new(cfg.clone(), seed::eval_episode(0, cars, ep)).unwrap();
                let paths: Vec<Option<u32>> = (0..frogs).map(|f| shortest(&env, f)).collect();
                if paths.iter().all(|p| p.is_some()) {
                    wins += 1;
                    steps += paths.iter().map(|p| p.unwrap()).max().unwrap();
                }
            }
            println!("  cars={cars} win={:.3} mean_len_wins={:.2}", wins as f64 / n as f64, steps as f64 / wins.max(1) as f64);
        }
    }
}
