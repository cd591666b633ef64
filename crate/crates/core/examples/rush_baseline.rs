//! Win rate of the always-UP policy per traffic density.

use qfrog_core::env::{Action, EnvConfig, GridEnv, Outcome};
use qfrog_core::seed;

fn main() {
    for (frogs, speeds) in [(1usize, vec![1u8]), (1, vec![1, 2]), (2, vec![1]), (2, vec![1, 2])] {
        print!("frogs={frogs} speeds={speeds:?}:");
        for cars in 1..=6 {
            let cfg = EnvConfig::new(frogs, cars, &speeds);
            let n = 2000;
            let mut wins = 0;
            for ep in 0..n {
                let mut env = GridEnv::new(cfg.clone(), seed::eval_episode(0, cars, ep)).unwrap();
                loop {
                    let r = env.step_joint(&vec![Action::Up; frogs]).unwrap();
                    if r.done() {
                        wins += usize::from(r.outcome == Outcome::Success);
                        break;
                    }
                }
            }
            print!(" {:.3}", wins as f64 / n as f64);
        }
        println!();
    }
}
