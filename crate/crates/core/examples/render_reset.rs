//! Prints the reset board for a given seed and car count.

use qfrog_core::env::{render, EnvConfig, GridEnv};

fn main() {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(42);
    let cars: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(2);
    let env = GridEnv::new(EnvConfig::new(2, cars, &[1, 2]), seed).expect("valid config");
    print!("{}", render(env.state()));
}
