//! Purpose-tagged seed derivation.
//!
//! Every random stream in a run (environment lanes, exploration, weight
//! init, evaluation episodes) is derived from the run's base seed through
//! [`derive`], so that streams used for different purposes never share
//! state and evaluation episodes never coincide with training episodes.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Mixes a purpose tag and a sequence of integers into one 64-bit seed.
pub fn derive(tag: &str, parts: &[u64]) -> u64 {
    let mut h = splitmix(tag_hash(tag));
    for &p in parts {
        h = splitmix(h ^ splitmix(p));
    }
    h
}

/// Seed for one evaluation episode: `hash(base_seed, car_count, episode_index)`.
pub fn eval_episode(base_seed: u64, cars: usize, episode: usize) -> u64 {
    derive("eval-episode", &[base_seed, cars as u64, episode as u64])
}

/// Seed for one training episode on one rollout lane.
pub fn train_episode(run_seed: u64, lane: usize, episode: u64) -> u64 {
    derive("train-env", &[run_seed, lane as u64, episode])
}
