//! Quantum Frog: a quantized-time cooperative crossing game, the learners
//! trained on it (tabular Q-learning, DQN, independent DQN, MAPPO) and the
//! evaluation harness used to compare them.

pub mod env;
pub mod nn;
pub mod tabular;
pub mod seed;
pub mod vec_env;
pub mod dqn;
pub mod mappo;
pub mod eval;
pub mod experiment;
