//! Feature-set selection by Boolean integer programming, evaluation
//! statistics, off-policy PPO kernels, and a gridworld simulator for the
//! navigation, exploration and local-planning tasks.

pub mod bip;
pub mod cover;
pub mod env;
pub mod rational;
pub mod rl;
pub mod stats;
pub mod transfer;

pub use bip::{solve_bip, BipSolution, BipStatus, BooleanProgram};
