//! PPO with experience replay on the linear-softmax policy, with a linear
//! critic fitted by squared error.

use mlselect_core::env::{
    run_episode, FloorPlan, RandomPolicy, SoftmaxAgent, TaskConfig, OBSERVATION_DIM,
};
use mlselect_core::rl::{
    normalize_advantages, policy_samples, recompute_advantages, replay_sample, surrogate_gradient,
    LinearSoftmaxPolicy, ReplayBuffer, TrainingConfig, Trajectory,
};
use mlselect_core::stats::{mann_whitney_u, Alternative};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const N_ACTIONS: usize = 3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at iteration {iteration}: {what} is not finite")]
    Diverged { iteration: usize, what: &'static str },
    #[error(transparent)]
    Env(#[from] mlselect_core::env::EnvError),
    #[error(transparent)]
    Rl(#[from] mlselect_core::rl::RlError),
    #[error(transparent)]
    Stats(#[from] mlselect_core::stats::StatsError),
}

/// Learned parameters as written to the policy file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub task: String,
    pub policy: LinearSoftmaxPolicy,
    pub critic: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub seeds: Vec<u64>,
    pub trained: Vec<f64>,
    pub random: Vec<f64>,
    pub trained_mean: f64,
    pub random_mean: f64,
    /// One-sided rank-sum p-value for "trained > random".
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub policy: PolicyFile,
    /// Mean return of the on-policy episodes collected in each iteration.
    pub iteration_rewards: Vec<f64>,
    pub evaluation: Evaluation,
}

pub const TRAIN_SCHEMA: &str = "mlselect.train";
pub const TRAIN_VERSION: u32 = 1;

/// Training summary file: the curve and the paired evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub schema: String,
    pub version: u32,
    pub task: String,
    pub iterations: usize,
    pub seed: u64,
    pub config: TrainingConfig,
    pub iteration_rewards: Vec<f64>,
    pub evaluation: Evaluation,
}

impl TrainOutcome {
    pub fn summary(&self, seed: u64, config: &TrainingConfig) -> TrainSummary {
        TrainSummary {
            schema: TRAIN_SCHEMA.to_string(),
            version: TRAIN_VERSION,
            task: self.policy.task.clone(),
            iterations: self.iteration_rewards.len(),
            seed,
            config: config.clone(),
            iteration_rewards: self.iteration_rewards.clone(),
            evaluation: self.evaluation.clone(),
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn critic_value(weights: &[f64], observation: &[f64]) -> f64 {
    weights.iter().zip(observation).map(|(w, x)| w * x).sum()
}

/// Critic values for every state plus a zero bootstrap; every episode ends
/// terminally, so the bootstrap is never read.
fn critic_values(weights: &[f64], trajectory: &Trajectory) -> Vec<f64> {
    trajectory
        .observations
        .iter()
        .map(|o| critic_value(weights, o))
        .chain(std::iter::once(0.0))
        .collect()
}

fn agent(policy: &LinearSoftmaxPolicy) -> SoftmaxAgent {
    SoftmaxAgent {
        name: "trained".into(),
        policy: policy.clone(),
    }
}

pub fn train(
    task: &TaskConfig,
    plan: &FloorPlan,
    config: &TrainingConfig,
    iterations: usize,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut policy = LinearSoftmaxPolicy::zeros(N_ACTIONS, OBSERVATION_DIM);
    let mut critic = vec![0.0; OBSERVATION_DIM];
    let mut buffer = ReplayBuffer::new(config.capacity)?;
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut iteration_rewards = Vec::with_capacity(iterations);

    for iteration in 0..iterations {
        let current = agent(&policy);
        let episode_seeds: Vec<u64> = (0..config.n_on).map(|_| seeds.random()).collect();
        let collected = episode_seeds
            .par_iter()
            .map(|&s| run_episode(task, plan, &current, s))
            .collect::<Result<Vec<_>, _>>()?;
        iteration_rewards.push(mean(&collected.iter().map(|(_, r)| r.reward).collect::<Vec<_>>()));
        for (mut trajectory, _) in collected {
            trajectory.policy_snapshot = iteration as u64;
            buffer.push(trajectory);
        }

        let batch = replay_sample(&buffer, config.n_on, config.n_off, seeds.random())?;
        for _ in 0..config.epochs {
            let values: Vec<Vec<f64>> = batch
                .trajectories
                .iter()
                .map(|t| critic_values(&critic, t))
                .collect();
            let scored = recompute_advantages(&batch.trajectories, &values, config.advantage())?;
            let mut samples = policy_samples(&scored);
            if config.normalize_advantages {
                let mut advantages: Vec<f64> = samples.iter().map(|s| s.advantage).collect();
                normalize_advantages(&mut advantages);
                for (s, a) in samples.iter_mut().zip(advantages) {
                    s.advantage = a;
                }
            }
            let grad = surrogate_gradient(&policy, &samples, config.clip())?;
            for (w, g) in policy.theta.iter_mut().zip(&grad) {
                *w += config.learning_rate * g;
            }
            if policy.theta.iter().any(|w| !w.is_finite()) {
                return Err(TrainError::Diverged {
                    iteration,
                    what: "policy weight",
                });
            }

            let mut critic_grad = vec![0.0; critic.len()];
            let mut n = 0usize;
            for at in &scored {
                for (obs, target) in at.trajectory.observations.iter().zip(&at.returns) {
                    let err = critic_value(&critic, obs) - target;
                    for (g, x) in critic_grad.iter_mut().zip(obs) {
                        *g += err * x;
                    }
                    n += 1;
                }
            }
            for (w, g) in critic.iter_mut().zip(&critic_grad) {
                *w -= config.critic_learning_rate * g / n.max(1) as f64;
            }
            if critic.iter().any(|w| !w.is_finite()) {
                return Err(TrainError::Diverged {
                    iteration,
                    what: "critic weight",
                });
            }
        }
        log::debug!("iteration {iteration}: mean reward {:.3}", iteration_rewards[iteration]);
    }

    let evaluation = evaluate(task, plan, &policy, config.eval_episodes, seed)?;
    Ok(TrainOutcome {
        policy: PolicyFile {
            task: task.task.name().to_string(),
            policy,
            critic,
        },
        iteration_rewards,
        evaluation,
    })
}

/// Runs the trained policy and the random policy on the same episode seeds.
pub fn evaluate(
    task: &TaskConfig,
    plan: &FloorPlan,
    policy: &LinearSoftmaxPolicy,
    episodes: usize,
    seed: u64,
) -> Result<Evaluation, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let seeds: Vec<u64> = (0..episodes).map(|_| rng.random()).collect();
    let trained_agent = agent(policy);
    let run = |p: &dyn mlselect_core::env::Policy| {
        seeds
            .par_iter()
            .map(|&s| run_episode(task, plan, p, s).map(|(_, r)| r.reward))
            .collect::<Result<Vec<f64>, _>>()
    };
    let trained = run(&trained_agent)?;
    let random = run(&RandomPolicy)?;
    let p_value = if episodes == 0 {
        1.0
    } else {
        mann_whitney_u(&trained, &random, Alternative::Greater)?.p_value
    };
    Ok(Evaluation {
        trained_mean: mean(&trained),
        random_mean: mean(&random),
        seeds,
        trained,
        random,
        p_value,
    })
}
