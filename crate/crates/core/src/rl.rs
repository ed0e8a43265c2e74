//! Off-policy PPO with experience replay, as pure kernels: generalized
//! advantage estimation, importance ratios, the clipped surrogate, a FIFO
//! replay buffer, and a linear-softmax policy with an analytic gradient.

use std::collections::VecDeque;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RlError {
    #[error("inconsistent lengths: {0}")]
    Length(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("replay buffer holds {available} trajectories from the newest snapshot, {requested} requested")]
    NotEnoughOnPolicy { available: usize, requested: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// One rollout together with what the behavior policy believed while
/// collecting it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// `log π_old(a_t | s_t)` at collection time.
    pub behavior_log_probs: Vec<f64>,
    /// `V(s_0) … V(s_{T-1})` followed by one bootstrap value.
    pub value_estimates: Vec<f64>,
    pub terminal: bool,
    /// Identifier of the policy parameters that collected this rollout.
    #[serde(default)]
    pub policy_snapshot: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn validate(&self) -> Result<(), RlError> {
        let t = self.rewards.len();
        let check = |name: &str, len: usize, want: usize| {
            if len == want {
                Ok(())
            } else {
                Err(RlError::Length(format!("{name} has {len} entries, expected {want}")))
            }
        };
        check("observations", self.observations.len(), t)?;
        check("actions", self.actions.len(), t)?;
        check("behavior_log_probs", self.behavior_log_probs.len(), t)?;
        check("value_estimates", self.value_estimates.len(), t + 1)?;
        if let Some(lp) = self.behavior_log_probs.iter().find(|lp| lp.is_nan() || **lp > 0.0) {
            return Err(RlError::Length(format!("behavior log-probability {lp} is not <= 0")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageConfig {
    pub gamma: f64,
    pub lambda: f64,
}

impl AdvantageConfig {
    pub fn new(gamma: f64, lambda: f64) -> Result<Self, RlError> {
        if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lambda) {
            return Err(RlError::Config(format!(
                "gamma {gamma} and lambda {lambda} must lie in [0, 1]"
            )));
        }
        Ok(Self { gamma, lambda })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub epsilon: f64,
}

impl ClipConfig {
    pub fn new(epsilon: f64) -> Result<Self, RlError> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(RlError::Config(format!("clip epsilon {epsilon} must lie in (0, 1)")));
        }
        Ok(Self { epsilon })
    }
}

/// GAE over explicit rewards and values (`values.len() == rewards.len() + 1`).
/// The bootstrap value is taken as 0 for terminal rollouts.
pub fn gae_from_values(
    rewards: &[f64],
    values: &[f64],
    terminal: bool,
    config: AdvantageConfig,
) -> Result<Vec<f64>, RlError> {
    if values.len() != rewards.len() + 1 {
        return Err(RlError::Length(format!(
            "{} rewards need {} values, got {}",
            rewards.len(),
            rewards.len() + 1,
            values.len()
        )));
    }
    let t_max = rewards.len();
    let mut advantages = vec![0.0; t_max];
    let mut running = 0.0;
    for t in (0..t_max).rev() {
        let next = if t + 1 == t_max && terminal {
            0.0
        } else {
            values[t + 1]
        };
        let delta = rewards[t] + config.gamma * next - values[t];
        running = delta + config.gamma * config.lambda * running;
        advantages[t] = running;
    }
    Ok(advantages)
}

/// `A_t = Σ_l (γλ)^l δ_{t+l}` with `δ_t = r_t + γ V_{t+1} − V_t`, by backward
/// recursion over the trajectory's stored values.
pub fn gae(trajectory: &Trajectory, config: AdvantageConfig) -> Result<Vec<f64>, RlError> {
    trajectory.validate()?;
    gae_from_values(
        &trajectory.rewards,
        &trajectory.value_estimates,
        trajectory.terminal,
        config,
    )
}

pub fn importance_ratio(log_prob_new: f64, log_prob_old: f64) -> f64 {
    (log_prob_new - log_prob_old).exp()
}

/// Per-step `min(r·Â, clamp(r, 1−ε, 1+ε)·Â)` and its mean.
pub fn ppo_clip_objective(
    ratios: &[f64],
    advantages: &[f64],
    clip: ClipConfig,
) -> Result<(f64, Vec<f64>), RlError> {
    if ratios.len() != advantages.len() {
        return Err(RlError::Length(format!(
            "{} ratios for {} advantages",
            ratios.len(),
            advantages.len()
        )));
    }
    let per_step: Vec<f64> = ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| clipped_term(r, a, clip).0)
        .collect();
    let mean = if per_step.is_empty() {
        0.0
    } else {
        per_step.iter().sum::<f64>() / per_step.len() as f64
    };
    Ok((mean, per_step))
}

/// The surrogate value and whether the unclipped branch is the one in force.
/// Ties go to the unclipped branch.
fn clipped_term(ratio: f64, advantage: f64, clip: ClipConfig) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip.epsilon, 1.0 + clip.epsilon) * advantage;
    if unclipped <= clipped {
        (unclipped, true)
    } else {
        (clipped, false)
    }
}

/// In-place per-batch standardization.
pub fn normalize_advantages(advantages: &mut [f64]) {
    let n = advantages.len() as f64;
    if advantages.len() < 2 {
        return;
    }
    let mean = advantages.iter().sum::<f64>() / n;
    let var = advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-8);
    for a in advantages {
        *a = (*a - mean) / sd;
    }
}

/// Bounded FIFO of trajectories; the oldest is evicted first.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    stored: VecDeque<Trajectory>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self, RlError> {
        if capacity == 0 {
            return Err(RlError::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            stored: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.stored.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stored.is_empty()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.stored.iter()
    }

    /// Appends, returning the evicted trajectory when full.
    pub fn push(&mut self, trajectory: Trajectory) -> Option<Trajectory> {
        let evicted = if self.stored.len() == self.capacity {
            self.stored.pop_front()
        } else {
            None
        };
        self.stored.push_back(trajectory);
        evicted
    }

    pub fn newest_snapshot(&self) -> Option<u64> {
        self.stored.back().map(|t| t.policy_snapshot)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBatch {
    /// On-policy trajectories first (newest first), then off-policy draws.
    pub trajectories: Vec<Trajectory>,
    pub on_policy: usize,
    /// How many requested off-policy trajectories were unavailable.
    pub shortfall: usize,
}

/// The `n_on_policy` newest trajectories plus `n_off_policy` drawn uniformly
/// without replacement from the rest of the buffer. Deterministic in `seed`.
pub fn replay_sample(
    buffer: &ReplayBuffer,
    n_on_policy: usize,
    n_off_policy: usize,
    seed: u64,
) -> Result<ReplayBatch, RlError> {
    let newest = buffer.newest_snapshot();
    let fresh = buffer
        .stored
        .iter()
        .rev()
        .take_while(|t| Some(t.policy_snapshot) == newest)
        .count();
    if fresh < n_on_policy {
        return Err(RlError::NotEnoughOnPolicy {
            available: fresh,
            requested: n_on_policy,
        });
    }
    let mut trajectories: Vec<Trajectory> =
        buffer.stored.iter().rev().take(n_on_policy).cloned().collect();

    let older = buffer.len() - n_on_policy;
    let draws = n_off_policy.min(older);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in index::sample(&mut rng, older, draws) {
        trajectories.push(buffer.stored[i].clone());
    }
    Ok(ReplayBatch {
        trajectories,
        on_policy: n_on_policy,
        shortfall: n_off_policy - draws,
    })
}

/// A trajectory with advantages and value targets from the current critic.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantagedTrajectory {
    pub trajectory: Trajectory,
    pub advantages: Vec<f64>,
    /// `advantage + V(s_t)`: regression targets for the critic.
    pub returns: Vec<f64>,
}

/// Re-evaluates advantages of replayed trajectories with fresh critic values
/// (one per state plus bootstrap). Stored behavior log-probabilities are
/// carried over untouched.
pub fn recompute_advantages(
    batch: &[Trajectory],
    critic_values: &[Vec<f64>],
    config: AdvantageConfig,
) -> Result<Vec<AdvantagedTrajectory>, RlError> {
    if batch.len() != critic_values.len() {
        return Err(RlError::Length(format!(
            "{} trajectories but {} critic value lists",
            batch.len(),
            critic_values.len()
        )));
    }
    batch
        .iter()
        .zip(critic_values)
        .map(|(trajectory, values)| {
            let advantages =
                gae_from_values(&trajectory.rewards, values, trajectory.terminal, config)?;
            let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
            Ok(AdvantagedTrajectory {
                trajectory: trajectory.clone(),
                advantages,
                returns,
            })
        })
        .collect()
}

/// `π(a | s) = softmax(θ s)_a` with `θ` stored row-major, one row per action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSoftmaxPolicy {
    pub n_actions: usize,
    pub n_features: usize,
    pub theta: Vec<f64>,
}

impl LinearSoftmaxPolicy {
    pub fn zeros(n_actions: usize, n_features: usize) -> Self {
        Self {
            n_actions,
            n_features,
            theta: vec![0.0; n_actions * n_features],
        }
    }

    pub fn from_theta(n_actions: usize, n_features: usize, theta: Vec<f64>) -> Result<Self, RlError> {
        if theta.len() != n_actions * n_features || n_actions == 0 {
            return Err(RlError::Dimension(format!(
                "{} weights for {n_actions} actions x {n_features} features",
                theta.len()
            )));
        }
        Ok(Self {
            n_actions,
            n_features,
            theta,
        })
    }

    fn check(&self, observation: &[f64]) -> Result<(), RlError> {
        if observation.len() != self.n_features {
            return Err(RlError::Dimension(format!(
                "observation has {} features, policy expects {}",
                observation.len(),
                self.n_features
            )));
        }
        Ok(())
    }

    pub fn logits(&self, observation: &[f64]) -> Result<Vec<f64>, RlError> {
        self.check(observation)?;
        Ok(self
            .theta
            .chunks(self.n_features)
            .map(|row| row.iter().zip(observation).map(|(w, x)| w * x).sum())
            .collect())
    }

    pub fn log_probs(&self, observation: &[f64]) -> Result<Vec<f64>, RlError> {
        let logits = self.logits(observation)?;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_norm = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        Ok(logits.into_iter().map(|l| l - log_norm).collect())
    }

    pub fn probs(&self, observation: &[f64]) -> Result<Vec<f64>, RlError> {
        Ok(self.log_probs(observation)?.into_iter().map(f64::exp).collect())
    }
}

/// One timestep as seen by the policy update.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    pub observation: Vec<f64>,
    pub action: usize,
    pub behavior_log_prob: f64,
    pub advantage: f64,
}

pub fn policy_samples(batch: &[AdvantagedTrajectory]) -> Vec<PolicySample> {
    batch
        .iter()
        .flat_map(|at| {
            let t = &at.trajectory;
            (0..t.len()).map(move |i| PolicySample {
                observation: t.observations[i].clone(),
                action: t.actions[i],
                behavior_log_prob: t.behavior_log_probs[i],
                advantage: at.advantages[i],
            })
        })
        .collect()
}

fn check_action(policy: &LinearSoftmaxPolicy, action: usize) -> Result<(), RlError> {
    if action >= policy.n_actions {
        return Err(RlError::Dimension(format!(
            "action {action} out of range for {} actions",
            policy.n_actions
        )));
    }
    Ok(())
}

/// Mean clipped surrogate of `policy` over `samples`.
pub fn surrogate_objective(
    policy: &LinearSoftmaxPolicy,
    samples: &[PolicySample],
    clip: ClipConfig,
) -> Result<f64, RlError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in samples {
        check_action(policy, s.action)?;
        let log_prob = policy.log_probs(&s.observation)?[s.action];
        let ratio = importance_ratio(log_prob, s.behavior_log_prob);
        total += clipped_term(ratio, s.advantage, clip).0;
    }
    Ok(total / samples.len() as f64)
}

/// Analytic gradient of [`surrogate_objective`] with respect to `θ`
/// (row-major, same layout as the policy). Steps where the clipped branch is
/// strictly smaller contribute nothing.
pub fn surrogate_gradient(
    policy: &LinearSoftmaxPolicy,
    samples: &[PolicySample],
    clip: ClipConfig,
) -> Result<Vec<f64>, RlError> {
    let mut grad = vec![0.0; policy.theta.len()];
    if samples.is_empty() {
        return Ok(grad);
    }
    for s in samples {
        check_action(policy, s.action)?;
        let log_probs = policy.log_probs(&s.observation)?;
        let ratio = importance_ratio(log_probs[s.action], s.behavior_log_prob);
        if !clipped_term(ratio, s.advantage, clip).1 {
            continue;
        }
        // ∂(r·Â)/∂θ_kf = Â·r·(1[k = a] − π_k)·s_f
        let scale = s.advantage * ratio;
        for (k, lp) in log_probs.iter().enumerate() {
            let coeff = scale * (f64::from(u8::from(k == s.action)) - lp.exp());
            let row = &mut grad[k * policy.n_features..(k + 1) * policy.n_features];
            for (g, x) in row.iter_mut().zip(&s.observation) {
                *g += coeff * x;
            }
        }
    }
    let n = samples.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(grad)
}

/// Trajectories as JSON lines, one object per line.
pub fn to_jsonl(batch: &[Trajectory]) -> String {
    batch
        .iter()
        .map(|t| serde_json::to_string(t).expect("trajectory serializes") + "\n")
        .collect()
}

pub fn from_jsonl(text: &str) -> Result<Vec<Trajectory>, RlError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let t: Trajectory = serde_json::from_str(l).map_err(|e| RlError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            t.validate().map_err(|e| RlError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            Ok(t)
        })
        .collect()
}

/// Hyperparameters of the replay-PPO trainer, read from `key = value` lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub n_on: usize,
    pub n_off: usize,
    pub capacity: usize,
    pub learning_rate: f64,
    pub critic_learning_rate: f64,
    pub epochs: usize,
    pub normalize_advantages: bool,
    pub eval_episodes: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            epsilon: 0.2,
            n_on: 1,
            n_off: 3,
            capacity: 16,
            learning_rate: 0.2,
            critic_learning_rate: 0.01,
            epochs: 4,
            normalize_advantages: false,
            eval_episodes: 50,
        }
    }
}

impl TrainingConfig {
    pub const KEYS: [&'static str; 11] = [
        "gamma",
        "lambda",
        "epsilon",
        "n_on",
        "n_off",
        "capacity",
        "learning_rate",
        "critic_learning_rate",
        "epochs",
        "normalize_advantages",
        "eval_episodes",
    ];

    /// Applies one `key`/`value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("{key}: cannot parse {value:?}"))
        }
        match key {
            "gamma" => self.gamma = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "n_on" => self.n_on = num(key, value)?,
            "n_off" => self.n_off = num(key, value)?,
            "capacity" => self.capacity = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "critic_learning_rate" => self.critic_learning_rate = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "normalize_advantages" => self.normalize_advantages = num(key, value)?,
            "eval_episodes" => self.eval_episodes = num(key, value)?,
            _ => {
                return Err(format!(
                    "unknown key {key:?}; expected one of {}",
                    Self::KEYS.join(", ")
                ))
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn from_key_values(text: &str) -> Result<Self, RlError> {
        let mut config = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| RlError::Parse {
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key = value, found {line:?}")))?;
            config.set(key.trim(), value.trim()).map_err(parse_err)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), RlError> {
        AdvantageConfig::new(self.gamma, self.lambda)?;
        ClipConfig::new(self.epsilon)?;
        if self.n_on == 0 || self.capacity < self.n_on {
            return Err(RlError::Config(format!(
                "need 1 <= n_on <= capacity, got n_on={} capacity={}",
                self.n_on, self.capacity
            )));
        }
        if !(self.learning_rate > 0.0 && self.critic_learning_rate >= 0.0) {
            return Err(RlError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn advantage(&self) -> AdvantageConfig {
        AdvantageConfig {
            gamma: self.gamma,
            lambda: self.lambda,
        }
    }

    pub fn clip(&self) -> ClipConfig {
        ClipConfig {
            epsilon: self.epsilon,
        }
    }
}
