//! Independent reference computations used by the property and acceptance
//! tests. Nothing here calls into the solver paths it checks.
#![allow(dead_code)]

use std::collections::BTreeSet;

use mlselect_core::bip::{BooleanProgram, Coef, Constraint, Relation, Sense};
use mlselect_core::cover::AffinityMatrix;
use mlselect_core::rational::{rational_from_f64, Rational};
use mlselect_core::transfer::{ObjectiveMode, TransferEdge, TransferProblem};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

/// Random sparse program with small integer and decimal coefficients.
pub fn random_program(rng: &mut StdRng, max_vars: usize) -> BooleanProgram {
    let n = rng.random_range(1..=max_vars);
    let coef = |rng: &mut StdRng| {
        if rng.random_bool(0.25) {
            Coef::from_f64(f64::from(rng.random_range(-20i32..=20)) / 10.0).unwrap()
        } else {
            Coef::int(rng.random_range(-5..=5))
        }
    };
    let sense = if rng.random_bool(0.5) {
        Sense::Minimize
    } else {
        Sense::Maximize
    };
    let objective = (0..n).map(|_| coef(rng)).collect();
    let mut program = BooleanProgram::new(sense, objective);
    for _ in 0..rng.random_range(0..=n.min(8)) {
        let mut vars: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.35)).collect();
        if vars.is_empty() {
            vars.push(rng.random_range(0..n));
        }
        let terms = vars.into_iter().map(|v| (v, coef(rng))).collect();
        let relation = match rng.random_range(0..6) {
            0 => Relation::Eq,
            1 | 2 => Relation::Le,
            _ => Relation::Ge,
        };
        program.push(Constraint::new(terms, relation, Coef::int(rng.random_range(-2..=4))));
    }
    program
}

/// Random matrix with unit diagonal and entries on a 0.05 grid, so ties occur.
pub fn random_affinity(rng: &mut StdRng, m: usize) -> AffinityMatrix {
    let values = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| {
                    if i == j {
                        1.0
                    } else {
                        f64::from(rng.random_range(0..20u32)) / 20.0
                    }
                })
                .collect()
        })
        .collect();
    AffinityMatrix::from_values(values).unwrap()
}

pub fn risk(matrix: &AffinityMatrix, set: &[usize]) -> f64 {
    let m = matrix.len();
    (0..m)
        .map(|j| set.iter().map(|&i| matrix.values()[i][j]).fold(f64::MIN, f64::max))
        .fold(f64::INFINITY, f64::min)
}

/// Best achievable threshold with at most `k` features, and the smallest set
/// size reaching it, by enumerating every nonempty subset.
pub fn brute_force_max_threshold(matrix: &AffinityMatrix, k: usize) -> (f64, usize) {
    let m = matrix.len();
    let mut best = (f64::MIN, usize::MAX);
    for mask in 1u32..(1 << m) {
        let size = mask.count_ones() as usize;
        if size > k {
            continue;
        }
        let set: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let r = risk(matrix, &set);
        if r > best.0 || (r == best.0 && size < best.1) {
            best = (r, size);
        }
    }
    best
}

/// Smallest subset size with risk at least `delta`, if any.
pub fn brute_force_min_set(matrix: &AffinityMatrix, delta: f64) -> Option<usize> {
    let m = matrix.len();
    (1u32..(1 << m))
        .filter(|mask| {
            let set: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            risk(matrix, &set) >= delta
        })
        .map(|mask| mask.count_ones() as usize)
        .min()
}

/// Random problem with `|E| + |F| <= 14`, some multi-source edges, and
/// optionally a target that no edge reaches.
pub fn random_transfer_problem(rng: &mut StdRng) -> TransferProblem {
    let n_features = rng.random_range(2..=5);
    let max_edges = 14 - n_features;
    let n_edges = rng.random_range(1..=max_edges);
    let features: Vec<String> = (0..n_features).map(|i| format!("f{i}")).collect();
    let mut targets: Vec<String> = features
        .iter()
        .filter(|_| rng.random_bool(0.6))
        .cloned()
        .collect();
    if targets.is_empty() {
        targets.push(features[0].clone());
    }
    let importances = targets
        .iter()
        .map(|_| f64::from(rng.random_range(1..=4u32)) / 2.0)
        .collect();
    let edges = (0..n_edges)
        .map(|_| {
            let n_sources = rng.random_range(1..=n_features.min(3));
            let mut pool: Vec<usize> = (0..n_features).collect();
            let mut sources = Vec::new();
            for _ in 0..n_sources {
                let pick = rng.random_range(0..pool.len());
                sources.push(features[pool.remove(pick)].clone());
            }
            let target = if rng.random_bool(0.85) {
                targets[rng.random_range(0..targets.len())].clone()
            } else {
                features[rng.random_range(0..n_features)].clone()
            };
            TransferEdge {
                sources,
                target,
                performance: f64::from(rng.random_range(1..=20u32)) / 20.0,
            }
        })
        .collect();
    TransferProblem {
        features,
        targets,
        target_importance: importances,
        edges,
        delta: f64::from(rng.random_range(0..=10u32)) / 20.0,
        objective_mode: if rng.random_bool(0.5) {
            ObjectiveMode::MinSize
        } else {
            ObjectiveMode::MaxPerformance
        },
    }
}

/// Best objective over every edge subset that keeps only δ-admissible edges,
/// chooses exactly one incoming edge per target, and activates exactly the
/// union of the chosen sources.
pub fn enumerate_transfer_optimum(
    problem: &TransferProblem,
    budget: Option<usize>,
) -> Option<Rational> {
    let e = problem.edges.len();
    let mut best: Option<Rational> = None;
    for mask in 0u32..(1 << e) {
        let chosen: Vec<usize> = (0..e).filter(|i| mask & (1 << i) != 0).collect();
        if chosen.iter().any(|&i| problem.edges[i].performance < problem.delta) {
            continue;
        }
        if chosen
            .iter()
            .any(|&i| !problem.targets.contains(&problem.edges[i].target))
        {
            continue;
        }
        let one_each = problem.targets.iter().all(|t| {
            chosen.iter().filter(|&&i| problem.edges[i].target == *t).count() == 1
        });
        if !one_each {
            continue;
        }
        let active: BTreeSet<&String> = chosen
            .iter()
            .flat_map(|&i| problem.edges[i].sources.iter())
            .collect();
        if budget.is_some_and(|b| active.len() > b) {
            continue;
        }
        let value = match problem.objective_mode {
            ObjectiveMode::MinSize => Rational::from_integer(active.len().into()),
            ObjectiveMode::MaxPerformance => chosen
                .iter()
                .map(|&i| {
                    let edge = &problem.edges[i];
                    let j = problem.targets.iter().position(|t| *t == edge.target).unwrap();
                    rational_from_f64(problem.target_importance[j]).unwrap()
                        * rational_from_f64(edge.performance).unwrap()
                })
                .sum(),
        };
        let better = match (&best, problem.objective_mode) {
            (None, _) => true,
            (Some(b), ObjectiveMode::MinSize) => value < *b,
            (Some(b), ObjectiveMode::MaxPerformance) => value > *b,
        };
        if better {
            best = Some(value);
        }
    }
    best
}

/// Exact one-sided tail probabilities of the rank-sum statistic by listing
/// every relabeling of the pooled sample. Returns (P[U >= u_obs], P[U <= u_obs])
/// for the first sample, where U counts pairwise wins with ties as one half.
pub fn permutation_tails(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let pooled: Vec<f64> = xs.iter().chain(ys).copied().collect();
    let n = pooled.len();
    let n1 = xs.len();
    // Twice the pairwise U keeps everything integral.
    let twice_u = |first: &[f64], second: &[f64]| -> i64 {
        first
            .iter()
            .map(|a| {
                second
                    .iter()
                    .map(|b| match a.partial_cmp(b).unwrap() {
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Less => 0,
                    })
                    .sum::<i64>()
            })
            .sum()
    };
    let observed = twice_u(xs, ys);
    let (mut ge, mut le, mut total) = (0u64, 0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != n1 {
            continue;
        }
        let (first, second): (Vec<f64>, Vec<f64>) = {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for (i, v) in pooled.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    a.push(*v);
                } else {
                    b.push(*v);
                }
            }
            (a, b)
        };
        let u = twice_u(&first, &second);
        total += 1;
        if u >= observed {
            ge += 1;
        }
        if u <= observed {
            le += 1;
        }
    }
    (ge as f64 / total as f64, le as f64 / total as f64)
}

/// Rewards, values (with bootstrap), terminal flag and discount for a random
/// rollout of length `1..=max_len`.
pub fn random_rollout(rng: &mut StdRng, max_len: usize) -> (Vec<f64>, Vec<f64>, bool, f64) {
    let t = rng.random_range(1..=max_len);
    let rewards = (0..t).map(|_| rng.random_range(-2.0..2.0)).collect();
    let values = (0..=t).map(|_| rng.random_range(-3.0..3.0)).collect();
    (rewards, values, rng.random_bool(0.5), rng.random_range(0.0..=1.0))
}

fn bootstrap(values: &[f64], terminal: bool) -> f64 {
    if terminal {
        0.0
    } else {
        values[values.len() - 1]
    }
}

pub fn td_residuals(rewards: &[f64], values: &[f64], terminal: bool, gamma: f64) -> Vec<f64> {
    let n = rewards.len();
    (0..n)
        .map(|t| {
            let next = if t + 1 == n {
                bootstrap(values, terminal)
            } else {
                values[t + 1]
            };
            rewards[t] + gamma * next - values[t]
        })
        .collect()
}

/// `G_t = Σ_l γ^l r_{t+l} + γ^{T−t} V_T`, summed forward term by term.
pub fn discounted_returns(rewards: &[f64], values: &[f64], terminal: bool, gamma: f64) -> Vec<f64> {
    let n = rewards.len();
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            let mut weight = 1.0;
            for r in &rewards[t..] {
                total += weight * r;
                weight *= gamma;
            }
            total + weight * bootstrap(values, terminal)
        })
        .collect()
}

pub struct GradientInstance {
    pub policy: mlselect_core::rl::LinearSoftmaxPolicy,
    pub samples: Vec<mlselect_core::rl::PolicySample>,
    pub clip: mlselect_core::rl::ClipConfig,
}

fn log_softmax_at(theta: &[f64], n_features: usize, obs: &[f64], action: usize) -> f64 {
    let logits: Vec<f64> = theta
        .chunks(n_features)
        .map(|row| row.iter().zip(obs).map(|(w, x)| w * x).sum())
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let norm: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    logits[action] - max - norm.ln()
}

/// Mean clipped surrogate evaluated directly from `θ`.
pub fn surrogate_at(instance: &GradientInstance, theta: &[f64]) -> f64 {
    let eps = instance.clip.epsilon;
    let f = instance.policy.n_features;
    let total: f64 = instance
        .samples
        .iter()
        .map(|s| {
            let r = (log_softmax_at(theta, f, &s.observation, s.action) - s.behavior_log_prob).exp();
            let clipped = r.max(1.0 - eps).min(1.0 + eps);
            (r * s.advantage).min(clipped * s.advantage)
        })
        .sum();
    total / instance.samples.len() as f64
}

/// Random `(θ, batch, ε)`. Instances with a ratio within 1e-3 of a clip
/// boundary are redrawn, since the surrogate has a kink there.
pub fn random_gradient_instance(rng: &mut StdRng) -> GradientInstance {
    loop {
        let n_actions = rng.random_range(2..=4);
        let n_features = rng.random_range(1..=5);
        let theta: Vec<f64> = (0..n_actions * n_features)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let eps = rng.random_range(0.05..0.4);
        let n = rng.random_range(1..=20);
        let mut samples = Vec::with_capacity(n);
        let mut kink = false;
        for _ in 0..n {
            let observation: Vec<f64> = (0..n_features).map(|_| rng.random_range(-2.0..2.0)).collect();
            let action = rng.random_range(0..n_actions);
            let current = log_softmax_at(&theta, n_features, &observation, action);
            let behavior_log_prob = current + rng.random_range(-0.5..0.5);
            let ratio = (current - behavior_log_prob).exp();
            kink |= (ratio - (1.0 - eps)).abs() < 1e-3 || (ratio - (1.0 + eps)).abs() < 1e-3;
            samples.push(mlselect_core::rl::PolicySample {
                observation,
                action,
                behavior_log_prob,
                advantage: rng.random_range(-3.0..3.0),
            });
        }
        if kink {
            continue;
        }
        return GradientInstance {
            policy: mlselect_core::rl::LinearSoftmaxPolicy::from_theta(n_actions, n_features, theta)
                .unwrap(),
            samples,
            clip: mlselect_core::rl::ClipConfig::new(eps).unwrap(),
        };
    }
}

pub fn central_difference(instance: &GradientInstance, h: f64) -> Vec<f64> {
    let theta = &instance.policy.theta;
    (0..theta.len())
        .map(|i| {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[i] += h;
            minus[i] -= h;
            (surrogate_at(instance, &plus) - surrogate_at(instance, &minus)) / (2.0 * h)
        })
        .collect()
}

/// `|a − f| / max(|a|, |f|, 1e-3)`; the floor keeps near-zero components from
/// dominating through rounding noise alone.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}
