//! Evaluation statistics: rank-sum tests, Benjamini-Hochberg FDR control,
//! Spearman correlation, reward relative to a blind agent, per-seed cluster
//! reduction and rank-reversal graphs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

/// Combined sample size up to which the exact null distribution is used.
pub const EXACT_MAX_N: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("{0} sample is empty")]
    EmptySample(&'static str),
    #[error("samples have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} paired values, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("correlation is undefined for constant input")]
    ConstantInput,
    #[error("relative reward is undefined when the blind reward equals the floor ({0})")]
    DegenerateBaseline(f64),
    #[error("{0}")]
    Invalid(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    TwoSided,
    /// The first sample tends to be larger.
    Greater,
    /// The first sample tends to be smaller.
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSumResult {
    /// Mann-Whitney U of the first sample (ties count one half).
    pub u: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Positions start+1 ..= end share their mean.
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Mann-Whitney U test (Wilcoxon rank-sum), unpaired.
///
/// Uses the exact tie-aware null distribution of the rank sum when
/// `xs.len() + ys.len() <= 20`, otherwise the normal approximation with
/// tie-corrected variance and continuity correction. Two-sided p-values are
/// twice the smaller tail, capped at 1.
pub fn mann_whitney_u(
    xs: &[f64],
    ys: &[f64],
    alternative: Alternative,
) -> Result<RankSumResult, StatsError> {
    if xs.is_empty() {
        return Err(StatsError::EmptySample("first"));
    }
    if ys.is_empty() {
        return Err(StatsError::EmptySample("second"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(StatsError::Invalid("samples must be finite".into()));
    }
    let pooled: Vec<f64> = xs.iter().chain(ys).copied().collect();
    let ranks = midranks(&pooled);
    let (n1, n2) = (xs.len(), ys.len());
    let rank_sum: f64 = ranks[..n1].iter().sum();
    let u = rank_sum - (n1 * (n1 + 1)) as f64 / 2.0;

    if n1 + n2 <= EXACT_MAX_N {
        let (upper, lower) = exact_tails(&ranks, n1);
        let p = match alternative {
            Alternative::Greater => upper,
            Alternative::Less => lower,
            Alternative::TwoSided => 2.0 * upper.min(lower),
        };
        return Ok(RankSumResult {
            u,
            p_value: p.min(1.0),
            exact: true,
        });
    }

    let n = (n1 + n2) as f64;
    let (f1, f2) = (n1 as f64, n2 as f64);
    let mean = f1 * f2 / 2.0;
    let tie_term: f64 = tie_group_sizes(&pooled)
        .into_iter()
        .map(|t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum();
    let variance = f1 * f2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if variance <= 0.0 {
        return Ok(RankSumResult {
            u,
            p_value: 1.0,
            exact: false,
        });
    }
    let sd = variance.sqrt();
    let normal = Normal::standard();
    let upper = normal.sf((u - mean - 0.5) / sd);
    let lower = normal.cdf((u - mean + 0.5) / sd);
    let p = match alternative {
        Alternative::Greater => upper,
        Alternative::Less => lower,
        Alternative::TwoSided => 2.0 * upper.min(lower),
    };
    Ok(RankSumResult {
        u,
        p_value: p.min(1.0),
        exact: false,
    })
}

fn tie_group_sizes(values: &[f64]) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut sizes = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        sizes.push(j - i);
        i = j;
    }
    sizes
}

/// (P[W >= w_obs], P[W <= w_obs]) for the rank sum W of the first `n1`
/// positions, over all equally likely relabelings of the pooled midranks.
fn exact_tails(ranks: &[f64], n1: usize) -> (f64, f64) {
    // Midranks are multiples of 1/2; doubling makes them integral.
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let observed: usize = doubled[..n1].iter().sum();
    let max_sum: usize = doubled.iter().sum();

    // counts[k][s]: number of k-subsets with doubled rank sum s.
    let mut counts = vec![vec![0u64; max_sum + 1]; n1 + 1];
    counts[0][0] = 1;
    for &r in &doubled {
        for k in (1..=n1).rev() {
            for s in (r..=max_sum).rev() {
                let add = counts[k - 1][s - r];
                if add != 0 {
                    counts[k][s] += add;
                }
            }
        }
    }
    let dist = &counts[n1];
    let total: u64 = dist.iter().sum();
    let upper: u64 = dist[observed..].iter().sum();
    let lower: u64 = dist[..=observed].iter().sum();
    (upper as f64 / total as f64, lower as f64 / total as f64)
}

/// One hypothesis after Benjamini-Hochberg adjustment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisResult {
    pub label: String,
    /// Test statistic, when the p-value came from a test run here.
    pub statistic: Option<f64>,
    pub p_value: f64,
    /// `Q·i/m` for this hypothesis's position `i` in ascending p order.
    pub bh_threshold: f64,
    pub rejected: bool,
}

/// Benjamini-Hochberg step-up procedure at false discovery rate `q`.
///
/// Results come back in ascending p-value order (input order among equal
/// p-values); the rejected hypotheses form a prefix.
pub fn bh_fdr(p_values: &[(String, f64)], q: f64) -> Result<Vec<HypothesisResult>, StatsError> {
    if !(q > 0.0 && q < 1.0) {
        return Err(StatsError::Invalid(format!("FDR level {q} is outside (0, 1)")));
    }
    if let Some((label, p)) = p_values.iter().find(|(_, p)| !(0.0..=1.0).contains(p)) {
        return Err(StatsError::Invalid(format!("p-value {p} of {label:?} is outside [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].1.total_cmp(&p_values[b].1));

    let threshold = |i: usize| q * i as f64 / m as f64;
    let pivot = (1..=m)
        .rev()
        .find(|&i| p_values[order[i - 1]].1 <= threshold(i))
        .unwrap_or(0);

    Ok(order
        .into_iter()
        .enumerate()
        .map(|(pos, idx)| HypothesisResult {
            label: p_values[idx].0.clone(),
            statistic: None,
            p_value: p_values[idx].1,
            bh_threshold: threshold(pos + 1),
            rejected: pos < pivot,
        })
        .collect())
}

/// Spearman's rank correlation: the Pearson correlation of midranks.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(StatsError::TooShort {
            needed: 2,
            got: xs.len(),
        });
    }
    let rx = midranks(xs);
    let ry = midranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ConstantInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Reward relative to blind: `(r − r_min) / (r_blind − r_min)`. A blind agent
/// scores exactly 1 and an agent at the reward floor scores 0.
pub fn relative_reward(treatment: f64, blind: f64, floor: f64) -> Result<f64, StatsError> {
    if blind == floor {
        return Err(StatsError::DegenerateBaseline(floor));
    }
    Ok((treatment - floor) / (blind - floor))
}

/// One evaluation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task: String,
    pub condition: String,
    /// Cluster identifier: the training seed that produced the agent.
    pub seed: String,
    pub episode_index: usize,
    pub reward: f64,
}

pub const EPISODE_HEADER: &str = "task,condition,seed,episode,reward";

impl EpisodeRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.task, self.condition, self.seed, self.episode_index, self.reward
        )
    }
}

/// Parses the delimited episode format, rejecting duplicate
/// `(task, condition, seed, episode)` keys.
pub fn parse_episodes(text: &str) -> Result<Vec<EpisodeRecord>, StatsError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, header)) if header.replace(' ', "") == EPISODE_HEADER => {}
        Some((line, _)) => {
            return Err(StatsError::Parse {
                line,
                message: format!("expected header `{EPISODE_HEADER}`"),
            })
        }
        None => {
            return Err(StatsError::Parse {
                line: 1,
                message: "empty episode file".into(),
            })
        }
    }
    let mut seen = BTreeSet::new();
    let mut records = Vec::new();
    for (line, text) in lines {
        if text == EPISODE_HEADER {
            // Appended logs repeat the header; tolerate it.
            continue;
        }
        let fields: Vec<&str> = text.split(',').map(str::trim).collect();
        let parse_err = |message: String| StatsError::Parse { line, message };
        if fields.len() != 5 {
            return Err(parse_err(format!("expected 5 fields, found {}", fields.len())));
        }
        let episode_index: usize = fields[3]
            .parse()
            .map_err(|_| parse_err(format!("episode {:?} is not a count", fields[3])))?;
        let reward: f64 = fields[4]
            .parse()
            .ok()
            .filter(|r: &f64| r.is_finite())
            .ok_or_else(|| parse_err(format!("reward {:?} is not a number", fields[4])))?;
        let record = EpisodeRecord {
            task: fields[0].to_string(),
            condition: fields[1].to_string(),
            seed: fields[2].to_string(),
            episode_index,
            reward,
        };
        let key = (
            record.task.clone(),
            record.condition.clone(),
            record.seed.clone(),
            episode_index,
        );
        if !seen.insert(key) {
            return Err(parse_err("duplicate (task, condition, seed, episode)".into()));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn format_episodes(records: &[EpisodeRecord], with_header: bool) -> String {
    let mut out = String::new();
    if with_header {
        out.push_str(EPISODE_HEADER);
        out.push('\n');
    }
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

/// Mean reward of one (task, condition, seed) cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMean {
    pub task: String,
    pub condition: String,
    pub seed: String,
    pub mean_reward: f64,
    pub episodes: usize,
}

/// Collapses episodes to per-seed means so that seeds, not episodes, are the
/// independent units of the downstream tests. Output is sorted by key.
pub fn cluster_reduce(records: &[EpisodeRecord]) -> Result<Vec<ClusterMean>, StatsError> {
    if records.is_empty() {
        return Err(StatsError::Invalid("episode dataset is empty".into()));
    }
    let mut groups: BTreeMap<(&str, &str, &str), (f64, usize)> = BTreeMap::new();
    for r in records {
        let entry = groups
            .entry((r.task.as_str(), r.condition.as_str(), r.seed.as_str()))
            .or_default();
        entry.0 += r.reward;
        entry.1 += 1;
    }
    Ok(groups
        .into_iter()
        .map(|((task, condition, seed), (sum, n))| ClusterMean {
            task: task.to_string(),
            condition: condition.to_string(),
            seed: seed.to_string(),
            mean_reward: sum / n as f64,
            episodes: n,
        })
        .collect())
}

/// Seed-level rewards grouped as task → condition → rewards.
pub type SeedRewards = BTreeMap<String, BTreeMap<String, Vec<f64>>>;

pub fn group_seed_rewards(clusters: &[ClusterMean]) -> SeedRewards {
    let mut out = SeedRewards::new();
    for c in clusters {
        out.entry(c.task.clone())
            .or_default()
            .entry(c.condition.clone())
            .or_default()
            .push(c.mean_reward);
    }
    out
}

/// `loser → winner` on one task at the smallest significance level passed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceEdge {
    pub task: String,
    pub winner: String,
    pub loser: String,
    pub alpha: f64,
    pub p_value: f64,
    /// 1 for the loosest level; larger means a smaller α.
    pub weight: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReversal {
    pub first: String,
    pub second: String,
    /// Tasks on which `first` significantly beats `second`.
    pub first_wins_on: Vec<String>,
    /// Tasks on which `second` significantly beats `first`.
    pub second_wins_on: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReversalGraph {
    pub tasks: Vec<String>,
    pub conditions: Vec<String>,
    pub alpha_levels: Vec<f64>,
    pub edges: Vec<DominanceEdge>,
    pub reversals: Vec<RankReversal>,
    /// Conditions that beat every other condition on every task.
    pub universal: Vec<String>,
    /// (task, condition) pairs dropped for having fewer than two seeds.
    pub excluded: Vec<(String, String)>,
}

/// Pairwise one-sided rank-sum tests on every task, edges at the smallest
/// passed α, and the pairs whose order flips between tasks.
pub fn rank_reversal_graph(
    data: &SeedRewards,
    alpha_levels: &[f64],
) -> Result<RankReversalGraph, StatsError> {
    if alpha_levels.is_empty() {
        return Err(StatsError::Invalid("at least one significance level is required".into()));
    }
    if alpha_levels.iter().any(|a| !(*a > 0.0 && *a < 0.5)) {
        return Err(StatsError::Invalid("significance levels must lie in (0, 0.5)".into()));
    }
    if alpha_levels.windows(2).any(|w| w[1] >= w[0]) {
        return Err(StatsError::Invalid("significance levels must be strictly descending".into()));
    }

    let mut excluded = Vec::new();
    let mut edges = Vec::new();
    let mut conditions = BTreeSet::new();
    let mut usable: BTreeMap<&str, BTreeMap<&str, &[f64]>> = BTreeMap::new();
    for (task, by_condition) in data {
        for (condition, rewards) in by_condition {
            conditions.insert(condition.clone());
            if rewards.len() < 2 {
                log::warn!(
                    "excluding {condition:?} on {task:?}: {} seed(s), need at least 2",
                    rewards.len()
                );
                excluded.push((task.clone(), condition.clone()));
            } else {
                usable
                    .entry(task.as_str())
                    .or_default()
                    .insert(condition.as_str(), rewards.as_slice());
            }
        }
    }

    for (task, by_condition) in &usable {
        for (winner, w_rewards) in by_condition {
            for (loser, l_rewards) in by_condition {
                if winner == loser {
                    continue;
                }
                let test = mann_whitney_u(w_rewards, l_rewards, Alternative::Greater)?;
                let passed = alpha_levels
                    .iter()
                    .enumerate()
                    .rfind(|(_, &a)| test.p_value <= a);
                if let Some((idx, &alpha)) = passed {
                    edges.push(DominanceEdge {
                        task: task.to_string(),
                        winner: winner.to_string(),
                        loser: loser.to_string(),
                        alpha,
                        p_value: test.p_value,
                        weight: idx + 1,
                    });
                }
            }
        }
    }

    let wins = |task: &str, a: &str, b: &str| {
        edges
            .iter()
            .any(|e| e.task == task && e.winner == a && e.loser == b)
    };
    let tasks: Vec<String> = data.keys().cloned().collect();
    let conditions: Vec<String> = conditions.into_iter().collect();

    let mut reversals = Vec::new();
    for (i, a) in conditions.iter().enumerate() {
        for b in &conditions[i + 1..] {
            let first_wins_on: Vec<String> =
                tasks.iter().filter(|t| wins(t, a, b)).cloned().collect();
            let second_wins_on: Vec<String> =
                tasks.iter().filter(|t| wins(t, b, a)).cloned().collect();
            if !first_wins_on.is_empty() && !second_wins_on.is_empty() {
                reversals.push(RankReversal {
                    first: a.clone(),
                    second: b.clone(),
                    first_wins_on,
                    second_wins_on,
                });
            }
        }
    }

    let universal = conditions
        .iter()
        .filter(|c| {
            !usable.is_empty()
                && usable.iter().all(|(task, by_condition)| {
                    by_condition.contains_key(c.as_str())
                        && by_condition.len() > 1
                        && by_condition
                            .keys()
                            .filter(|other| **other != c.as_str())
                            .all(|other| wins(task, c, other))
                })
        })
        .cloned()
        .collect();

    Ok(RankReversalGraph {
        tasks,
        conditions,
        alpha_levels: alpha_levels.to_vec(),
        edges,
        reversals,
        universal,
        excluded,
    })
}

fn dot_id(name: &str) -> String {
    format!("\"{}\"", name.replace('\\', "\\\\").replace('"', "\\\""))
}

impl RankReversalGraph {
    /// Graphviz digraph: one cluster per task, arrows point at the winner,
    /// heavier pens for smaller α.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph rank_reversal {\n  rankdir=LR;\n  node [shape=ellipse];\n");
        for (ti, task) in self.tasks.iter().enumerate() {
            let _ = writeln!(out, "  subgraph cluster_{ti} {{");
            let _ = writeln!(out, "    label={};", dot_id(task));
            for condition in &self.conditions {
                let _ = writeln!(
                    out,
                    "    {} [label={}];",
                    dot_id(&format!("{task}/{condition}")),
                    dot_id(condition)
                );
            }
            for e in self.edges.iter().filter(|e| e.task == *task) {
                let _ = writeln!(
                    out,
                    "    {} -> {} [label=\"{}\", penwidth={}];",
                    dot_id(&format!("{task}/{}", e.loser)),
                    dot_id(&format!("{task}/{}", e.winner)),
                    e.alpha,
                    e.weight
                );
            }
            out.push_str("  }\n");
        }
        out.push_str("}\n");
        out
    }
}
