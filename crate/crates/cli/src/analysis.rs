//! Per-task significance tables against a baseline condition, relative
//! rewards against the blind condition, and the cross-task rank-reversal
//! graph.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use mlselect_core::env::{Task, TaskConfig};
use mlselect_core::stats::{
    bh_fdr, cluster_reduce, group_seed_rewards, mann_whitney_u, rank_reversal_graph,
    relative_reward, Alternative, EpisodeRecord, RankReversalGraph, StatsError,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ANALYSIS_SCHEMA: &str = "mlselect.analysis";
pub const ANALYSIS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("baseline condition {baseline:?} is missing on task {task:?}; available conditions: {}", available.join(", "))]
    MissingBaseline {
        baseline: String,
        task: String,
        available: Vec<String>,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// One line of a significance table, in ascending p-value order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub feature: String,
    /// Mean seed-level reward, when episode data was given.
    pub reward: Option<f64>,
    pub p_value: f64,
    /// `Q·i/m` for this row's rank `i`.
    pub threshold: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceTable {
    pub task: String,
    pub q: f64,
    pub baseline: Option<String>,
    pub rows: Vec<SignificanceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub task: String,
    pub condition: String,
    pub mean_reward: f64,
    pub seeds: usize,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeRewardRow {
    pub task: String,
    pub condition: String,
    pub reward: f64,
    pub relative_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub schema: String,
    pub version: u32,
    pub q: f64,
    pub baseline: Option<String>,
    pub blind: Option<String>,
    pub alpha_levels: Vec<f64>,
    pub conditions: Vec<ConditionSummary>,
    pub tables: Vec<SignificanceTable>,
    pub relative_rewards: Vec<RelativeRewardRow>,
    pub graph: Option<RankReversalGraph>,
}

impl Analysis {
    pub fn empty(q: f64) -> Self {
        Self {
            schema: ANALYSIS_SCHEMA.to_string(),
            version: ANALYSIS_VERSION,
            q,
            baseline: None,
            blind: None,
            alpha_levels: Vec::new(),
            conditions: Vec::new(),
            tables: Vec::new(),
            relative_rewards: Vec::new(),
            graph: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnalyzeOptions {
    pub q: f64,
    pub baseline: String,
    pub alpha_levels: Vec<f64>,
    pub blind: String,
    /// Per-task reward floor; tasks named after a simulator task fall back
    /// to its minimum episode return.
    pub r_min: BTreeMap<String, f64>,
}

fn reward_floor(task: &str, overrides: &BTreeMap<String, f64>) -> Option<f64> {
    overrides.get(task).copied().or_else(|| {
        task.parse::<Task>()
            .ok()
            .map(|t| TaskConfig::new(t).min_episode_reward())
    })
}

fn table_rows(results: Vec<mlselect_core::stats::HypothesisResult>, rewards: &BTreeMap<String, f64>) -> Vec<SignificanceRow> {
    results
        .into_iter()
        .map(|h| SignificanceRow {
            reward: rewards.get(&h.label).copied(),
            feature: h.label,
            p_value: h.p_value,
            threshold: h.bh_threshold,
            significant: h.rejected,
        })
        .collect()
}

pub fn analyze_records(records: &[EpisodeRecord], options: &AnalyzeOptions) -> Result<Analysis, AnalysisError> {
    let clusters = cluster_reduce(records)?;
    let data = group_seed_rewards(&clusters);
    let mut analysis = Analysis::empty(options.q);
    analysis.baseline = Some(options.baseline.clone());
    analysis.blind = Some(options.blind.clone());

    let mut episodes: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for c in &clusters {
        *episodes.entry((&c.task, &c.condition)).or_default() += c.episodes;
    }

    for (task, by_condition) in &data {
        let means: BTreeMap<String, f64> = by_condition
            .iter()
            .map(|(c, seeds)| (c.clone(), seeds.iter().sum::<f64>() / seeds.len() as f64))
            .collect();
        for (condition, seeds) in by_condition {
            analysis.conditions.push(ConditionSummary {
                task: task.clone(),
                condition: condition.clone(),
                mean_reward: means[condition],
                seeds: seeds.len(),
                episodes: episodes[&(task.as_str(), condition.as_str())],
            });
        }

        let baseline = by_condition.get(&options.baseline).ok_or_else(|| {
            AnalysisError::MissingBaseline {
                baseline: options.baseline.clone(),
                task: task.clone(),
                available: by_condition.keys().cloned().collect(),
            }
        })?;
        let mut p_values = Vec::new();
        let mut statistics = BTreeMap::new();
        for (condition, seeds) in by_condition {
            if *condition == options.baseline {
                continue;
            }
            let test = mann_whitney_u(seeds, baseline, Alternative::TwoSided)?;
            statistics.insert(condition.clone(), test.u);
            p_values.push((condition.clone(), test.p_value));
        }
        let results = bh_fdr(&p_values, options.q)?;
        analysis.tables.push(SignificanceTable {
            task: task.clone(),
            q: options.q,
            baseline: Some(options.baseline.clone()),
            rows: table_rows(results, &means),
        });

        if let Some(&blind) = means.get(&options.blind) {
            match reward_floor(task, &options.r_min) {
                Some(floor) => {
                    for (condition, &reward) in &means {
                        match relative_reward(reward, blind, floor) {
                            Ok(rr) => analysis.relative_rewards.push(RelativeRewardRow {
                                task: task.clone(),
                                condition: condition.clone(),
                                reward,
                                relative_reward: rr,
                            }),
                            Err(e) => log::warn!("task {task}: {e}"),
                        }
                    }
                }
                None => log::warn!(
                    "task {task}: no reward floor known; pass --r-min {task}=VALUE for relative rewards"
                ),
            }
        }
    }

    if data.len() >= 2 {
        analysis.alpha_levels = options.alpha_levels.clone();
        analysis.graph = Some(rank_reversal_graph(&data, &options.alpha_levels)?);
    }
    Ok(analysis)
}

/// `label,p[,reward]` lines; a header line starting with `label` or
/// `feature` is skipped, as are blank lines and `#` comments.
pub fn parse_p_value_list(text: &str) -> Result<Vec<(String, f64, Option<f64>)>, AnalysisError> {
    let mut out = Vec::new();
    let mut labels = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lower = line.to_ascii_lowercase();
        if line.is_empty() || line.starts_with('#') || lower.starts_with("label") || lower.starts_with("feature") {
            continue;
        }
        let err = |message: String| AnalysisError::Parse { line: i + 1, message };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(err(format!("expected label,p[,reward], found {line:?}")));
        }
        let p: f64 = fields[1]
            .parse()
            .map_err(|_| err(format!("p-value {:?} is not a number", fields[1])))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(err(format!("p-value {p} is outside [0, 1]")));
        }
        let reward = match fields.get(2) {
            Some(r) => Some(r.parse().map_err(|_| err(format!("reward {r:?} is not a number")))?),
            None => None,
        };
        if !labels.insert(fields[0].to_string()) {
            return Err(err(format!("label {:?} appears twice", fields[0])));
        }
        out.push((fields[0].to_string(), p, reward));
    }
    Ok(out)
}

/// Significance table straight from a list of p-values.
pub fn analyze_p_values(
    entries: &[(String, f64, Option<f64>)],
    q: f64,
    task: &str,
) -> Result<Analysis, AnalysisError> {
    let labeled: Vec<(String, f64)> = entries.iter().map(|(l, p, _)| (l.clone(), *p)).collect();
    let rewards: BTreeMap<String, f64> = entries
        .iter()
        .filter_map(|(l, _, r)| r.map(|r| (l.clone(), r)))
        .collect();
    let mut analysis = Analysis::empty(q);
    analysis.tables.push(SignificanceTable {
        task: task.to_string(),
        q,
        baseline: None,
        rows: table_rows(bh_fdr(&labeled, q)?, &rewards),
    });
    Ok(analysis)
}

fn escape_cell(s: &str) -> String {
    s.replace('\\', "\\\\").replace('|', "\\|")
}

fn split_cells(line: &str) -> Option<Vec<String>> {
    let inner = line.trim().strip_prefix('|')?.strip_suffix('|')?;
    let mut cells = Vec::new();
    let mut current = String::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => current.push(chars.next()?),
            '|' => cells.push(std::mem::take(&mut current)),
            _ => current.push(c),
        }
    }
    cells.push(current);
    Some(cells.into_iter().map(|c| c.trim().to_string()).collect())
}

const TABLE_HEADER: &str = "| Feature | Rew. | p-val | i/m | significant |";

/// Markdown tables carrying every value at full precision, so that
/// [`parse_tables`] restores them exactly.
pub fn format_tables(tables: &[SignificanceTable]) -> String {
    let mut out = String::new();
    for t in tables {
        let _ = writeln!(out, "## {}", t.task);
        let _ = writeln!(out, "Q: {}", t.q);
        let _ = writeln!(out, "baseline: {}", t.baseline.as_deref().unwrap_or("-"));
        let _ = writeln!(out);
        let _ = writeln!(out, "{TABLE_HEADER}");
        let _ = writeln!(out, "|---|---:|---:|---:|---|");
        for r in &t.rows {
            let reward = r.reward.map_or("-".to_string(), |v| v.to_string());
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                escape_cell(&r.feature),
                reward,
                r.p_value,
                r.threshold,
                if r.significant { "yes" } else { "no" }
            );
        }
        let _ = writeln!(out);
    }
    out
}

pub fn parse_tables(text: &str) -> Result<Vec<SignificanceTable>, AnalysisError> {
    let mut tables: Vec<SignificanceTable> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        let err = |message: String| AnalysisError::Parse { line: i + 1, message };
        if let Some(task) = line.strip_prefix("## ") {
            tables.push(SignificanceTable {
                task: task.to_string(),
                q: f64::NAN,
                baseline: None,
                rows: Vec::new(),
            });
            continue;
        }
        if line.is_empty() || line == TABLE_HEADER || line.starts_with("|---") {
            continue;
        }
        let table = tables
            .last_mut()
            .ok_or_else(|| err("content before the first task heading".into()))?;
        let number = |s: &str, what: &str| -> Result<f64, AnalysisError> {
            s.parse().map_err(|_| err(format!("{what} {s:?} is not a number")))
        };
        if let Some(q) = line.strip_prefix("Q: ") {
            table.q = number(q, "Q")?;
        } else if let Some(b) = line.strip_prefix("baseline: ") {
            table.baseline = (b != "-").then(|| b.to_string());
        } else {
            let cells = split_cells(line).ok_or_else(|| err(format!("unrecognized line {line:?}")))?;
            if cells.len() != 5 {
                return Err(err(format!("expected 5 cells, found {}", cells.len())));
            }
            table.rows.push(SignificanceRow {
                feature: cells[0].clone(),
                reward: if cells[1] == "-" { None } else { Some(number(&cells[1], "reward")?) },
                p_value: number(&cells[2], "p-value")?,
                threshold: number(&cells[3], "threshold")?,
                significant: match cells[4].as_str() {
                    "yes" => true,
                    "no" => false,
                    other => return Err(err(format!("significance {other:?} is not yes/no"))),
                },
            });
        }
    }
    Ok(tables)
}

/// Fixed-width table rounded to three decimals for the terminal. Rows below
/// the last significant one form the grey section after the divider.
pub fn render_tables(tables: &[SignificanceTable]) -> String {
    let mut out = String::new();
    for t in tables {
        let width = t.rows.iter().map(|r| r.feature.chars().count()).max().unwrap_or(7).max(7);
        let _ = writeln!(out, "{} (Q = {}{})", t.task, t.q, t.baseline.as_ref().map_or(String::new(), |b| format!(", vs {b}")));
        let _ = writeln!(out, "{:<width$}  {:>9}  {:>7}  {:>7}", "Feature", "Rew.", "p-val", "i/m");
        let mut divided = false;
        for r in &t.rows {
            if !r.significant && !divided {
                let _ = writeln!(out, "{}", "-".repeat(width + 33));
                divided = true;
            }
            let reward = r.reward.map_or("-".to_string(), |v| format!("{v:.3}"));
            let _ = writeln!(
                out,
                "{:<width$}  {:>9}  {:>7.3}  {:>7.3}",
                r.feature, reward, r.p_value, r.threshold
            );
        }
        let significant = t.rows.iter().filter(|r| r.significant).count();
        let _ = writeln!(out, "{significant} of {} significant\n", t.rows.len());
    }
    out
}

pub fn render_relative_rewards(rows: &[RelativeRewardRow]) -> String {
    let mut out = String::new();
    if rows.is_empty() {
        return out;
    }
    let width = rows.iter().map(|r| r.condition.chars().count()).max().unwrap_or(9).max(9);
    let _ = writeln!(out, "{:<12}  {:<width$}  {:>9}  {:>7}", "Task", "Condition", "Rew.", "RR");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<12}  {:<width$}  {:>9.3}  {:>7.3}",
            r.task, r.condition, r.reward, r.relative_reward
        );
    }
    out
}
