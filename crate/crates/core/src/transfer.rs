//! Transfer-graph selection where a transfer may draw on several source
//! features.
//!
//! Variable layout of the generated program: indices `[0, |E|)` are edges and
//! `[|E|, |E| + |F|)` are inclusion flags over the full feature dictionary
//! `F`, since sources need not be targets themselves.

use std::collections::{BTreeSet, HashMap};

use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bip::{solve_bip, BipError, BooleanProgram, Coef, Constraint, Relation, Sense};
use crate::rational::{lcm_of_denominators, rational_from_f64, rational_to_f64, Rational};

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("transfer problem: {0}")]
    Invalid(String),
    #[error("transfer problem JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Program(#[from] BipError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferEdge {
    pub sources: Vec<String>,
    pub target: String,
    #[serde(rename = "p")]
    pub performance: f64,
}

impl TransferEdge {
    pub fn new(sources: &[&str], target: &str, performance: f64) -> Self {
        Self {
            sources: sources.iter().map(|s| s.to_string()).collect(),
            target: target.to_string(),
            performance,
        }
    }

    pub fn is_self_edge(&self) -> bool {
        self.sources.len() == 1 && self.sources[0] == self.target
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    /// Fewest active features.
    MinSize,
    /// Largest importance-weighted performance; fewest features among ties.
    #[default]
    #[serde(alias = "max_perf")]
    MaxPerformance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferProblem {
    pub features: Vec<String>,
    pub targets: Vec<String>,
    /// One positive weight per entry of `targets`.
    #[serde(rename = "importances")]
    pub target_importance: Vec<f64>,
    pub edges: Vec<TransferEdge>,
    #[serde(default)]
    pub delta: f64,
    #[serde(rename = "mode", default)]
    pub objective_mode: ObjectiveMode,
}

/// On-disk form; importances default to 1 and self-edges may be generated
/// from a `self_affinity` map.
#[derive(Debug, Deserialize)]
struct ProblemFile {
    features: Vec<String>,
    targets: Vec<String>,
    #[serde(default)]
    importances: Option<Vec<f64>>,
    edges: Vec<TransferEdge>,
    #[serde(default)]
    delta: f64,
    #[serde(default)]
    mode: ObjectiveMode,
    #[serde(default)]
    self_affinity: HashMap<String, f64>,
}

impl TransferProblem {
    pub fn from_json(text: &str) -> Result<Self, TransferError> {
        let file: ProblemFile = serde_json::from_str(text)?;
        let importances = file
            .importances
            .unwrap_or_else(|| vec![1.0; file.targets.len()]);
        let mut problem = TransferProblem {
            features: file.features,
            targets: file.targets,
            target_importance: importances,
            edges: file.edges,
            delta: file.delta,
            objective_mode: file.mode,
        };
        let mut generated: Vec<(&String, f64)> = file.self_affinity.iter().map(|(k, v)| (k, *v)).collect();
        generated.sort_by(|a, b| a.0.cmp(b.0));
        for (feature, p) in generated {
            problem.add_self_edge(feature, p);
        }
        problem.validate()?;
        Ok(problem)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("problem serializes")
    }

    /// Adds `({feature}, feature)` with performance `p` unless one exists.
    pub fn add_self_edge(&mut self, feature: &str, p: f64) {
        let exists = self
            .edges
            .iter()
            .any(|e| e.is_self_edge() && e.target == feature);
        if !exists {
            self.edges.push(TransferEdge::new(&[feature], feature, p));
        }
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f == name)
    }

    pub fn validate(&self) -> Result<(), TransferError> {
        let invalid = |m: String| Err(TransferError::Invalid(m));
        let known: BTreeSet<&str> = self.features.iter().map(String::as_str).collect();
        if known.len() != self.features.len() {
            return invalid("duplicate feature names".into());
        }
        if self.target_importance.len() != self.targets.len() {
            return invalid(format!(
                "{} importances for {} targets",
                self.target_importance.len(),
                self.targets.len()
            ));
        }
        let mut seen_targets = BTreeSet::new();
        for (t, r) in self.targets.iter().zip(&self.target_importance) {
            if !known.contains(t.as_str()) {
                return invalid(format!("target {t:?} is not a known feature"));
            }
            if !seen_targets.insert(t.as_str()) {
                return invalid(format!("target {t:?} listed twice"));
            }
            if !(r.is_finite() && *r > 0.0) {
                return invalid(format!("importance of {t:?} must be positive, got {r}"));
            }
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return invalid(format!("delta {} is outside [0, 1]", self.delta));
        }
        for (i, edge) in self.edges.iter().enumerate() {
            if edge.sources.is_empty() {
                return invalid(format!("edge {i} has no sources"));
            }
            let unique: BTreeSet<&str> = edge.sources.iter().map(String::as_str).collect();
            if unique.len() != edge.sources.len() {
                return invalid(format!("edge {i} repeats a source"));
            }
            for name in edge.sources.iter().chain(std::iter::once(&edge.target)) {
                if !known.contains(name.as_str()) {
                    return invalid(format!("edge {i} names unknown feature {name:?}"));
                }
            }
            if !(0.0..=1.0).contains(&edge.performance) {
                return invalid(format!(
                    "edge {i} performance {} is outside [0, 1]",
                    edge.performance
                ));
            }
        }
        Ok(())
    }

    fn importance_of(&self, target: &str) -> Option<f64> {
        self.targets
            .iter()
            .position(|t| t == target)
            .map(|j| self.target_importance[j])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferStatus {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferSolution {
    /// Indices into the edge list of the problem that was solved.
    pub chosen_edges: Vec<usize>,
    pub active_features: Vec<String>,
    pub objective_value: Rational,
    pub status: TransferStatus,
    /// Threshold the solution was computed at.
    pub delta: f64,
    pub solver_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub chosen_edges: Vec<usize>,
    pub transfers: Vec<TransferEdge>,
    pub active_features: Vec<String>,
    pub objective_value: f64,
    pub status: TransferStatus,
    pub delta: f64,
    pub solver_calls: usize,
}

impl TransferSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == TransferStatus::Optimal
    }

    fn infeasible(delta: f64, solver_calls: usize) -> Self {
        Self {
            chosen_edges: Vec::new(),
            active_features: Vec::new(),
            objective_value: Rational::zero(),
            status: TransferStatus::Infeasible,
            delta,
            solver_calls,
        }
    }

    pub fn report(&self, problem: &TransferProblem) -> TransferReport {
        TransferReport {
            chosen_edges: self.chosen_edges.clone(),
            transfers: self
                .chosen_edges
                .iter()
                .map(|&i| problem.edges[i].clone())
                .collect(),
            active_features: self.active_features.clone(),
            objective_value: rational_to_f64(&self.objective_value),
            status: self.status,
            delta: self.delta,
            solver_calls: self.solver_calls,
        }
    }
}

/// Keeps the edges whose performance reaches `delta`.
pub fn filter_edges(problem: &TransferProblem) -> TransferProblem {
    TransferProblem {
        edges: problem
            .edges
            .iter()
            .filter(|e| e.performance >= problem.delta)
            .cloned()
            .collect(),
        ..problem.clone()
    }
}

fn edge_weight(problem: &TransferProblem, edge: &TransferEdge) -> Result<Rational, TransferError> {
    let Some(r) = problem.importance_of(&edge.target) else {
        return Ok(Rational::zero());
    };
    let r = rational_from_f64(r).ok_or(BipError::NonFinite(r))?;
    let p = rational_from_f64(edge.performance).ok_or(BipError::NonFinite(edge.performance))?;
    Ok(r * p)
}

fn build_program(
    problem: &TransferProblem,
    feature_budget: Option<usize>,
) -> Result<BooleanProgram, TransferError> {
    problem.validate()?;
    let n_edges = problem.edges.len();
    let n_features = problem.features.len();
    let feature_var = |name: &str| n_edges + problem.feature_index(name).expect("validated");

    let objective: Vec<Coef> = match problem.objective_mode {
        ObjectiveMode::MinSize => (0..n_edges + n_features)
            .map(|v| Coef::int(i64::from(v >= n_edges)))
            .collect(),
        ObjectiveMode::MaxPerformance => {
            // Lexicographic: distinct weighted sums differ by at least 1/D, so
            // a per-feature penalty of 1/(D·(|F|+1)) can only break ties.
            let weights: Vec<Rational> = problem
                .edges
                .iter()
                .map(|e| edge_weight(problem, e))
                .collect::<Result<_, _>>()?;
            let denom = lcm_of_denominators(&weights);
            let penalty = Rational::new(
                num_bigint::BigInt::one(),
                denom * num_bigint::BigInt::from(n_features + 1),
            );
            weights
                .into_iter()
                .map(Coef)
                .chain((0..n_features).map(|_| Coef(-penalty.clone())))
                .collect()
        }
    };
    let sense = match problem.objective_mode {
        ObjectiveMode::MinSize => Sense::Minimize,
        ObjectiveMode::MaxPerformance => Sense::Maximize,
    };
    let mut program = BooleanProgram::new(sense, objective);

    // Source closure: |sources(i)|·x_i − Σ_{s ∈ sources(i)} x_{|E|+s} ≤ 0.
    for (i, edge) in problem.edges.iter().enumerate() {
        let mut terms = vec![(i, Coef::int(edge.sources.len() as i64))];
        terms.extend(edge.sources.iter().map(|s| (feature_var(s), Coef::int(-1))));
        program.push(Constraint::new(terms, Relation::Le, Coef::int(0)));
    }

    // Exactly one incoming transfer per target, as a ≤ 1 / ≥ 1 pair.
    for target in &problem.targets {
        let incoming: Vec<(usize, Coef)> = problem
            .edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.target == *target)
            .map(|(i, _)| (i, Coef::int(1)))
            .collect();
        program.push(Constraint::new(incoming.clone(), Relation::Le, Coef::int(1)));
        program.push(Constraint::new(incoming, Relation::Ge, Coef::int(1)));
    }

    // Edges into features outside the target set carry no requirement; pin
    // them off so they never appear as spurious selections.
    for (i, edge) in problem.edges.iter().enumerate() {
        if problem.importance_of(&edge.target).is_none() {
            program.push(Constraint::new(vec![(i, Coef::int(1))], Relation::Le, Coef::int(0)));
        }
    }

    if let Some(budget) = feature_budget {
        let terms = (0..n_features).map(|f| (n_edges + f, Coef::int(1))).collect();
        program.push(Constraint::new(terms, Relation::Le, Coef::int(budget as i64)));
    }
    Ok(program)
}

/// Boolean program over edge and feature variables for an already filtered
/// problem.
pub fn build_transfer_program(problem: &TransferProblem) -> Result<BooleanProgram, TransferError> {
    build_program(problem, None)
}

/// Checks one incoming edge per target and source closure.
pub fn check_structure(
    problem: &TransferProblem,
    chosen_edges: &[usize],
    active_features: &[String],
) -> Result<(), String> {
    for target in &problem.targets {
        let count = chosen_edges
            .iter()
            .filter(|&&i| problem.edges[i].target == *target)
            .count();
        if count != 1 {
            return Err(format!("target {target:?} has {count} incoming transfers"));
        }
    }
    let active: BTreeSet<&str> = active_features.iter().map(String::as_str).collect();
    for &i in chosen_edges {
        if let Some(missing) = problem.edges[i]
            .sources
            .iter()
            .find(|s| !active.contains(s.as_str()))
        {
            return Err(format!("edge {i} uses inactive source {missing:?}"));
        }
    }
    Ok(())
}

/// Objective of a decoded solution: weighted performance or active-set size.
pub fn solution_value(
    problem: &TransferProblem,
    chosen_edges: &[usize],
    active_features: &[String],
) -> Result<Rational, TransferError> {
    match problem.objective_mode {
        ObjectiveMode::MinSize => Ok(Rational::from_integer(active_features.len().into())),
        ObjectiveMode::MaxPerformance => chosen_edges
            .iter()
            .map(|&i| edge_weight(problem, &problem.edges[i]))
            .sum(),
    }
}

/// Chosen edge indices and active feature names.
type Choice = (Vec<usize>, Vec<String>);

fn solve_filtered(problem: &TransferProblem, budget: Option<usize>) -> Result<Option<Choice>, TransferError> {
    let filtered = filter_edges(problem);
    let kept: Vec<usize> = problem
        .edges
        .iter()
        .enumerate()
        .filter(|(_, e)| e.performance >= problem.delta)
        .map(|(i, _)| i)
        .collect();
    let program = build_program(&filtered, budget)?;
    let solution = solve_bip(&program)?;
    if !solution.is_optimal() {
        return Ok(None);
    }
    let n_edges = filtered.edges.len();
    let chosen: Vec<usize> = (0..n_edges)
        .filter(|&i| solution.assignment[i])
        .map(|i| kept[i])
        .collect();
    let active: Vec<String> = problem
        .features
        .iter()
        .enumerate()
        .filter(|(f, _)| solution.assignment[n_edges + f])
        .map(|(_, name)| name.clone())
        .collect();
    check_structure(problem, &chosen, &active)
        .map_err(|e| TransferError::Invalid(format!("solver produced an invalid subgraph: {e}")))?;
    Ok(Some((chosen, active)))
}

/// Filters by `problem.delta`, solves, and decodes the chosen subgraph.
pub fn solve_transfer(problem: &TransferProblem) -> Result<TransferSolution, TransferError> {
    problem.validate()?;
    Ok(match solve_filtered(problem, None)? {
        Some((chosen_edges, active_features)) => TransferSolution {
            objective_value: solution_value(problem, &chosen_edges, &active_features)?,
            chosen_edges,
            active_features,
            status: TransferStatus::Optimal,
            delta: problem.delta,
            solver_calls: 1,
        },
        None => TransferSolution::infeasible(problem.delta, 1),
    })
}

/// Largest threshold (over the distinct edge performances) that still admits
/// a solution with at most `max_set_size` active features.
pub fn min_delta_schedule(
    problem: &TransferProblem,
    max_set_size: usize,
) -> Result<TransferSolution, TransferError> {
    problem.validate()?;
    if max_set_size < 1 {
        return Err(TransferError::Invalid("feature budget must be at least 1".into()));
    }
    let mut candidates: Vec<f64> = problem
        .edges
        .iter()
        .filter(|e| problem.importance_of(&e.target).is_some())
        .map(|e| e.performance)
        .collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let at = |delta: f64| TransferProblem {
        delta,
        ..problem.clone()
    };
    let mut calls = 0;
    let mut best: Option<(f64, Vec<usize>, Vec<String>)> = None;
    // lo = number of candidates known feasible from the bottom.
    let (mut lo, mut hi) = (0usize, candidates.len());
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        let delta = candidates[mid - 1];
        calls += 1;
        match solve_filtered(&at(delta), Some(max_set_size))? {
            Some((edges, features)) => {
                best = Some((delta, edges, features));
                lo = mid;
            }
            None => hi = mid - 1,
        }
    }

    Ok(match best {
        Some((delta, chosen_edges, active_features)) => {
            let solved = at(delta);
            TransferSolution {
                objective_value: solution_value(&solved, &chosen_edges, &active_features)?,
                chosen_edges,
                active_features,
                status: TransferStatus::Optimal,
                delta,
                solver_calls: calls,
            }
        }
        None => TransferSolution::infeasible(problem.delta, calls),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_self_edge() -> TransferProblem {
        TransferProblem {
            features: vec!["t".into()],
            targets: vec!["t".into()],
            target_importance: vec![1.0],
            edges: vec![TransferEdge::new(&["t"], "t", 1.0)],
            delta: 0.0,
            objective_mode: ObjectiveMode::MaxPerformance,
        }
    }

    fn two_routes(mode: ObjectiveMode) -> TransferProblem {
        TransferProblem {
            features: vec!["t".into(), "s1".into(), "s2".into()],
            targets: vec!["t".into()],
            target_importance: vec![1.0],
            edges: vec![
                TransferEdge::new(&["s1"], "t", 0.9),
                TransferEdge::new(&["s1", "s2"], "t", 0.95),
                TransferEdge::new(&["s1"], "s1", 1.0),
                TransferEdge::new(&["s2"], "s2", 1.0),
            ],
            delta: 0.0,
            objective_mode: mode,
        }
    }

    fn perf(edges: &[f64], delta: f64) -> TransferProblem {
        TransferProblem {
            features: vec!["a".into()],
            targets: vec!["a".into()],
            target_importance: vec![1.0],
            edges: edges.iter().map(|&p| TransferEdge::new(&["a"], "a", p)).collect(),
            delta,
            objective_mode: ObjectiveMode::MaxPerformance,
        }
    }

    #[test]
    fn filter_examples() {
        assert_eq!(filter_edges(&perf(&[0.3, 0.6, 0.9], 0.0)).edges.len(), 3);
        assert!(filter_edges(&perf(&[0.3, 0.6, 0.9], 1.0)).edges.is_empty());
        let kept: Vec<f64> = filter_edges(&perf(&[0.3, 0.6, 0.9], 0.5))
            .edges
            .iter()
            .map(|e| e.performance)
            .collect();
        assert_eq!(kept, vec![0.6, 0.9]);
    }

    #[test]
    fn program_layout() {
        let p = build_transfer_program(&two_routes(ObjectiveMode::MinSize)).unwrap();
        assert_eq!(p.num_vars, 4 + 3);
        // Closure row for the two-source edge.
        let closure = &p.constraints[1];
        assert_eq!(closure.terms[0], (1, Coef::int(2)));
        assert_eq!(&closure.terms[1..], &[(5, Coef::int(-1)), (6, Coef::int(-1))]);
    }

    #[test]
    fn single_self_edge_is_chosen() {
        let s = solve_transfer(&single_self_edge()).unwrap();
        assert_eq!(s.chosen_edges, vec![0]);
        assert_eq!(s.active_features, vec!["t".to_string()]);
        assert_eq!(s.objective_value, Rational::one());
    }

    #[test]
    fn max_performance_prefers_two_source_edge() {
        let s = solve_transfer(&two_routes(ObjectiveMode::MaxPerformance)).unwrap();
        assert_eq!(s.chosen_edges, vec![1]);
        assert_eq!(s.active_features, vec!["s1".to_string(), "s2".to_string()]);
        assert_eq!(s.objective_value, Rational::new(19.into(), 20.into()));
    }

    #[test]
    fn min_size_prefers_single_source() {
        let s = solve_transfer(&two_routes(ObjectiveMode::MinSize)).unwrap();
        assert_eq!(s.chosen_edges, vec![0]);
        assert_eq!(s.active_features, vec!["s1".to_string()]);
        assert_eq!(s.objective_value, Rational::one());
    }

    #[test]
    fn target_without_edges_is_infeasible() {
        let mut p = two_routes(ObjectiveMode::MaxPerformance);
        p.delta = 0.99;
        assert_eq!(solve_transfer(&p).unwrap().status, TransferStatus::Infeasible);
    }

    #[test]
    fn schedule_examples() {
        let s = min_delta_schedule(&single_self_edge(), 1).unwrap();
        assert_eq!(s.delta, 1.0);
        let p = two_routes(ObjectiveMode::MaxPerformance);
        let one = min_delta_schedule(&p, 1).unwrap();
        assert_eq!((one.delta, one.chosen_edges.clone()), (0.9, vec![0]));
        let two = min_delta_schedule(&p, 2).unwrap();
        assert_eq!((two.delta, two.chosen_edges.clone()), (0.95, vec![1]));
        assert!(min_delta_schedule(&p, 0).is_err());
    }

    #[test]
    fn json_ingestion_generates_self_edges() {
        let text = r#"{"features":["a","b"],"targets":["a","b"],
            "edges":[{"sources":["a"],"target":"b","p":0.7}],
            "self_affinity":{"a":1.0,"b":0.8},"mode":"min_size"}"#;
        let p = TransferProblem::from_json(text).unwrap();
        assert_eq!(p.edges.len(), 3);
        assert_eq!(p.target_importance, vec![1.0, 1.0]);
        let s = solve_transfer(&p).unwrap();
        assert_eq!(s.active_features, vec!["a".to_string()]);

        let unknown = r#"{"features":["a"],"targets":["a"],"edges":[{"sources":["z"],"target":"a","p":0.5}]}"#;
        assert!(matches!(TransferProblem::from_json(unknown), Err(TransferError::Invalid(_))));
    }
}
