//! Max-coverage feature-set selection.
//!
//! Affinities are "higher is better": feature `i` covers target `j` at level
//! `δ` when `values[i][j] >= δ`. A set's perceptual risk is the worst target's
//! best coverage, and the selector maximizes it under a size budget by binary
//! search over the matrix's distinct entries, solving one covering program per
//! probe.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bip::{solve_bip, BipError, BooleanProgram, Coef, Constraint, Relation, Sense};
use crate::rational::{rational_from_f64, Rational};

#[derive(Debug, Error)]
pub enum CoverError {
    #[error("affinity matrix: {0}")]
    Matrix(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Program(#[from] BipError),
}

/// Square matrix of transfer affinities; `values[i][j]` scores source `i`
/// against target `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityMatrix {
    #[serde(rename = "features")]
    feature_names: Vec<String>,
    values: Vec<Vec<f64>>,
}

impl AffinityMatrix {
    pub fn new(feature_names: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self, CoverError> {
        let m = feature_names.len();
        if values.len() != m {
            return Err(CoverError::Matrix(format!(
                "{} feature names but {} rows",
                m,
                values.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &feature_names {
            if !seen.insert(name.as_str()) {
                return Err(CoverError::Matrix(format!("duplicate feature name {name:?}")));
            }
        }
        for (i, row) in values.iter().enumerate() {
            if row.len() != m {
                return Err(CoverError::Matrix(format!(
                    "row {} ({}) has {} entries, expected {m}",
                    i, feature_names[i], row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(CoverError::Matrix(format!(
                        "entry ({}, {}) = {v} is outside [0, 1]",
                        feature_names[i], feature_names[j]
                    )));
                }
            }
        }
        let matrix = Self {
            feature_names,
            values,
        };
        for warning in matrix.self_affinity_warnings() {
            log::warn!("{warning}");
        }
        Ok(matrix)
    }

    /// Matrix with generated names `f1..fm`.
    pub fn from_values(values: Vec<Vec<f64>>) -> Result<Self, CoverError> {
        let names = (1..=values.len()).map(|i| format!("f{i}")).collect();
        Self::new(names, values)
    }

    pub fn len(&self) -> usize {
        self.feature_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feature_names.is_empty()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn get(&self, source: usize, target: usize) -> f64 {
        self.values[source][target]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    /// Columns whose self-affinity is not the column maximum. Loading still
    /// succeeds; the caller decides whether to surface these.
    pub fn self_affinity_warnings(&self) -> Vec<String> {
        (0..self.len())
            .filter_map(|j| {
                let best = (0..self.len()).map(|i| self.values[i][j]).fold(f64::MIN, f64::max);
                (self.values[j][j] < best).then(|| {
                    format!(
                        "feature {:?} covers itself at {} but another source reaches {best}",
                        self.feature_names[j], self.values[j][j]
                    )
                })
            })
            .collect()
    }

    /// Sorted distinct entries: the only thresholds at which coverage changes.
    pub fn distinct_entries(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self.values.iter().flatten().copied().collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        all
    }

    /// Parses a delimited table: a header `source,<target names…>` then one
    /// row per source. Commas, tabs or runs of whitespace separate fields.
    pub fn from_delimited(text: &str) -> Result<Self, CoverError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let split = |line: &str| -> Vec<String> {
            if line.contains(',') {
                line.split(',').map(|f| f.trim().to_string()).collect()
            } else {
                line.split_whitespace().map(str::to_string).collect()
            }
        };

        let Some((header_line, header)) = lines.next() else {
            return Err(CoverError::Parse {
                line: 1,
                message: "empty affinity file".into(),
            });
        };
        let header = split(header);
        if header.first().map(String::as_str) != Some("source") {
            return Err(CoverError::Parse {
                line: header_line,
                message: "header must start with `source`".into(),
            });
        }
        let names: Vec<String> = header[1..].to_vec();
        let m = names.len();

        let mut rows: Vec<Option<Vec<f64>>> = vec![None; m];
        for (line_no, line) in lines {
            let fields = split(line);
            if fields.len() != m + 1 {
                return Err(CoverError::Parse {
                    line: line_no,
                    message: format!("expected {} fields, found {}", m + 1, fields.len()),
                });
            }
            let Some(index) = names.iter().position(|n| *n == fields[0]) else {
                return Err(CoverError::Parse {
                    line: line_no,
                    message: format!("source {:?} is not a header feature", fields[0]),
                });
            };
            if rows[index].is_some() {
                return Err(CoverError::Parse {
                    line: line_no,
                    message: format!("source {:?} appears twice", fields[0]),
                });
            }
            let values = fields[1..]
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| CoverError::Parse {
                            line: line_no,
                            message: format!("{f:?} is not a number"),
                        })
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows[index] = Some(values);
        }
        let values = rows
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                r.ok_or_else(|| CoverError::Parse {
                    line: header_line,
                    message: format!("no row for source {:?}", names[i]),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(names, values)
    }

    pub fn from_json(text: &str) -> Result<Self, CoverError> {
        let raw: AffinityMatrix = serde_json::from_str(text).map_err(|e| CoverError::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        Self::new(raw.feature_names, raw.values)
    }

    /// JSON when the text starts with `{`, delimited otherwise.
    pub fn parse(text: &str) -> Result<Self, CoverError> {
        if text.trim_start().starts_with('{') {
            Self::from_json(text)
        } else {
            Self::from_delimited(text)
        }
    }
}

/// Optional tie-break among optimal sets. `MaxMeanAffinity` prefers sets whose
/// members have the largest mean outgoing affinity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondaryObjective {
    #[default]
    None,
    MaxMeanAffinity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverStatus {
    Feasible,
    Infeasible,
    /// The matrix had no features.
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverSolution {
    pub selected: Vec<usize>,
    pub threshold_delta: f64,
    pub solver_calls: usize,
    pub status: CoverStatus,
    /// Thresholds handed to the solver, in probe order.
    pub probed_deltas: Vec<f64>,
}

/// JSON form of a [`CoverSolution`] with feature names resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverReport {
    pub selected: Vec<String>,
    pub delta: Option<f64>,
    pub solver_calls: usize,
    pub status: CoverStatus,
}

impl CoverSolution {
    pub fn is_feasible(&self) -> bool {
        self.status == CoverStatus::Feasible
    }

    pub fn report(&self, matrix: &AffinityMatrix) -> CoverReport {
        CoverReport {
            selected: self
                .selected
                .iter()
                .map(|&i| matrix.feature_names()[i].clone())
                .collect(),
            delta: self.is_feasible().then_some(self.threshold_delta),
            solver_calls: self.solver_calls,
            status: self.status,
        }
    }

    fn empty() -> Self {
        Self {
            selected: Vec::new(),
            threshold_delta: 0.0,
            solver_calls: 0,
            status: CoverStatus::Empty,
            probed_deltas: Vec::new(),
        }
    }
}

impl fmt::Display for CoverReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.status {
            CoverStatus::Feasible => {
                writeln!(f, "selected ({}):", self.selected.len())?;
                for name in &self.selected {
                    writeln!(f, "  {name}")?;
                }
                write!(
                    f,
                    "delta = {}  (solver calls: {})",
                    self.delta.unwrap_or(0.0),
                    self.solver_calls
                )
            }
            CoverStatus::Infeasible => {
                write!(f, "infeasible (solver calls: {})", self.solver_calls)
            }
            CoverStatus::Empty => write!(f, "empty feature dictionary"),
        }
    }
}

/// Worst-case coverage of the dictionary by `selected`:
/// `min_j max_{i ∈ selected} values[i][j]`.
pub fn perceptual_risk(matrix: &AffinityMatrix, selected: &[usize]) -> Result<f64, CoverError> {
    if selected.is_empty() {
        return Err(CoverError::Input("perceptual risk of an empty set".into()));
    }
    if let Some(&bad) = selected.iter().find(|&&i| i >= matrix.len()) {
        return Err(CoverError::Input(format!(
            "feature index {bad} out of range for {} features",
            matrix.len()
        )));
    }
    Ok((0..matrix.len())
        .map(|j| {
            selected
                .iter()
                .map(|&i| matrix.get(i, j))
                .fold(f64::MIN, f64::max)
        })
        .fold(f64::INFINITY, f64::min))
}

fn check_delta(delta: f64) -> Result<(), CoverError> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(CoverError::Input(format!("threshold {delta} is outside [0, 1]")));
    }
    Ok(())
}

fn cover_rows(matrix: &AffinityMatrix, delta: f64, program: &mut BooleanProgram) {
    for j in 0..matrix.len() {
        let terms = (0..matrix.len())
            .filter(|&i| matrix.get(i, j) >= delta)
            .map(|i| (i, Coef::int(1)))
            .collect();
        program.push(Constraint::new(terms, Relation::Ge, Coef::int(1)));
    }
}

/// Minimum-size δ-cover program: minimize `Σ x_i` subject to, for each target
/// `j`, `Σ_{i : values[i][j] >= δ} x_i >= 1`.
pub fn build_cover_program(
    matrix: &AffinityMatrix,
    delta: f64,
) -> Result<BooleanProgram, CoverError> {
    check_delta(delta)?;
    let mut program = BooleanProgram::new(Sense::Minimize, vec![Coef::int(1); matrix.len()]);
    cover_rows(matrix, delta, &mut program);
    Ok(program)
}

fn objective(
    matrix: &AffinityMatrix,
    secondary: SecondaryObjective,
) -> Result<Vec<Coef>, CoverError> {
    let m = matrix.len();
    match secondary {
        SecondaryObjective::None => Ok(vec![Coef::int(1); m]),
        SecondaryObjective::MaxMeanAffinity => {
            // size·(m+1) − Σ mean-affinity: the size term dominates since the
            // affinity term is at most m.
            let weight = Rational::from_integer((m as i64 + 1).into());
            (0..m)
                .map(|i| {
                    let mut total = Rational::from_integer(0.into());
                    for j in 0..m {
                        total += rational_from_f64(matrix.get(i, j))
                            .ok_or(BipError::NonFinite(matrix.get(i, j)))?;
                    }
                    let mean = total / Rational::from_integer((m as i64).into());
                    Ok(Coef(weight.clone() - mean))
                })
                .collect()
        }
    }
}

fn solve_at(
    matrix: &AffinityMatrix,
    delta: f64,
    budget: Option<usize>,
    secondary: SecondaryObjective,
) -> Result<Option<Vec<usize>>, CoverError> {
    let mut program = BooleanProgram::new(Sense::Minimize, objective(matrix, secondary)?);
    cover_rows(matrix, delta, &mut program);
    if let Some(k) = budget {
        let terms = (0..matrix.len()).map(|i| (i, Coef::int(1))).collect();
        program.push(Constraint::new(terms, Relation::Le, Coef::int(k as i64)));
    }
    let solution = solve_bip(&program)?;
    Ok(solution.is_optimal().then(|| {
        solution
            .assignment
            .iter()
            .enumerate()
            .filter(|(_, &x)| x)
            .map(|(i, _)| i)
            .collect()
    }))
}

/// Smallest set whose perceptual risk is at least `delta`.
pub fn min_set_for_threshold(
    matrix: &AffinityMatrix,
    delta: f64,
) -> Result<CoverSolution, CoverError> {
    min_set_for_threshold_with(matrix, delta, SecondaryObjective::None)
}

pub fn min_set_for_threshold_with(
    matrix: &AffinityMatrix,
    delta: f64,
    secondary: SecondaryObjective,
) -> Result<CoverSolution, CoverError> {
    check_delta(delta)?;
    if matrix.is_empty() {
        return Ok(CoverSolution::empty());
    }
    let found = solve_at(matrix, delta, None, secondary)?;
    Ok(match found {
        Some(selected) => CoverSolution {
            threshold_delta: perceptual_risk(matrix, &selected)?,
            selected,
            solver_calls: 1,
            status: CoverStatus::Feasible,
            probed_deltas: vec![delta],
        },
        None => CoverSolution {
            selected: Vec::new(),
            threshold_delta: delta,
            solver_calls: 1,
            status: CoverStatus::Infeasible,
            probed_deltas: vec![delta],
        },
    })
}

/// Set of at most `k` features with the largest achievable threshold.
pub fn max_threshold_for_size(
    matrix: &AffinityMatrix,
    k: usize,
) -> Result<CoverSolution, CoverError> {
    max_threshold_for_size_with(matrix, k, SecondaryObjective::None)
}

pub fn max_threshold_for_size_with(
    matrix: &AffinityMatrix,
    k: usize,
    secondary: SecondaryObjective,
) -> Result<CoverSolution, CoverError> {
    if k < 1 {
        return Err(CoverError::Input("set size budget must be at least 1".into()));
    }
    if matrix.is_empty() {
        return Ok(CoverSolution::empty());
    }

    // Every column reaches the smallest entry, so any single feature is a
    // cover at candidates[0]; only the higher candidates need probing.
    let candidates = matrix.distinct_entries();
    let mut probed = Vec::new();
    let mut best: Option<Vec<usize>> = None;
    let (mut lo, mut hi) = (0usize, candidates.len() - 1);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        probed.push(candidates[mid]);
        match solve_at(matrix, candidates[mid], Some(k), secondary)? {
            Some(selected) => {
                best = Some(selected);
                lo = mid;
            }
            None => hi = mid - 1,
        }
    }
    let selected = match best {
        Some(selected) => selected,
        None => {
            probed.push(candidates[0]);
            solve_at(matrix, candidates[0], Some(k), secondary)?
                .expect("lowest matrix entry is always coverable by one feature")
        }
    };
    Ok(CoverSolution {
        threshold_delta: perceptual_risk(matrix, &selected)?,
        selected,
        solver_calls: probed.len(),
        status: CoverStatus::Feasible,
        probed_deltas: probed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> AffinityMatrix {
        AffinityMatrix::from_values(vec![
            vec![1.0, 0.9, 0.2],
            vec![0.1, 1.0, 0.3],
            vec![0.4, 0.2, 1.0],
        ])
        .unwrap()
    }

    #[test]
    fn zero_threshold_needs_one_feature() {
        let a = fixture();
        let p = build_cover_program(&a, 0.0).unwrap();
        assert!(p.constraints.iter().all(|c| c.terms.len() == 3));
        let s = min_set_for_threshold(&a, 0.0).unwrap();
        assert_eq!(s.selected.len(), 1);
    }

    #[test]
    fn threshold_above_every_entry_is_infeasible() {
        let a = AffinityMatrix::from_values(vec![vec![0.5, 0.4], vec![0.3, 0.6]]).unwrap();
        let p = build_cover_program(&a, 0.7).unwrap();
        assert!(p.constraints.iter().any(|c| c.terms.is_empty()));
        let s = min_set_for_threshold(&a, 0.7).unwrap();
        assert_eq!(s.status, CoverStatus::Infeasible);
        assert!(s.selected.is_empty());
    }

    #[test]
    fn fixture_cover_at_point_nine() {
        let s = min_set_for_threshold(&fixture(), 0.9).unwrap();
        assert_eq!(s.selected, vec![0, 2]);
        assert_eq!(s.threshold_delta, 0.9);
    }

    #[test]
    fn singleton_matrix() {
        let a = AffinityMatrix::from_values(vec![vec![1.0]]).unwrap();
        let s = min_set_for_threshold(&a, 1.0).unwrap();
        assert_eq!(s.selected, vec![0]);
    }

    #[test]
    fn budget_examples() {
        let a = fixture();
        let one = max_threshold_for_size(&a, 1).unwrap();
        assert_eq!((one.selected.clone(), one.threshold_delta), (vec![0], 0.2));
        let two = max_threshold_for_size(&a, 2).unwrap();
        assert_eq!((two.selected.clone(), two.threshold_delta), (vec![0, 2], 0.9));
        let all = max_threshold_for_size(&a, 3).unwrap();
        assert_eq!(all.threshold_delta, 1.0);
        assert_eq!(all.selected, vec![0, 1, 2]);
        for s in [one, two, all] {
            assert!(s.solver_calls <= 5, "{} calls", s.solver_calls);
        }
    }

    #[test]
    fn risk_examples() {
        let a = fixture();
        assert_eq!(perceptual_risk(&a, &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(perceptual_risk(&a, &[0, 2]).unwrap(), 0.9);
        assert_eq!(perceptual_risk(&a, &[1]).unwrap(), 0.1);
        assert!(perceptual_risk(&a, &[]).is_err());
        assert!(perceptual_risk(&a, &[3]).is_err());
    }

    #[test]
    fn input_errors() {
        let a = fixture();
        assert!(max_threshold_for_size(&a, 0).is_err());
        assert!(min_set_for_threshold(&a, 1.5).is_err());
        assert!(AffinityMatrix::from_values(vec![vec![1.0, 2.0], vec![0.0, 1.0]]).is_err());
        assert!(AffinityMatrix::from_values(vec![vec![1.0, 0.5]]).is_err());
    }

    #[test]
    fn empty_matrix_gives_empty_solution() {
        let a = AffinityMatrix::from_values(vec![]).unwrap();
        assert_eq!(max_threshold_for_size(&a, 1).unwrap().status, CoverStatus::Empty);
        assert_eq!(min_set_for_threshold(&a, 0.5).unwrap().status, CoverStatus::Empty);
    }

    #[test]
    fn self_affinity_warning_is_not_fatal() {
        let a = AffinityMatrix::from_values(vec![vec![0.5, 0.2], vec![0.9, 1.0]]).unwrap();
        assert_eq!(a.self_affinity_warnings().len(), 1);
    }

    #[test]
    fn secondary_objective_breaks_ties_by_mean_affinity() {
        // Both singletons reach 0.2; f3 has the larger row mean.
        let a = AffinityMatrix::from_values(vec![
            vec![1.0, 0.2, 0.2],
            vec![0.1, 1.0, 0.1],
            vec![0.9, 0.9, 0.2],
        ])
        .unwrap();
        let plain = max_threshold_for_size(&a, 1).unwrap();
        assert_eq!(plain.selected, vec![0]);
        let tie = max_threshold_for_size_with(&a, 1, SecondaryObjective::MaxMeanAffinity).unwrap();
        assert_eq!(tie.selected, vec![2]);
        assert_eq!(tie.threshold_delta, plain.threshold_delta);
    }

    #[test]
    fn parses_delimited_and_json() {
        let text = "source,a,b\na,1.0,0.5\nb,0.25,1\n";
        let a = AffinityMatrix::parse(text).unwrap();
        assert_eq!(a.get(1, 0), 0.25);
        let reordered = "source\ta\tb\nb\t0.25\t1\na\t1.0\t0.5\n";
        assert_eq!(AffinityMatrix::parse(reordered).unwrap(), a);
        let json = r#"{"features":["a","b"],"values":[[1.0,0.5],[0.25,1.0]]}"#;
        assert_eq!(AffinityMatrix::parse(json).unwrap(), a);

        let bad = "source,a,b\na,1.0,0.5\nb,0.25,x\n";
        match AffinityMatrix::parse(bad) {
            Err(CoverError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
