//! Exact solver for small 0/1 integer programs.
//!
//! Programs carry exact rational coefficients. Before search every constraint
//! row and the objective are scaled to integers, so feasibility decisions are
//! never subject to floating-point round-off. The search is a depth-first
//! branch-and-bound that always branches on the lowest-index free variable and
//! tries `1` before `0`, which makes the returned optimum reproducible.

use std::fmt;

use num_bigint::BigInt;
use num_traits::{ToPrimitive, Zero};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::rational::{
    abs_sum, format_rational, lcm_of_denominators, parse_rational, rational_from_f64, Rational,
};

/// Largest enumeration the exhaustive oracle accepts.
pub const ORACLE_MAX_VARS: usize = 20;

/// Scaled integer magnitudes (per coefficient and per row sum) must stay below
/// this so that every product formed during bounding fits in an `i128`.
const SCALED_LIMIT_BITS: u64 = 62;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BipError {
    #[error("objective has {got} coefficients but the program has {expected} variables")]
    ObjectiveLength { expected: usize, got: usize },
    #[error("constraint {constraint} references variable {var} but only {num_vars} exist")]
    VarOutOfRange {
        constraint: usize,
        var: usize,
        num_vars: usize,
    },
    #[error("constraint {constraint} lists variable {var} more than once")]
    DuplicateTerm { constraint: usize, var: usize },
    #[error("coefficient is not a finite number: {0}")]
    NonFinite(f64),
    #[error("{0} exceeds the integer range the solver supports after scaling")]
    CoefficientRange(String),
    #[error("exhaustive oracle refuses {0} variables (limit {ORACLE_MAX_VARS})")]
    OracleTooLarge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "=")]
    Eq,
}

impl Relation {
    pub fn holds(self, lhs: &Rational, rhs: &Rational) -> bool {
        match self {
            Relation::Le => lhs <= rhs,
            Relation::Ge => lhs >= rhs,
            Relation::Eq => lhs == rhs,
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relation::Le => "<=",
            Relation::Ge => ">=",
            Relation::Eq => "=",
        })
    }
}

/// Rational coefficient with a JSON form that is a plain number whenever the
/// decimal literal is exact, and a `"p/q"` string otherwise.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Coef(pub Rational);

impl Coef {
    pub fn from_f64(value: f64) -> Result<Self, BipError> {
        rational_from_f64(value)
            .map(Coef)
            .ok_or(BipError::NonFinite(value))
    }

    pub fn int(value: i64) -> Self {
        Coef(Rational::from_integer(value.into()))
    }
}

impl From<Rational> for Coef {
    fn from(value: Rational) -> Self {
        Coef(value)
    }
}

impl Serialize for Coef {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let text = format_rational(&self.0);
        if text.contains('/') {
            return serializer.serialize_str(&text);
        }
        if self.0.is_integer() {
            if let Some(v) = self.0.numer().to_i64() {
                return serializer.serialize_i64(v);
            }
            return serializer.serialize_str(&text);
        }
        serializer.serialize_f64(text.parse::<f64>().map_err(serde::ser::Error::custom)?)
    }
}

impl<'de> Deserialize<'de> for Coef {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(serde_json::Number),
            Text(String),
        }
        let text = match Repr::deserialize(deserializer)? {
            Repr::Num(n) => n.to_string(),
            Repr::Text(s) => s,
        };
        parse_rational(&text)
            .map(Coef)
            .ok_or_else(|| D::Error::custom(format!("invalid rational coefficient {text:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Constraint {
    pub terms: Vec<(usize, Coef)>,
    #[serde(rename = "rel")]
    pub relation: Relation,
    pub rhs: Coef,
}

impl Constraint {
    pub fn new(terms: Vec<(usize, Coef)>, relation: Relation, rhs: Coef) -> Self {
        Self {
            terms,
            relation,
            rhs,
        }
    }

    pub fn lhs(&self, assignment: &[bool]) -> Rational {
        self.terms
            .iter()
            .filter(|(var, _)| assignment[*var])
            .map(|(_, c)| c.0.clone())
            .sum()
    }

    pub fn is_satisfied_by(&self, assignment: &[bool]) -> bool {
        self.relation.holds(&self.lhs(assignment), &self.rhs.0)
    }
}

/// A 0/1 program: optimize `objective · x` subject to linear rows over `x`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BooleanProgram {
    pub num_vars: usize,
    pub sense: Sense,
    pub objective: Vec<Coef>,
    pub constraints: Vec<Constraint>,
}

impl BooleanProgram {
    pub fn new(sense: Sense, objective: Vec<Coef>) -> Self {
        Self {
            num_vars: objective.len(),
            sense,
            objective,
            constraints: Vec::new(),
        }
    }

    pub fn push(&mut self, constraint: Constraint) {
        self.constraints.push(constraint);
    }

    pub fn validate(&self) -> Result<(), BipError> {
        if self.objective.len() != self.num_vars {
            return Err(BipError::ObjectiveLength {
                expected: self.num_vars,
                got: self.objective.len(),
            });
        }
        let mut seen = vec![usize::MAX; self.num_vars];
        for (ci, constraint) in self.constraints.iter().enumerate() {
            for &(var, _) in &constraint.terms {
                if var >= self.num_vars {
                    return Err(BipError::VarOutOfRange {
                        constraint: ci,
                        var,
                        num_vars: self.num_vars,
                    });
                }
                if seen[var] == ci {
                    return Err(BipError::DuplicateTerm { constraint: ci, var });
                }
                seen[var] = ci;
            }
        }
        Ok(())
    }

    pub fn objective_value(&self, assignment: &[bool]) -> Rational {
        self.objective
            .iter()
            .zip(assignment)
            .filter(|(_, &x)| x)
            .map(|(c, _)| c.0.clone())
            .sum()
    }

    pub fn is_satisfied_by(&self, assignment: &[bool]) -> bool {
        assignment.len() == self.num_vars
            && self.constraints.iter().all(|c| c.is_satisfied_by(assignment))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("program serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BipStatus {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BipSolution {
    pub assignment: Vec<bool>,
    pub objective_value: Rational,
    pub status: BipStatus,
}

impl BipSolution {
    fn infeasible(num_vars: usize) -> Self {
        Self {
            assignment: vec![false; num_vars],
            objective_value: Rational::zero(),
            status: BipStatus::Infeasible,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == BipStatus::Optimal
    }
}

/// Solves `program` to proven optimality, or reports it infeasible.
pub fn solve_bip(program: &BooleanProgram) -> Result<BipSolution, BipError> {
    program.validate()?;
    let model = ScaledModel::build(program)?;
    let Some(assignment) = Search::new(&model).run() else {
        return Ok(BipSolution::infeasible(program.num_vars));
    };
    assert!(
        program.is_satisfied_by(&assignment),
        "branch-and-bound returned an assignment violating the program"
    );
    Ok(BipSolution {
        objective_value: program.objective_value(&assignment),
        assignment,
        status: BipStatus::Optimal,
    })
}

/// Exhaustive reference solver: walks all `2^n` assignments in Gray-code
/// order with exact rational bookkeeping. Test and debugging use only.
pub fn enumerate_optima_oracle(program: &BooleanProgram) -> Result<BipSolution, BipError> {
    program.validate()?;
    let n = program.num_vars;
    if n > ORACLE_MAX_VARS {
        return Err(BipError::OracleTooLarge(n));
    }

    let mut columns: Vec<Vec<(usize, Rational)>> = vec![Vec::new(); n];
    for (ci, c) in program.constraints.iter().enumerate() {
        for (var, coef) in &c.terms {
            columns[*var].push((ci, coef.0.clone()));
        }
    }

    let mut x = vec![false; n];
    let mut lhs: Vec<Rational> = vec![Rational::zero(); program.constraints.len()];
    let mut objective = Rational::zero();
    let mut best: Option<(Rational, Vec<bool>)> = None;

    let better = |candidate: &Rational, incumbent: &Rational| match program.sense {
        Sense::Minimize => candidate < incumbent,
        Sense::Maximize => candidate > incumbent,
    };

    for step in 0u64..(1u64 << n) {
        if step > 0 {
            let var = step.trailing_zeros() as usize;
            x[var] = !x[var];
            let sign = if x[var] { 1 } else { -1 };
            for (ci, coef) in &columns[var] {
                if sign > 0 {
                    lhs[*ci] += coef;
                } else {
                    lhs[*ci] -= coef;
                }
            }
            if sign > 0 {
                objective += &program.objective[var].0;
            } else {
                objective -= &program.objective[var].0;
            }
        }
        let feasible = program
            .constraints
            .iter()
            .zip(&lhs)
            .all(|(c, value)| c.relation.holds(value, &c.rhs.0));
        if feasible && best.as_ref().is_none_or(|(b, _)| better(&objective, b)) {
            best = Some((objective.clone(), x.clone()));
        }
    }

    Ok(match best {
        Some((objective_value, assignment)) => BipSolution {
            assignment,
            objective_value,
            status: BipStatus::Optimal,
        },
        None => BipSolution::infeasible(n),
    })
}

/// One `Σ a_j x_j ≤ rhs` row with integer coefficients.
#[derive(Debug, Clone)]
struct Row {
    terms: Vec<(usize, i128)>,
    rhs: i128,
}

/// The program normalized to `≤` rows and a minimization objective, all in
/// integers.
#[derive(Debug)]
struct ScaledModel {
    rows: Vec<Row>,
    columns: Vec<Vec<(usize, i128)>>,
    cost: Vec<i128>,
    trivially_infeasible: bool,
}

fn to_bounded_i128(value: &BigInt, what: &str) -> Result<i128, BipError> {
    if value.bits() > SCALED_LIMIT_BITS {
        return Err(BipError::CoefficientRange(what.to_string()));
    }
    Ok(value.to_i128().expect("bounded bit length"))
}

fn scale_to_integers(values: &[Rational]) -> Vec<BigInt> {
    let lcm = lcm_of_denominators(values);
    let scaled: Vec<BigInt> = values
        .iter()
        .map(|v| (v * Rational::from_integer(lcm.clone())).to_integer())
        .collect();
    let gcd = scaled
        .iter()
        .fold(BigInt::zero(), |acc, v| num_integer::Integer::gcd(&acc, v));
    if gcd.is_zero() || gcd == BigInt::from(1) {
        scaled
    } else {
        scaled.into_iter().map(|v| v / &gcd).collect()
    }
}

impl ScaledModel {
    fn build(program: &BooleanProgram) -> Result<Self, BipError> {
        let mut rows = Vec::new();
        let mut trivially_infeasible = false;

        for (ci, constraint) in program.constraints.iter().enumerate() {
            let signs: &[i8] = match constraint.relation {
                Relation::Le => &[1],
                Relation::Ge => &[-1],
                Relation::Eq => &[1, -1],
            };
            let mut values: Vec<Rational> =
                constraint.terms.iter().map(|(_, c)| c.0.clone()).collect();
            values.push(constraint.rhs.0.clone());
            let scaled = scale_to_integers(&values);
            let label = format!("constraint {ci}");
            if abs_sum(&scaled).bits() > SCALED_LIMIT_BITS {
                return Err(BipError::CoefficientRange(label));
            }
            let (coefs, rhs) = scaled.split_at(constraint.terms.len());
            for &sign in signs {
                let sign = i128::from(sign);
                let terms: Vec<(usize, i128)> = constraint
                    .terms
                    .iter()
                    .zip(coefs)
                    .map(|((var, _), a)| Ok((*var, sign * to_bounded_i128(a, &label)?)))
                    .filter(|r| !matches!(r, Ok((_, 0))))
                    .collect::<Result<_, BipError>>()?;
                let rhs = sign * to_bounded_i128(&rhs[0], &label)?;
                if terms.is_empty() {
                    if rhs < 0 {
                        trivially_infeasible = true;
                    }
                    continue;
                }
                rows.push(Row { terms, rhs });
            }
        }

        let objective: Vec<Rational> = program.objective.iter().map(|c| c.0.clone()).collect();
        let scaled = scale_to_integers(&objective);
        if abs_sum(&scaled).bits() > SCALED_LIMIT_BITS {
            return Err(BipError::CoefficientRange("objective".into()));
        }
        let flip = if program.sense == Sense::Maximize { -1 } else { 1 };
        let cost = scaled
            .iter()
            .map(|c| Ok(flip * to_bounded_i128(c, "objective")?))
            .collect::<Result<Vec<_>, BipError>>()?;

        let mut columns = vec![Vec::new(); program.num_vars];
        for (ri, row) in rows.iter().enumerate() {
            for &(var, a) in &row.terms {
                columns[var].push((ri, a));
            }
        }

        Ok(Self {
            rows,
            columns,
            cost,
            trivially_infeasible,
        })
    }
}

const FREE: i8 = -1;

struct Search<'a> {
    model: &'a ScaledModel,
    value: Vec<i8>,
    /// Per row: fixed contribution plus the most negative free contribution.
    row_min: Vec<i128>,
    /// Fixed cost plus every free negative cost.
    cost_min: i128,
    trail: Vec<usize>,
    best: Option<(i128, Vec<bool>)>,
}

impl<'a> Search<'a> {
    fn new(model: &'a ScaledModel) -> Self {
        let row_min = model
            .rows
            .iter()
            .map(|r| r.terms.iter().map(|&(_, a)| a.min(0)).sum())
            .collect();
        let cost_min = model.cost.iter().map(|&c| c.min(0)).sum();
        Self {
            model,
            value: vec![FREE; model.cost.len()],
            row_min,
            cost_min,
            trail: Vec::new(),
            best: None,
        }
    }

    fn run(mut self) -> Option<Vec<bool>> {
        if self.model.trivially_infeasible {
            return None;
        }
        let all_rows: Vec<usize> = (0..self.model.rows.len()).collect();
        if self.propagate(all_rows) {
            self.descend(0);
        }
        self.best.map(|(_, x)| x)
    }

    fn set(&mut self, var: usize, val: bool) {
        debug_assert_eq!(self.value[var], FREE);
        self.value[var] = val as i8;
        self.trail.push(var);
        for &(row, a) in &self.model.columns[var] {
            self.row_min[row] += if val { a } else { 0 } - a.min(0);
        }
        let c = self.model.cost[var];
        self.cost_min += if val { c } else { 0 } - c.min(0);
    }

    fn undo_to(&mut self, mark: usize) {
        while self.trail.len() > mark {
            let var = self.trail.pop().expect("trail above mark");
            let val = self.value[var] == 1;
            for &(row, a) in &self.model.columns[var] {
                self.row_min[row] -= if val { a } else { 0 } - a.min(0);
            }
            let c = self.model.cost[var];
            self.cost_min -= if val { c } else { 0 } - c.min(0);
            self.value[var] = FREE;
        }
    }

    /// Unit propagation over the queued rows. Returns false on conflict.
    fn propagate(&mut self, mut queue: Vec<usize>) -> bool {
        while let Some(ri) = queue.pop() {
            let row = &self.model.rows[ri];
            let slack = row.rhs - self.row_min[ri];
            if slack < 0 {
                return false;
            }
            let forced: Vec<(usize, bool)> = row
                .terms
                .iter()
                .filter(|&&(var, a)| self.value[var] == FREE && a.abs() > slack)
                .map(|&(var, a)| (var, a < 0))
                .collect();
            for (var, val) in forced {
                if self.value[var] != FREE {
                    continue;
                }
                self.set(var, val);
                queue.extend(self.model.columns[var].iter().map(|&(r, _)| r));
            }
        }
        true
    }

    /// True when no completion of the current partial assignment can beat the
    /// incumbent, using the greedy fractional relaxation of each row on its own.
    fn bound_prunes(&self) -> bool {
        let Some((best, _)) = &self.best else {
            return false;
        };
        let best = *best;
        // Integral objective: a completion must reach `best - 1` to improve.
        if self.cost_min > best - 1 {
            return true;
        }
        for row in &self.model.rows {
            if self.row_prunes(row, best) {
                return true;
            }
        }
        false
    }

    fn row_prunes(&self, row: &Row, best: i128) -> bool {
        let mut lhs = 0i128;
        let mut repairs: Vec<(i128, i128)> = Vec::new();
        for &(var, a) in &row.terms {
            let c = self.model.cost[var];
            match self.value[var] {
                FREE => {
                    let at_cost_min = c < 0;
                    if at_cost_min {
                        lhs += a;
                    }
                    match (at_cost_min, a < 0) {
                        (false, true) => repairs.push((c, -a)),
                        (true, false) => repairs.push((-c, a)),
                        _ => {}
                    }
                }
                1 => lhs += a,
                _ => {}
            }
        }
        let mut excess = lhs - row.rhs;
        if excess <= 0 {
            return false;
        }
        repairs.sort_by(|&(c1, r1), &(c2, r2)| (c1 * r2).cmp(&(c2 * r1)));
        let mut extra = 0i128;
        for (cost, reduce) in repairs {
            if reduce >= excess {
                // Fractional last item: prune iff cost_min + extra + cost·excess/reduce > best - 1.
                let base = self.cost_min + extra - best + 1;
                return match base
                    .checked_mul(reduce)
                    .and_then(|v| v.checked_add(cost.checked_mul(excess)?))
                {
                    Some(v) => v > 0,
                    None => false,
                };
            }
            excess -= reduce;
            extra += cost;
        }
        // Row cannot be repaired at all.
        true
    }

    fn descend(&mut self, from: usize) {
        if self.bound_prunes() {
            return;
        }
        let Some(var) = (from..self.value.len()).find(|&v| self.value[v] == FREE) else {
            let cost = self.cost_min;
            if self.best.as_ref().is_none_or(|(b, _)| cost < *b) {
                self.best = Some((cost, self.value.iter().map(|&v| v == 1).collect()));
            }
            return;
        };
        for val in [true, false] {
            let mark = self.trail.len();
            self.set(var, val);
            let rows = self.model.columns[var].iter().map(|&(r, _)| r).collect();
            if self.propagate(rows) {
                self.descend(var + 1);
            }
            self.undo_to(mark);
        }
    }
}
