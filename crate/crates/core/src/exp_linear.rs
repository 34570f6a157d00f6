//! Joint tail probabilities of nonnegative linear combinations of i.i.d.
//! unit-rate exponentials.
//!
//! A [`ConjunctionSystem`] `(A, b)` stands for the event `{A z > b}` where
//! `z` is a vector of independent `Exp(1)` variables. The boundary of the
//! event has measure zero, so `>` and `>=` give the same probability and the
//! two are used interchangeably.
//!
//! Two memoryless-shift recursions shrink a system:
//!
//! * a row with a single positive coefficient `a_{r,i}` contributes the
//!   factor `exp(-b_r / a_{r,i})` and shifts the remaining thresholds along
//!   column `i` ([`ConjunctionSystem::eliminate_singleton_row`]);
//! * a row supported on `k` identical columns splits into `k` Poisson-weighted
//!   subsystems, the `m`-th of which drops the first `m` of those columns
//!   ([`ConjunctionSystem::eliminate_identical_columns_row`]).
//!
//! [`evaluate`] drives both recursions down to one-row leaves that have
//! closed forms (Erlang and hypoexponential survival functions).

use std::fmt;

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};

/// Minimum `min_{i != j} |l_i - l_j| / max(l)` accepted by the
/// distinct-rate (hypoexponential) closed form.
pub const MIN_RELATIVE_RATE_GAP: f64 = 1e-6;

/// Maximum number of weighted subproblems [`evaluate`] may spawn.
pub const MAX_SUBPROBLEMS: usize = 32;

/// The event `{A z > b}` for i.i.d. unit-rate exponentials `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConjunctionSystem {
    cols: usize,
    // row-major, rows * cols entries
    coeffs: Vec<f64>,
    thresholds: Vec<f64>,
}

impl ConjunctionSystem {
    /// Builds a system from explicit rows.
    ///
    /// `cols` is needed separately so that systems with zero rows still know
    /// how many exponential variables they range over.
    pub fn new(cols: usize, rows: Vec<Vec<f64>>, thresholds: Vec<f64>) -> Result<Self> {
        if cols == 0 {
            return Err(invalid("a conjunction system needs at least one column"));
        }
        if rows.len() != thresholds.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.len(),
                actual: thresholds.len(),
            });
        }
        let mut coeffs = Vec::with_capacity(rows.len() * cols);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: row.len(),
                });
            }
            for (c, &a) in row.iter().enumerate() {
                if !(a >= 0.0) || !a.is_finite() {
                    return Err(invalid(format!(
                        "coefficient ({r}, {c}) = {a} is not a finite nonnegative number"
                    )));
                }
            }
            coeffs.extend_from_slice(row);
        }
        if let Some(b) = thresholds.iter().find(|b| !b.is_finite()) {
            return Err(invalid(format!("threshold {b} is not finite")));
        }
        Ok(Self {
            cols,
            coeffs,
            thresholds,
        })
    }

    /// A system with no inequalities; its probability is one.
    pub fn empty(cols: usize) -> Result<Self> {
        Self::new(cols, Vec::new(), Vec::new())
    }

    pub fn rows(&self) -> usize {
        self.thresholds.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn coeff(&self, row: usize, col: usize) -> f64 {
        self.coeffs[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.coeffs[row * self.cols..(row + 1) * self.cols]
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|r| self.row(r).to_vec()).collect()
    }

    /// Whether `z` satisfies every inequality (`a_r . z > b_r`).
    pub fn is_satisfied_by(&self, z: &[f64]) -> bool {
        debug_assert_eq!(z.len(), self.cols);
        (0..self.rows()).all(|r| {
            let lhs: f64 = self.row(r).iter().zip(z).map(|(a, z)| a * z).sum();
            lhs > self.thresholds[r]
        })
    }

    /// Removes rows whose threshold is `<= 0`; those hold almost surely.
    pub fn drop_vacuous_rows(&self) -> Self {
        let keep: Vec<usize> = (0..self.rows())
            .filter(|&r| self.thresholds[r] > 0.0)
            .collect();
        self.select_rows(&keep)
    }

    /// Removes row `row` whose only positive coefficient sits in one column.
    ///
    /// Returns the multiplier `exp(-b_r / a_{r,i})` and the reduced system
    /// whose probability, times the multiplier, equals the original one.
    pub fn eliminate_singleton_row(&self, row: usize) -> Result<(f64, Self)> {
        self.check_row(row)?;
        let support = self.support(row);
        if support.len() != 1 {
            return Err(invalid(format!(
                "row {row} has {} positive entries (columns {:?}); exactly one is required",
                support.len(),
                support
            )));
        }
        let mut terms = self.eliminate_identical_columns_row(row, &support)?;
        Ok(terms.pop().expect("one term for a single column"))
    }

    /// Conditions on how many of the identical columns `cols` are consumed
    /// by row `row`'s threshold.
    ///
    /// Returns `k = cols.len()` terms `(weight_m, reduced_m)` with
    /// `weight_m = delta^m e^{-delta} / m!` and `delta = b_r / a_{r,i_1}`;
    /// `reduced_m` drops row `row` and the first `m` columns of `cols` (in
    /// ascending order) and shifts the other thresholds by
    /// `delta * a_{., i_1}`.
    pub fn eliminate_identical_columns_row(
        &self,
        row: usize,
        cols: &[usize],
    ) -> Result<Vec<(f64, Self)>> {
        self.check_row(row)?;
        let mut cols = cols.to_vec();
        cols.sort_unstable();
        cols.dedup();
        if cols.is_empty() {
            return Err(invalid("the identical column set is empty"));
        }
        if let Some(&c) = cols.iter().find(|&&c| c >= self.cols) {
            return Err(invalid(format!(
                "column {c} out of range for a system with {} columns",
                self.cols
            )));
        }
        let b_r = self.thresholds[row];
        if b_r < 0.0 {
            return Err(invalid(format!(
                "row {row} has negative threshold {b_r}"
            )));
        }
        let support = self.support(row);
        if support != cols {
            return Err(invalid(format!(
                "row {row} is positive on columns {support:?}, not exactly on {cols:?}"
            )));
        }
        let lead = cols[0];
        for &c in &cols[1..] {
            if let Some(r) = (0..self.rows()).find(|&r| self.coeff(r, c) != self.coeff(r, lead)) {
                return Err(invalid(format!(
                    "columns {lead} and {c} differ in row {r} ({} vs {})",
                    self.coeff(r, lead),
                    self.coeff(r, c)
                )));
            }
        }

        let delta = b_r / self.coeff(row, lead);
        let others: Vec<usize> = (0..self.rows()).filter(|&r| r != row).collect();
        let shifted: Vec<f64> = others
            .iter()
            .map(|&r| self.thresholds[r] - delta * self.coeff(r, lead))
            .collect();

        let mut terms = Vec::with_capacity(cols.len());
        let mut weight = (-delta).exp();
        for m in 0..cols.len() {
            if m > 0 {
                weight *= delta / m as f64;
            }
            let keep_cols: Vec<usize> = (0..self.cols).filter(|c| !cols[..m].contains(c)).collect();
            let mut coeffs = Vec::with_capacity(others.len() * keep_cols.len());
            for &r in &others {
                coeffs.extend(keep_cols.iter().map(|&c| self.coeff(r, c)));
            }
            terms.push((
                weight,
                Self {
                    cols: keep_cols.len(),
                    coeffs,
                    thresholds: shifted.clone(),
                },
            ));
        }
        Ok(terms)
    }

    fn check_row(&self, row: usize) -> Result<()> {
        if row >= self.rows() {
            return Err(invalid(format!(
                "row {row} out of range for a system with {} rows",
                self.rows()
            )));
        }
        Ok(())
    }

    fn support(&self, row: usize) -> Vec<usize> {
        self.row(row)
            .iter()
            .enumerate()
            .filter(|(_, &a)| a > 0.0)
            .map(|(c, _)| c)
            .collect()
    }

    fn select_rows(&self, keep: &[usize]) -> Self {
        let mut coeffs = Vec::with_capacity(keep.len() * self.cols);
        for &r in keep {
            coeffs.extend_from_slice(self.row(r));
        }
        Self {
            cols: self.cols,
            coeffs,
            thresholds: keep.iter().map(|&r| self.thresholds[r]).collect(),
        }
    }

    /// Columns in `support` agree on every row.
    fn columns_identical(&self, support: &[usize]) -> bool {
        let lead = support[0];
        support[1..]
            .iter()
            .all(|&c| (0..self.rows()).all(|r| self.coeff(r, c) == self.coeff(r, lead)))
    }
}

/// `Pr(Erlang(n, 1) > x) = e^{-x} sum_{k<n} x^k / k!`, and `1` for `x < 0`.
pub fn erlang_survival(n: usize, x: f64) -> f64 {
    assert!(n >= 1, "Erlang shape must be positive");
    if x <= 0.0 {
        return 1.0;
    }
    // Sum the Poisson(x) probabilities of 0..n-1 in log space so large x
    // underflows gracefully instead of producing inf * 0.
    let log_x = x.ln();
    let mut log_term = -x;
    let mut total = log_term.exp();
    for k in 1..n {
        log_term += log_x - (k as f64).ln();
        total += log_term.exp();
    }
    total.min(1.0)
}

/// Relative rate gap `min_{i != j} |l_i - l_j| / max(l)`; infinite for a
/// single rate.
pub fn relative_rate_gap(rates: &[f64]) -> f64 {
    let max = rates.iter().copied().fold(0.0_f64, f64::max);
    let mut sorted = rates.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .windows(2)
        .map(|w| (w[1] - w[0]) / max)
        .fold(f64::INFINITY, f64::min)
}

/// Partial-fraction weights `gamma_i = prod_{j != i} l_j / (l_j - l_i)`.
pub fn hypoexponential_weights(rates: &[f64]) -> Result<Vec<f64>> {
    if rates.is_empty() {
        return Err(invalid("at least one rate is required"));
    }
    if let Some(l) = rates.iter().find(|&&l| !(l > 0.0) || !l.is_finite()) {
        return Err(invalid(format!("rate {l} is not a finite positive number")));
    }
    let gap = relative_rate_gap(rates);
    if gap < MIN_RELATIVE_RATE_GAP {
        return Err(Error::IllConditioned(format!(
            "relative gap between rates is {gap:.3e}, below {MIN_RELATIVE_RATE_GAP:e}"
        )));
    }
    Ok(rates
        .iter()
        .enumerate()
        .map(|(i, &li)| {
            rates
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &lj)| lj / (lj - li))
                .product()
        })
        .collect())
}

/// `Pr(sum_i z_i / l_i > x)` for pairwise distinct rates `l_i`.
///
/// Uses `sum_i gamma_i e^{-l_i x}` unless the weights are large enough for
/// cancellation to matter, in which case the survival is read off the
/// phase-type representation `e_1^T exp(Q x) 1` instead.
pub fn hypoexponential_survival(rates: &[f64], x: f64) -> Result<f64> {
    let gammas = hypoexponential_weights(rates)?;
    if x <= 0.0 {
        return Ok(1.0);
    }
    let spread: f64 = gammas.iter().map(|g| g.abs()).sum();
    let s = if spread * f64::EPSILON < 1e-13 {
        gammas
            .iter()
            .zip(rates)
            .map(|(g, l)| g * (-l * x).exp())
            .sum()
    } else {
        phase_type_survival(rates, x)
    };
    Ok(s.clamp(0.0, 1.0))
}

fn phase_type_survival(rates: &[f64], x: f64) -> f64 {
    let n = rates.len();
    let mut q = DMatrix::zeros(n, n);
    for (i, &l) in rates.iter().enumerate() {
        q[(i, i)] = -l * x;
        if i + 1 < n {
            q[(i, i + 1)] = l * x;
        }
    }
    q.exp().row(0).iter().sum()
}

/// Closed-form one-row cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Leaf {
    /// No inequalities left.
    Empty,
    /// One row with `n` equal positive coefficients.
    Erlang(usize),
    /// One row with `n` pairwise distinct positive coefficients.
    Hypoexponential(usize),
    /// A row with no positive coefficient and a positive threshold.
    Impossible,
}

/// One step of an [`evaluate`] run, in depth-first order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    SingletonRow { row: usize, col: usize },
    IdenticalColumns { row: usize, k: usize },
    Leaf(Leaf),
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::SingletonRow { row, col } => write!(f, "singleton-row({row},{col})"),
            Step::IdenticalColumns { row, k } => write!(f, "identical-columns({row},k={k})"),
            Step::Leaf(Leaf::Empty) => write!(f, "leaf:empty"),
            Step::Leaf(Leaf::Erlang(n)) => write!(f, "leaf:erlang({n})"),
            Step::Leaf(Leaf::Hypoexponential(n)) => write!(f, "leaf:hypoexponential({n})"),
            Step::Leaf(Leaf::Impossible) => write!(f, "leaf:impossible"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecursionResult {
    /// Probability of the event; meaningful only when `resolved`.
    pub value: f64,
    pub method_trace: Vec<Step>,
    pub resolved: bool,
}

/// Exact probability of `{A z > b}` by repeated elimination, when the
/// system reduces to closed-form leaves.
///
/// Elimination order is fixed: vacuous rows, then the lowest-index
/// singleton row, then the lowest-index row over identical columns.
/// Anything else (or more than [`MAX_SUBPROBLEMS`] branches) comes back
/// with `resolved == false`.
pub fn evaluate(sys: &ConjunctionSystem) -> RecursionResult {
    let mut trace = Vec::new();
    let mut budget = MAX_SUBPROBLEMS;
    match evaluate_inner(sys, &mut trace, &mut budget) {
        Some(value) => RecursionResult {
            value: value.clamp(0.0, 1.0),
            method_trace: trace,
            resolved: true,
        },
        None => RecursionResult {
            value: f64::NAN,
            method_trace: trace,
            resolved: false,
        },
    }
}

fn evaluate_inner(
    sys: &ConjunctionSystem,
    trace: &mut Vec<Step>,
    budget: &mut usize,
) -> Option<f64> {
    let mut multiplier = 1.0;
    let mut sys = sys.drop_vacuous_rows();
    loop {
        if sys.rows() == 0 {
            trace.push(Step::Leaf(Leaf::Empty));
            return Some(multiplier);
        }
        let supports: Vec<Vec<usize>> = (0..sys.rows()).map(|r| sys.support(r)).collect();
        if supports.iter().any(Vec::is_empty) {
            // 0 > b_r with b_r > 0 never holds
            trace.push(Step::Leaf(Leaf::Impossible));
            return Some(0.0);
        }
        if sys.rows() == 1 {
            if let Some((leaf, p)) = one_row_leaf(&sys) {
                trace.push(Step::Leaf(leaf));
                return Some(multiplier * p);
            }
        }

        if let Some(row) = supports.iter().position(|s| s.len() == 1) {
            let (m, reduced) = sys
                .eliminate_singleton_row(row)
                .expect("singleton precondition checked");
            trace.push(Step::SingletonRow {
                row,
                col: supports[row][0],
            });
            multiplier *= m;
            sys = reduced.drop_vacuous_rows();
            continue;
        }

        let row = supports
            .iter()
            .position(|s| s.len() >= 2 && sys.columns_identical(s))?;
        let k = supports[row].len();
        if k > *budget {
            return None;
        }
        *budget -= k;
        trace.push(Step::IdenticalColumns { row, k });
        let terms = sys
            .eliminate_identical_columns_row(row, &supports[row])
            .expect("identical-columns precondition checked");
        let mut total = 0.0;
        for (w, reduced) in &terms {
            total += w * evaluate_inner(reduced, trace, budget)?;
        }
        return Some(multiplier * total);
    }
}

fn one_row_leaf(sys: &ConjunctionSystem) -> Option<(Leaf, f64)> {
    let b = sys.thresholds[0];
    let positive: Vec<f64> = sys.row(0).iter().copied().filter(|&a| a > 0.0).collect();
    let n = positive.len();
    if positive.iter().all(|&a| a == positive[0]) {
        return Some((Leaf::Erlang(n), erlang_survival(n, b / positive[0])));
    }
    let rates: Vec<f64> = positive.iter().map(|a| 1.0 / a).collect();
    hypoexponential_survival(&rates, b)
        .ok()
        .map(|p| (Leaf::Hypoexponential(n), p))
}
