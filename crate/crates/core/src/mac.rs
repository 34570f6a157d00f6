//! Outage probability of one slow Rayleigh-fading multiple-access channel.
//!
//! A receiver hears `n` transmitters; link `i` has normalized power gain
//! `z_i / lambda_i` with `z_i ~ Exp(1)` and `lambda_i = sigma^2 / (2 v_i^2 p_i)`.
//! A rate vector `r` is decodable iff for every nonempty subset `M` of links
//!
//! ```text
//! sum_{i in M} z_i / lambda_i  >=  2^{sum_{i in M} r_i} - 1.
//! ```
//!
//! Subsets are indexed by the rows of [`build_conjunction_matrix`], whose
//! `k`-th row is the `n`-bit binary expansion of `k`. Outage is the
//! complement of all `2^n - 1` inequalities holding at once.

use serde::{Deserialize, Serialize};
use std::f64::consts::LN_2;
use std::fmt;

use crate::error::{invalid, Error, Result};
use crate::exp_linear::{self, ConjunctionSystem};

/// Largest supported link count for the explicit `2^n - 1` row matrix.
pub const MAX_LINKS: usize = 20;

/// Sum rates above this many bits/s/Hz are reported as certain outage.
pub const MAX_SUM_RATE: f64 = 60.0;

/// Rate parameters `lambda_i` of a receiver's in-links.
#[derive(Debug, Clone, PartialEq)]
pub struct MacSpec {
    rates: Vec<f64>,
}

impl MacSpec {
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if rates.is_empty() {
            return Err(invalid("a MAC needs at least one link"));
        }
        if let Some(l) = rates.iter().find(|&&l| !(l > 0.0) || !l.is_finite()) {
            return Err(invalid(format!("lambda = {l} is not a finite positive number")));
        }
        Ok(Self { rates })
    }

    /// `n` links sharing one rate parameter.
    pub fn iid(n: usize, lambda: f64) -> Result<Self> {
        Self::new(vec![lambda; n])
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.rates
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    /// All `lambda_i` exactly equal.
    pub fn is_iid(&self) -> bool {
        self.rates.iter().all(|&l| l == self.rates[0])
    }

    fn check(&self, r: &RateVector) -> Result<()> {
        if r.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: r.len(),
            });
        }
        Ok(())
    }

    fn common_lambda(&self) -> Result<f64> {
        if !self.is_iid() {
            return Err(Error::NotApplicable(format!(
                "bound requires i.i.d. links, got lambda = {:?}",
                self.rates
            )));
        }
        Ok(self.rates[0])
    }
}

/// Per-link rates in bits/s/Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct RateVector {
    rates: Vec<f64>,
}

impl RateVector {
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if let Some(r) = rates.iter().find(|&&r| !(r >= 0.0) || !r.is_finite()) {
            return Err(invalid(format!("rate {r} is not a finite nonnegative number")));
        }
        Ok(Self { rates })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            rates: vec![0.0; n],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rates
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    /// `R_n = sum r_i`.
    pub fn sum_rate(&self) -> f64 {
        self.rates.iter().sum()
    }

    /// `S_n = sum (2^{r_i} - 1)`.
    pub fn single_link_sum(&self) -> f64 {
        self.rates.iter().map(|&r| pow2m1(r)).sum()
    }

    /// `alpha_n = prod (2^{r_i} - 1)`.
    pub fn alpha(&self) -> f64 {
        self.rates.iter().map(|&r| pow2m1(r)).product()
    }

    /// `beta_n = 2^{R_n} - 1 - S_n`, the slack of the sum-rate constraint
    /// once every single-link constraint is met. Nonnegative for `r >= 0`.
    pub fn beta(&self) -> f64 {
        (pow2m1(self.sum_rate()) - self.single_link_sum()).max(0.0)
    }
}

/// `2^x - 1` without cancellation near zero.
pub fn pow2m1(x: f64) -> f64 {
    (x * LN_2).exp_m1()
}

/// How an [`OutageEstimate`] was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Exact,
    Lower,
    Upper,
    MonteCarlo,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Exact => "exact",
            Method::Lower => "lower",
            Method::Upper => "upper",
            Method::MonteCarlo => "monte-carlo",
        })
    }
}

/// An outage probability tagged with how it was computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutageEstimate {
    pub value: f64,
    pub method: Method,
    /// 95% normal-approximation half-width (Monte Carlo only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub half_width: Option<f64>,
    /// Monte Carlo standard error.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std_error: Option<f64>,
    /// Fewer than ten outage events were observed.
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub low_confidence: bool,
}

impl OutageEstimate {
    pub fn analytic(value: f64, method: Method) -> Self {
        Self {
            value: value.clamp(0.0, 1.0),
            method,
            half_width: None,
            std_error: None,
            low_confidence: false,
        }
    }
}

/// `A_n`: `2^n - 1` rows, row `k` (1-based) is `k` in binary, most
/// significant bit in column 0.
pub fn build_conjunction_matrix(n: usize) -> Result<Vec<Vec<u8>>> {
    if n == 0 || n > MAX_LINKS {
        return Err(invalid(format!(
            "link count {n} outside the supported range 1..={MAX_LINKS}"
        )));
    }
    Ok((1..(1usize << n))
        .map(|k| (0..n).map(|c| ((k >> (n - 1 - c)) & 1) as u8).collect())
        .collect())
}

/// `b = 2^{A r} - 1`, entrywise.
pub fn rate_thresholds(a: &[Vec<u8>], r: &RateVector) -> Result<Vec<f64>> {
    a.iter()
        .map(|row| {
            if row.len() != r.len() {
                return Err(Error::DimensionMismatch {
                    expected: row.len(),
                    actual: r.len(),
                });
            }
            let s: f64 = row
                .iter()
                .zip(r.as_slice())
                .filter(|(&a, _)| a != 0)
                .map(|(_, &r)| r)
                .sum();
            Ok(pow2m1(s))
        })
        .collect()
}

/// The non-outage event as `{A_n D_n z >= b_n}` with `D_n = diag(1/lambda_i)`.
pub fn success_system(mac: &MacSpec, r: &RateVector) -> Result<ConjunctionSystem> {
    mac.check(r)?;
    let a = build_conjunction_matrix(mac.len())?;
    let b = rate_thresholds(&a, r)?;
    let rows = a
        .iter()
        .map(|row| {
            row.iter()
                .zip(mac.lambdas())
                .map(|(&bit, &l)| if bit != 0 { 1.0 / l } else { 0.0 })
                .collect()
        })
        .collect();
    ConjunctionSystem::new(mac.len(), rows, b)
}

/// Exact outage probability, or `None` when the elimination recursion cannot
/// reduce the system (typically `n >= 3` with all rates positive); callers
/// should then fall back to bounds or Monte Carlo.
pub fn outage_exact(mac: &MacSpec, r: &RateVector) -> Option<OutageEstimate> {
    mac.check(r).ok()?;
    if r.sum_rate() > MAX_SUM_RATE {
        return Some(OutageEstimate::analytic(1.0, Method::Exact));
    }
    let n = mac.len();
    if n == 1 {
        return Some(single_link(mac.lambdas()[0], r.as_slice()[0]));
    }
    if n == 2 && mac.is_iid() {
        let l = mac.lambdas()[0];
        let [r1, r2] = [r.as_slice()[0], r.as_slice()[1]];
        let exponent = -l * pow2m1(r1 + r2);
        let success = (exponent + (l * pow2m1(r1) * pow2m1(r2)).ln_1p()).exp();
        return Some(OutageEstimate::analytic(1.0 - success, Method::Exact));
    }
    let sys = success_system(mac, r).ok()?;
    let res = exp_linear::evaluate(&sys);
    res.resolved
        .then(|| OutageEstimate::analytic(1.0 - res.value, Method::Exact))
}

fn single_link(lambda: f64, r: f64) -> OutageEstimate {
    OutageEstimate::analytic(-(-lambda * pow2m1(r)).exp_m1(), Method::Exact)
}

/// `G(x) = x^2/2 + x + 1`.
pub fn g_quadratic(x: f64) -> f64 {
    0.5 * x * x + x + 1.0
}

/// `G~(x) = sum_{k<n} x^k / k!` (the first `n` Taylor terms of `e^x`).
pub fn g_truncated_exp(n: usize, x: f64) -> f64 {
    let mut term = 1.0;
    let mut total = 1.0;
    for k in 1..n {
        term *= x / k as f64;
        total += term;
    }
    total
}

/// Lower bound for i.i.d. links: keep only the single-link rows and the
/// sum-rate row, which leaves an Erlang tail:
/// `1 - e^{-lambda (2^{R_n} - 1)} G~(lambda beta_n)`.
///
/// For `n <= 2` the exact value is returned instead.
pub fn outage_lower_iid(mac: &MacSpec, r: &RateVector) -> Result<OutageEstimate> {
    mac.check(r)?;
    let lambda = mac.common_lambda()?;
    if r.sum_rate() > MAX_SUM_RATE {
        return Ok(OutageEstimate::analytic(1.0, Method::Lower));
    }
    if mac.len() <= 2 {
        return Ok(outage_exact(mac, r).expect("closed form for n <= 2"));
    }
    // e^{-l(2^R - 1)} G~(l beta) = e^{-l S} Pr(Erlang(n) > l beta)
    let tail = exp_linear::erlang_survival(mac.len(), lambda * r.beta());
    let success = (-lambda * r.single_link_sum()).exp() * tail;
    Ok(OutageEstimate::analytic(1.0 - success, Method::Lower))
}

/// Lower bound for pairwise distinct `lambda_i`:
/// `1 - e^{-beta} sum_i gamma_i e^{-lambda_i x}` with
/// `beta = sum lambda_i (2^{r_i} - 1)` and `x = 2^{R_n} - S_n - 1`.
pub fn outage_lower_distinct(mac: &MacSpec, r: &RateVector) -> Result<OutageEstimate> {
    mac.check(r)?;
    let gap = exp_linear::relative_rate_gap(mac.lambdas());
    if gap < exp_linear::MIN_RELATIVE_RATE_GAP {
        return Err(Error::IllConditioned(format!(
            "lambda values {:?} are not pairwise distinct (relative gap {gap:.3e})",
            mac.lambdas()
        )));
    }
    if r.sum_rate() > MAX_SUM_RATE {
        return Ok(OutageEstimate::analytic(1.0, Method::Lower));
    }
    let shift: f64 = mac
        .lambdas()
        .iter()
        .zip(r.as_slice())
        .map(|(l, &ri)| l * pow2m1(ri))
        .sum();
    let tail = exp_linear::hypoexponential_survival(mac.lambdas(), r.beta())?;
    let method = if mac.len() == 1 { Method::Exact } else { Method::Lower };
    Ok(OutageEstimate::analytic(1.0 - (-shift).exp() * tail, method))
}

/// Lower bound with the closed form that fits the rate parameters: the
/// Erlang form for i.i.d. links, the hypoexponential form for distinct ones.
/// Mixed (partly equal) parameters have no closed form here.
pub fn outage_lower(mac: &MacSpec, r: &RateVector) -> Result<OutageEstimate> {
    if mac.is_iid() {
        outage_lower_iid(mac, r)
    } else if exp_linear::relative_rate_gap(mac.lambdas()) >= exp_linear::MIN_RELATIVE_RATE_GAP {
        outage_lower_distinct(mac, r)
    } else {
        Err(Error::NotApplicable(format!(
            "no analytic lower bound for partly equal lambda {:?}; use Monte Carlo",
            mac.lambdas()
        )))
    }
}

/// Upper bound for `n >= 3` i.i.d. links,
/// `1 - e^{-lambda (2^{R_n} - 1)} G(lambda alpha_n)` with the quadratic `G`.
///
/// For `n <= 2` the exact value is returned instead.
pub fn outage_upper_iid(mac: &MacSpec, r: &RateVector) -> Result<OutageEstimate> {
    mac.check(r)?;
    let lambda = mac.common_lambda()?;
    if r.sum_rate() > MAX_SUM_RATE {
        return Ok(OutageEstimate::analytic(1.0, Method::Upper));
    }
    if mac.len() <= 2 {
        return Ok(outage_exact(mac, r).expect("closed form for n <= 2"));
    }
    let log_success = -lambda * pow2m1(r.sum_rate()) + g_quadratic(lambda * r.alpha()).ln();
    Ok(OutageEstimate::analytic(
        -log_success.min(0.0).exp_m1(),
        Method::Upper,
    ))
}

/// The weaker i.i.d. upper bound `1 - e^{-lambda (2^{R_n} - 1)}` that the
/// rate-allocation objective is built on. Exact for a single link.
pub fn outage_upper_weak(mac: &MacSpec, r: &RateVector) -> Result<OutageEstimate> {
    mac.check(r)?;
    let lambda = mac.common_lambda()?;
    let method = if mac.len() == 1 { Method::Exact } else { Method::Upper };
    if r.sum_rate() > MAX_SUM_RATE {
        return Ok(OutageEstimate::analytic(1.0, method));
    }
    Ok(OutageEstimate::analytic(
        -(-lambda * pow2m1(r.sum_rate())).exp_m1(),
        method,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rv(r: &[f64]) -> RateVector {
        RateVector::new(r.to_vec()).unwrap()
    }

    #[test]
    fn conjunction_matrices() {
        assert_eq!(build_conjunction_matrix(1).unwrap(), vec![vec![1]]);
        assert_eq!(
            build_conjunction_matrix(2).unwrap(),
            vec![vec![0, 1], vec![1, 0], vec![1, 1]]
        );
        assert_eq!(
            build_conjunction_matrix(3).unwrap(),
            vec![
                vec![0, 0, 1],
                vec![0, 1, 0],
                vec![0, 1, 1],
                vec![1, 0, 0],
                vec![1, 0, 1],
                vec![1, 1, 0],
                vec![1, 1, 1],
            ]
        );
        assert!(build_conjunction_matrix(0).is_err());
        assert!(build_conjunction_matrix(21).is_err());
    }

    #[test]
    fn matrix_follows_block_recursion() {
        // A_{n+1} = [0 A_n; 1 0; 1 A_n]
        for n in 1..6 {
            let a = build_conjunction_matrix(n).unwrap();
            let next = build_conjunction_matrix(n + 1).unwrap();
            let half = a.len();
            for (k, row) in a.iter().enumerate() {
                assert_eq!(next[k][0], 0);
                assert_eq!(&next[k][1..], &row[..]);
                assert_eq!(next[half + 1 + k][0], 1);
                assert_eq!(&next[half + 1 + k][1..], &row[..]);
            }
            assert_eq!(next[half][0], 1);
            assert!(next[half][1..].iter().all(|&b| b == 0));
        }
    }

    #[test]
    fn thresholds() {
        let a2 = build_conjunction_matrix(2).unwrap();
        assert_eq!(rate_thresholds(&a2, &rv(&[1.0, 1.0])).unwrap(), vec![1.0, 1.0, 3.0]);
        let a3 = build_conjunction_matrix(3).unwrap();
        assert_eq!(rate_thresholds(&a3, &RateVector::zeros(3)).unwrap(), vec![0.0; 7]);
        let (r1, r2, r3) = (0.3, 1.1, 2.0);
        let b = rate_thresholds(&a3, &rv(&[r1, r2, r3])).unwrap();
        let p = |x: f64| 2f64.powf(x) - 1.0;
        let expected = [p(r3), p(r2), p(r2 + r3), p(r1), p(r1 + r3), p(r1 + r2), p(r1 + r2 + r3)];
        for (got, want) in b.iter().zip(expected) {
            assert_relative_eq!(*got, want, max_relative = 1e-14);
        }
        assert!(matches!(
            rate_thresholds(&a3, &rv(&[1.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn exact_closed_forms() {
        let one = outage_exact(&MacSpec::iid(1, 1.0).unwrap(), &rv(&[1.0])).unwrap();
        assert_relative_eq!(one.value, 1.0 - (-1.0f64).exp(), max_relative = 1e-14);
        assert_eq!(one.method, Method::Exact);

        let two = outage_exact(&MacSpec::iid(2, 1.0).unwrap(), &rv(&[1.0, 1.0])).unwrap();
        assert_relative_eq!(two.value, 1.0 - 2.0 * (-3.0f64).exp(), max_relative = 1e-14);

        for n in 1..=5 {
            let e = outage_exact(&MacSpec::iid(n, 0.7).unwrap(), &RateVector::zeros(n)).unwrap();
            assert_eq!(e.value, 0.0);
        }
        assert!(outage_exact(&MacSpec::iid(3, 1.0).unwrap(), &rv(&[1.0, 1.0, 1.0])).is_none());
    }

    #[test]
    fn exact_two_links_matches_recursion() {
        for &(l, r1, r2) in &[(1.0, 1.0, 1.0), (0.1, 0.5, 2.0), (0.01, 2.0, 2.0), (3.0, 0.2, 0.7)] {
            let mac = MacSpec::iid(2, l).unwrap();
            let r = rv(&[r1, r2]);
            let closed = 1.0 - outage_exact(&mac, &r).unwrap().value;
            let rec = exp_linear::evaluate(&success_system(&mac, &r).unwrap());
            assert!(rec.resolved);
            assert_relative_eq!(closed, rec.value, max_relative = 1e-12);
        }
    }

    #[test]
    fn exact_with_distinct_lambdas_via_recursion() {
        let mac = MacSpec::new(vec![1.0, 2.0]).unwrap();
        let e = outage_exact(&mac, &rv(&[1.0, 1.0])).unwrap();
        // singleton rows leave z1 + z2/2 > 1 after shifts
        let success = (-3.0f64).exp() * (2.0 * (-1.0f64).exp() - (-2.0f64).exp());
        assert_relative_eq!(e.value, 1.0 - success, max_relative = 1e-12);
    }

    #[test]
    fn lower_iid_values() {
        let mac = MacSpec::iid(3, 1.0).unwrap();
        let lo = outage_lower_iid(&mac, &rv(&[1.0, 1.0, 1.0])).unwrap();
        assert_relative_eq!(lo.value, 1.0 - 13.0 * (-7.0f64).exp(), max_relative = 1e-14);
        assert_eq!(lo.method, Method::Lower);
        assert_eq!(outage_lower_iid(&mac, &RateVector::zeros(3)).unwrap().value, 0.0);
        for &(l, r) in &[(1.0, 1.0), (0.01, 2.5), (4.0, 0.1)] {
            let m1 = MacSpec::iid(1, l).unwrap();
            assert_eq!(
                outage_lower_iid(&m1, &rv(&[r])).unwrap(),
                outage_exact(&m1, &rv(&[r])).unwrap()
            );
        }
    }

    #[test]
    fn lower_distinct_values() {
        let mac = MacSpec::new(vec![1.0, 2.0]).unwrap();
        let lo = outage_lower_distinct(&mac, &rv(&[1.0, 1.0])).unwrap();
        let expected = 1.0 - (2.0 * (-4.0f64).exp() - (-5.0f64).exp());
        assert_relative_eq!(lo.value, expected, max_relative = 1e-14);
        assert_eq!(
            outage_lower_distinct(&mac, &RateVector::zeros(2)).unwrap().value,
            0.0
        );
        assert!(matches!(
            outage_lower_distinct(&MacSpec::iid(2, 1.0).unwrap(), &rv(&[1.0, 1.0])),
            Err(Error::IllConditioned(_))
        ));
    }

    #[test]
    fn lower_dispatch() {
        let r = rv(&[1.0, 0.5, 0.2]);
        assert!(outage_lower(&MacSpec::iid(3, 0.5).unwrap(), &r).is_ok());
        assert!(outage_lower(&MacSpec::new(vec![0.5, 1.0, 2.0]).unwrap(), &r).is_ok());
        assert!(matches!(
            outage_lower(&MacSpec::new(vec![0.5, 0.5, 2.0]).unwrap(), &r),
            Err(Error::NotApplicable(_))
        ));
    }

    #[test]
    fn upper_values() {
        let mac3 = MacSpec::iid(3, 1.0).unwrap();
        let up = outage_upper_iid(&mac3, &rv(&[1.0, 1.0, 1.0])).unwrap();
        assert_relative_eq!(up.value, 1.0 - 2.5 * (-7.0f64).exp(), max_relative = 1e-14);
        assert_eq!(up.method, Method::Upper);
        let mac4 = MacSpec::iid(4, 1.0).unwrap();
        let up4 = outage_upper_iid(&mac4, &rv(&[1.0; 4])).unwrap();
        assert_relative_eq!(up4.value, 1.0 - 2.5 * (-15.0f64).exp(), max_relative = 1e-14);
        assert_eq!(outage_upper_iid(&mac3, &RateVector::zeros(3)).unwrap().value, 0.0);

        // two links: exact is sharper than any bound
        let mac2 = MacSpec::iid(2, 1.0).unwrap();
        let up2 = outage_upper_iid(&mac2, &rv(&[1.0, 1.0])).unwrap();
        assert_eq!(up2.method, Method::Exact);
    }

    #[test]
    fn weak_bound_values() {
        let mac2 = MacSpec::iid(2, 1.0).unwrap();
        let weak = outage_upper_weak(&mac2, &rv(&[1.0, 1.0])).unwrap();
        assert_relative_eq!(weak.value, 1.0 - (-3.0f64).exp(), max_relative = 1e-14);
        assert!(weak.value > outage_exact(&mac2, &rv(&[1.0, 1.0])).unwrap().value);
        assert_eq!(outage_upper_weak(&mac2, &RateVector::zeros(2)).unwrap().value, 0.0);
        let mac1 = MacSpec::iid(1, 0.3).unwrap();
        assert_eq!(
            outage_upper_weak(&mac1, &rv(&[1.7])).unwrap(),
            outage_exact(&mac1, &rv(&[1.7])).unwrap()
        );
    }

    #[test]
    fn bounds_require_iid() {
        let mac = MacSpec::new(vec![1.0, 2.0, 3.0]).unwrap();
        let r = rv(&[1.0, 1.0, 1.0]);
        assert!(matches!(outage_upper_iid(&mac, &r), Err(Error::NotApplicable(_))));
        assert!(matches!(outage_upper_weak(&mac, &r), Err(Error::NotApplicable(_))));
        assert!(matches!(outage_lower_iid(&mac, &r), Err(Error::NotApplicable(_))));
    }

    #[test]
    fn huge_sum_rate_is_certain_outage() {
        let mac = MacSpec::iid(3, 1e-3).unwrap();
        let r = rv(&[30.0, 30.0, 30.0]);
        assert_eq!(outage_upper_iid(&mac, &r).unwrap().value, 1.0);
        assert_eq!(outage_lower_iid(&mac, &r).unwrap().value, 1.0);
        assert_eq!(outage_upper_weak(&mac, &r).unwrap().value, 1.0);
        assert_eq!(outage_exact(&mac, &r).unwrap().value, 1.0);
    }

    #[test]
    fn rate_vector_accessors() {
        let r = rv(&[1.0, 1.0, 1.0]);
        assert_eq!(r.sum_rate(), 3.0);
        assert_relative_eq!(r.single_link_sum(), 3.0, max_relative = 1e-15);
        assert_relative_eq!(r.alpha(), 1.0, max_relative = 1e-15);
        assert_relative_eq!(r.beta(), 4.0, max_relative = 1e-15);
        assert!(RateVector::new(vec![-0.1]).is_err());
    }
}
