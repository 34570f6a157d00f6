//! Outage curves: re-solve the allocation at each sweep point and evaluate
//! the resulting network outage.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::allocation::{solve_centralized, AllocationProblem, Tolerances};
use crate::error::{invalid, Error, Result};
use crate::monte_carlo::McConfig;
use crate::network::{network_outage, NetworkSpec, OutageMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepVariable {
    /// Multicast rate `R_s` in bits/s/Hz.
    MulticastRate,
    /// Uniform per-link SNR `p / sigma^2` in dB.
    Snr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRequest {
    pub sweep: SweepVariable,
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
    pub lower: bool,
    pub upper: bool,
    pub monte_carlo: bool,
    pub mc: McConfig,
}

impl CurveRequest {
    /// All methods on `[lo, hi]` in increments of `step`.
    pub fn new(sweep: SweepVariable, lo: f64, hi: f64, step: f64, mc: McConfig) -> Result<Self> {
        let req = Self {
            sweep,
            lo,
            hi,
            step,
            lower: true,
            upper: true,
            monte_carlo: true,
            mc,
        };
        req.points()?;
        Ok(req)
    }

    /// Sweep values `lo, lo + step, ...` up to `hi` (inclusive, with a
    /// relative slack of `1e-9` steps).
    pub fn points(&self) -> Result<Vec<f64>> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(invalid(format!("empty sweep range [{}, {}]", self.lo, self.hi)));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(invalid(format!("sweep step must be positive, got {}", self.step)));
        }
        let count = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..count).map(|i| self.lo + i as f64 * self.step).collect())
    }
}

/// One CSV row. Unrequested methods are `None` (empty cells).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurveRow {
    pub sweep_value: f64,
    #[serde(rename = "R_s")]
    pub multicast_rate: f64,
    pub outage_lower: Option<f64>,
    pub outage_upper: Option<f64>,
    pub outage_mc: Option<f64>,
    pub mc_halfwidth: Option<f64>,
    /// Optimal allocation objective.
    pub objective: f64,
}

/// Converts dB to a linear ratio.
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Computes every row of the curve.
///
/// Monte Carlo columns reuse `req.mc` at every point, so neighboring points
/// see the same fading draws.
pub fn compute_curve(net: &NetworkSpec, req: &CurveRequest) -> Result<Vec<CurveRow>> {
    req.points()?
        .into_iter()
        .map(|x| {
            let point = match req.sweep {
                SweepVariable::MulticastRate => net.with_multicast_rate(x)?,
                SweepVariable::Snr => net.with_snr(db_to_linear(x))?,
            };
            let prob = AllocationProblem::new(point.clone());
            let sol = solve_centralized(&prob, &Tolerances::default())?;
            if !sol.report.converged {
                return Err(Error::NotConverged(format!(
                    "allocation at sweep value {x}: residuals {:?}",
                    sol.report.residuals
                )));
            }
            let r = &sol.state.r;
            let eval = |m| network_outage(&point, r, m, &req.mc).map(|o| o.total);
            let lower = req.lower.then(|| eval(OutageMethod::Lower)).transpose()?;
            let upper = req.upper.then(|| eval(OutageMethod::Upper)).transpose()?;
            let mc = req.monte_carlo.then(|| eval(OutageMethod::MonteCarlo)).transpose()?;
            Ok(CurveRow {
                sweep_value: x,
                multicast_rate: point.multicast_rate(),
                outage_lower: lower.map(|o| o.value),
                outage_upper: upper.map(|o| o.value),
                outage_mc: mc.map(|o| o.value),
                mc_halfwidth: mc.and_then(|o| o.half_width),
                objective: sol.report.objective,
            })
        })
        .collect()
}

/// Writes rows as CSV with a header; floats use Rust's shortest
/// round-trip formatting with `.` decimals.
pub fn write_curve_csv<W: Write>(rows: &[CurveRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{fixtures, load_network};

    #[test]
    fn points_cover_range() {
        let mut req = CurveRequest::new(SweepVariable::MulticastRate, 0.5, 2.0, 0.5, McConfig::default()).unwrap();
        assert_eq!(req.points().unwrap(), vec![0.5, 1.0, 1.5, 2.0]);
        req.hi = 0.5;
        assert!(req.points().is_err());
        assert!(CurveRequest::new(SweepVariable::Snr, 0.0, 1.0, 0.0, McConfig::default()).is_err());
    }

    #[test]
    fn db_conversion() {
        assert_eq!(db_to_linear(0.0), 1.0);
        assert!((db_to_linear(20.0) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn diamond_rate_sweep_is_monotone() {
        let net = load_network(fixtures::DIAMOND).unwrap();
        let req = CurveRequest::new(SweepVariable::MulticastRate, 0.5, 3.0, 0.5, McConfig::new(20_000, 9)).unwrap();
        let rows = compute_curve(&net, &req).unwrap();
        assert_eq!(rows.len(), 6);
        for pair in rows.windows(2) {
            assert!(pair[1].outage_lower >= pair[0].outage_lower);
            assert!(pair[1].outage_upper >= pair[0].outage_upper);
            assert!(pair[1].objective > pair[0].objective);
        }
        for row in &rows {
            assert!(row.outage_lower <= row.outage_upper);
        }
    }

    #[test]
    fn unselected_methods_leave_empty_cells() {
        let net = load_network(fixtures::SINGLE_PATH).unwrap();
        let mut req = CurveRequest::new(SweepVariable::Snr, 0.0, 10.0, 10.0, McConfig::new(1000, 1)).unwrap();
        req.monte_carlo = false;
        req.upper = false;
        let rows = compute_curve(&net, &req).unwrap();
        let mut buf = Vec::new();
        write_curve_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "sweep_value,R_s,outage_lower,outage_upper,outage_mc,mc_halfwidth,objective"
        );
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first[0], "0.0");
        assert_eq!(&first[3..6], ["", "", ""]);
        assert!(!first[2].is_empty());
    }
}
