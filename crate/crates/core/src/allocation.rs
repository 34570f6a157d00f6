//! Outage-aware multicast rate allocation.
//!
//! Replacing each receiver's outage by the weak bound
//! `1 - exp(-lambda_j (2^{R_j} - 1))`, with `R_j` the sum of the rates on
//! `j`'s in-links, turns the allocation into the smooth convex program
//!
//! ```text
//! minimize    sum_{j != s} lambda_j 2^{R_j}
//! subject to  0 <= f^d_{ij} <= r_{ij}                      for every link, destination
//!             sum_in f^d - sum_out f^d = psi^d_j            for every j != s, destination
//! ```
//!
//! where `psi^d_j` is the demand `R_s` at `j = d` and zero elsewhere. Network
//! coding makes any feasible `r` achieve multicast rate `R_s`.
//!
//! [`solve_centralized`] runs a log-barrier interior-point method with
//! equality-constrained Newton steps. Its output is certified by
//! [`kkt_residuals`], which evaluates the Lagrangian of the equivalent program
//! whose constraints are written through `phi(x) = e^x - 1`
//! (`phi(-f) <= 0`, `phi(f - r) <= 0`, `phi(q) <= 0`, `phi(-q) <= 0`). That is
//! the form the distributed primal-dual dynamics descend, so one residual
//! record serves both solvers.

use std::collections::VecDeque;
use std::f64::consts::LN_2;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::network::NetworkSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Absolute bound on flow-conservation and bound violations.
    pub primal: f64,
    /// Bound on the Lagrangian gradient, relative to `max(1, |grad F|_inf)`.
    pub stationarity: f64,
    pub complementarity: f64,
    /// Newton-step budget across all barrier stages.
    pub max_newton_steps: usize,
    /// Upper cap on every link rate (bits/s/Hz); must be inactive at the optimum.
    pub r_max: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            primal: 1e-6,
            stationarity: 1e-5,
            complementarity: 1e-5,
            max_newton_steps: 500,
            r_max: 64.0,
        }
    }
}

/// Index maps and constants of one allocation program.
#[derive(Debug, Clone)]
pub struct AllocationProblem {
    net: NetworkSpec,
    source: usize,
    dests: Vec<usize>,
    // (node index, lambda_j, in-link indices)
    receivers: Vec<(usize, f64, Vec<usize>)>,
    link_ends: Vec<(usize, usize)>,
}

impl AllocationProblem {
    pub fn new(net: NetworkSpec) -> Self {
        let source = net.node_index(net.source()).expect("validated source");
        let dests = net
            .destinations()
            .iter()
            .map(|&d| net.node_index(d).expect("validated destination"))
            .collect();
        let receivers = net
            .receivers()
            .map(|k| {
                (
                    k,
                    net.receiver_lambda(k).expect("receiver"),
                    net.in_links(k).to_vec(),
                )
            })
            .collect();
        let link_ends = net
            .links()
            .iter()
            .map(|l| {
                (
                    net.node_index(l.tail).expect("validated"),
                    net.node_index(l.head).expect("validated"),
                )
            })
            .collect();
        Self {
            net,
            source,
            dests,
            receivers,
            link_ends,
        }
    }

    pub fn network(&self) -> &NetworkSpec {
        &self.net
    }

    pub fn num_links(&self) -> usize {
        self.link_ends.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.net.nodes().len()
    }

    pub fn num_destinations(&self) -> usize {
        self.dests.len()
    }

    pub fn multicast_rate(&self) -> f64 {
        self.net.multicast_rate()
    }

    /// Internal index of the source node.
    pub fn source_index(&self) -> usize {
        self.source
    }

    /// Internal node index of destination slot `d`.
    pub fn destination_index(&self, d: usize) -> usize {
        self.dests[d]
    }

    /// `(tail, head)` internal node indices of link `e`.
    pub fn link_ends(&self, e: usize) -> (usize, usize) {
        self.link_ends[e]
    }

    /// `(node index, lambda_j, in-links)` for every receiving node.
    pub fn receivers(&self) -> &[(usize, f64, Vec<usize>)] {
        &self.receivers
    }

    /// `psi^d_j`: the demand at the destination, zero at relays.
    pub fn demand(&self, d: usize, node: usize) -> f64 {
        if node == self.dests[d] {
            self.multicast_rate()
        } else {
            0.0
        }
    }

    /// `q^d_j = sum_in f^d - sum_out f^d - psi^d_j`; zero at the source.
    pub fn flow_residuals(&self, f: &[Vec<f64>]) -> Vec<Vec<f64>> {
        (0..self.num_destinations())
            .map(|d| {
                let mut q: Vec<f64> = (0..self.num_nodes()).map(|j| -self.demand(d, j)).collect();
                for (e, &(t, h)) in self.link_ends.iter().enumerate() {
                    q[h] += f[d][e];
                    q[t] -= f[d][e];
                }
                q[self.source] = 0.0;
                q
            })
            .collect()
    }

    /// `R_j` per receiver, in the order of [`Self::receivers`].
    fn receiver_sums(&self, r: &[f64]) -> Vec<f64> {
        self.receivers
            .iter()
            .map(|(_, _, ins)| ins.iter().map(|&e| r[e]).sum())
            .collect()
    }

    /// `dF/dr_e = lambda_head ln2 2^{R_head}`.
    pub fn objective_gradient(&self, r: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.num_links()];
        for ((_, lambda, ins), sum) in self.receivers.iter().zip(self.receiver_sums(r)) {
            let d = lambda * LN_2 * sum.exp2();
            for &e in ins {
                g[e] = d;
            }
        }
        g
    }
}

/// `sum_{j != s} lambda_j 2^{R_j}` over receiving nodes.
pub fn objective(prob: &AllocationProblem, r: &[f64]) -> f64 {
    prob.receivers
        .iter()
        .zip(prob.receiver_sums(r))
        .map(|((_, lambda, _), sum)| lambda * sum.exp2())
        .sum()
}

/// Primal and dual variables of the allocation program (rates in bits).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocationState {
    /// Link rates, canonical link order.
    pub r: Vec<f64>,
    /// `f[d][e]`: flow toward destination slot `d` on link `e`.
    pub f: Vec<Vec<f64>>,
    /// Multipliers of `f >= 0`, indexed like `f`.
    pub rho: Vec<Vec<f64>>,
    /// Multipliers of `f <= r`, indexed like `f`.
    pub w: Vec<Vec<f64>>,
    /// Multipliers of `q <= 0`, `phi[d][node]`.
    pub phi: Vec<Vec<f64>>,
    /// Multipliers of `q >= 0`, `mu[d][node]`.
    pub mu: Vec<Vec<f64>>,
}

impl AllocationState {
    pub fn zeros(prob: &AllocationProblem) -> Self {
        let links = vec![vec![0.0; prob.num_links()]; prob.num_destinations()];
        let nodes = vec![vec![0.0; prob.num_nodes()]; prob.num_destinations()];
        Self {
            r: vec![0.0; prob.num_links()],
            f: links.clone(),
            rho: links.clone(),
            w: links,
            phi: nodes.clone(),
            mu: nodes,
        }
    }

    pub fn flow_residuals(&self, prob: &AllocationProblem) -> Vec<Vec<f64>> {
        prob.flow_residuals(&self.f)
    }

    /// `max_e |r_e - max_d f^d_e|`.
    pub fn envelope_gap(&self) -> f64 {
        self.r
            .iter()
            .enumerate()
            .map(|(e, &r)| {
                let top = self.f.iter().map(|f| f[e]).fold(0.0_f64, f64::max);
                (r - top).abs()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktResiduals {
    /// Worst violation of `f >= 0`, `f <= r` or flow conservation.
    pub primal: f64,
    /// Most negative multiplier, as a positive number.
    pub dual: f64,
    /// `|grad L|_inf / max(1, |grad F|_inf)`.
    pub stationarity: f64,
    /// Largest `|multiplier * phi(constraint)|`.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn within(&self, tol: &Tolerances) -> bool {
        self.primal <= tol.primal
            && self.dual <= tol.primal
            && self.stationarity <= tol.stationarity
            && self.complementarity <= tol.complementarity
    }
}

/// KKT residuals of `state` for the `phi`-form of the program.
pub fn kkt_residuals(prob: &AllocationProblem, state: &AllocationState) -> KktResiduals {
    let q = state.flow_residuals(prob);
    let grad_f = prob.objective_gradient(&state.r);
    let scale = grad_f.iter().fold(1.0_f64, |m, g| m.max(g.abs()));

    let mut primal = 0.0_f64;
    let mut dual = 0.0_f64;
    let mut comp = 0.0_f64;
    let mut stat = 0.0_f64;

    let mut grad_r = grad_f.clone();
    for d in 0..prob.num_destinations() {
        for e in 0..prob.num_links() {
            let (f, r) = (state.f[d][e], state.r[e]);
            let (rho, w) = (state.rho[d][e], state.w[d][e]);
            primal = primal.max(-f).max(f - r);
            dual = dual.max(-rho).max(-w);
            comp = comp
                .max((rho * (-f).exp_m1()).abs())
                .max((w * (f - r).exp_m1()).abs());
            let up = w * (f - r).exp();
            grad_r[e] -= up;

            let (t, h) = prob.link_ends(e);
            let mut g = -rho * (-f).exp() + up;
            g += state.phi[d][h] * q[d][h].exp() - state.mu[d][h] * (-q[d][h]).exp();
            if t != prob.source {
                g -= state.phi[d][t] * q[d][t].exp() - state.mu[d][t] * (-q[d][t]).exp();
            }
            stat = stat.max(g.abs());
        }
        for j in 0..prob.num_nodes() {
            if j == prob.source {
                continue;
            }
            let (phi, mu, qj) = (state.phi[d][j], state.mu[d][j], q[d][j]);
            primal = primal.max(qj.abs());
            dual = dual.max(-phi).max(-mu);
            comp = comp
                .max((phi * qj.exp_m1()).abs())
                .max((mu * (-qj).exp_m1()).abs());
        }
    }
    stat = grad_r.iter().fold(stat, |m, g| m.max(g.abs()));
    KktResiduals {
        primal: primal.max(0.0),
        dual: dual.max(0.0),
        stationarity: stat / scale,
        complementarity: comp,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub converged: bool,
    pub newton_steps: usize,
    pub barrier_stages: usize,
    pub objective: f64,
    pub residuals: KktResiduals,
    /// Largest link rate relative to the cap (`< 1` means the cap is inactive).
    pub cap_utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Solution {
    pub state: AllocationState,
    pub report: SolveReport,
}

/// Which flow variables can be nonzero: link `(i, j)` carries commodity `d`
/// only if `i` is reachable from the source and `d` is reachable from `j`.
struct Support {
    usable: Vec<Vec<bool>>,
    from_source: Vec<bool>,
    to_dest: Vec<Vec<bool>>,
}

impl Support {
    fn new(prob: &AllocationProblem) -> Self {
        let n = prob.num_nodes();
        let mut fwd = vec![Vec::new(); n];
        let mut bwd = vec![Vec::new(); n];
        for &(t, h) in &prob.link_ends {
            fwd[t].push(h);
            bwd[h].push(t);
        }
        let from_source = reach(&fwd, prob.source);
        let to_dest: Vec<Vec<bool>> = prob.dests.iter().map(|&d| reach(&bwd, d)).collect();
        let usable = to_dest
            .iter()
            .map(|td| {
                prob.link_ends
                    .iter()
                    .map(|&(t, h)| from_source[t] && td[h])
                    .collect()
            })
            .collect();
        Self {
            usable,
            from_source,
            to_dest,
        }
    }
}

fn reach(adj: &[Vec<usize>], start: usize) -> Vec<bool> {
    let mut seen = vec![false; adj.len()];
    seen[start] = true;
    let mut queue = VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    seen
}

/// Breadth-first path of link indices from `from` to `to` over `usable` links.
fn bfs_path(prob: &AllocationProblem, usable: &[bool], from: usize, to: usize) -> Vec<usize> {
    let n = prob.num_nodes();
    let mut pred = vec![usize::MAX; n];
    let mut seen = vec![false; n];
    seen[from] = true;
    let mut queue = VecDeque::from([from]);
    while let Some(u) = queue.pop_front() {
        if u == to {
            break;
        }
        for &e in prob.net.out_links(u) {
            let v = prob.link_ends[e].1;
            if usable[e] && !seen[v] {
                seen[v] = true;
                pred[v] = e;
                queue.push_back(v);
            }
        }
    }
    let mut path = Vec::new();
    let mut v = to;
    while v != from {
        let e = pred[v];
        assert!(e != usize::MAX, "usable links connect source and destination");
        path.push(e);
        v = prob.link_ends[e].0;
    }
    path.reverse();
    path
}

/// Barrier-method variable layout: free rates, then usable flows.
struct Layout {
    r_var: Vec<Option<usize>>,
    f_var: Vec<Vec<Option<usize>>>,
    len: usize,
}

impl Layout {
    fn new(prob: &AllocationProblem, support: &Support) -> Self {
        let mut len = 0;
        let r_var = (0..prob.num_links())
            .map(|e| {
                support.usable.iter().any(|u| u[e]).then(|| {
                    len += 1;
                    len - 1
                })
            })
            .collect();
        let f_var = support
            .usable
            .iter()
            .map(|u| {
                u.iter()
                    .map(|&ok| {
                        ok.then(|| {
                            len += 1;
                            len - 1
                        })
                    })
                    .collect()
            })
            .collect();
        Self { r_var, f_var, len }
    }
}

/// Linear inequality `a . x + c > 0` over the barrier variables.
struct Slack {
    terms: Vec<(usize, f64)>,
    constant: f64,
}

impl Slack {
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.constant + self.terms.iter().map(|&(i, a)| a * x[i]).sum::<f64>()
    }
}

struct Barrier<'a> {
    prob: &'a AllocationProblem,
    layout: Layout,
    slacks: Vec<Slack>,
    // slacks 2k, 2k+1 bound the k-th usable flow from below and above;
    // the rate caps follow
    eq: DMatrix<f64>,
    eq_rhs: DVector<f64>,
    // (destination slot, node) of each conservation row
    eq_nodes: Vec<(usize, usize)>,
}

impl<'a> Barrier<'a> {
    fn new(prob: &'a AllocationProblem, support: &Support, r_max: f64) -> Self {
        let layout = Layout::new(prob, support);
        let mut slacks = Vec::new();
        for fv in &layout.f_var {
            for (e, v) in fv.iter().enumerate() {
                if let Some(i) = *v {
                    let r = layout.r_var[e].expect("usable flow implies free rate");
                    slacks.push(Slack {
                        terms: vec![(i, 1.0)],
                        constant: 0.0,
                    });
                    slacks.push(Slack {
                        terms: vec![(r, 1.0), (i, -1.0)],
                        constant: 0.0,
                    });
                }
            }
        }
        for r in layout.r_var.iter().flatten() {
            slacks.push(Slack {
                terms: vec![(*r, -1.0)],
                constant: r_max,
            });
        }

        let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
        let mut eq_nodes = Vec::new();
        for (d, fv) in layout.f_var.iter().enumerate() {
            for j in 0..prob.num_nodes() {
                if j == prob.source {
                    continue;
                }
                let mut terms = Vec::new();
                for &e in prob.net.in_links(j) {
                    if let Some(i) = fv[e] {
                        terms.push((i, 1.0));
                    }
                }
                for &e in prob.net.out_links(j) {
                    if let Some(i) = fv[e] {
                        terms.push((i, -1.0));
                    }
                }
                if !terms.is_empty() {
                    rows.push((terms, prob.demand(d, j)));
                    eq_nodes.push((d, j));
                }
            }
        }
        let mut eq = DMatrix::zeros(rows.len(), layout.len);
        let mut eq_rhs = DVector::zeros(rows.len());
        for (k, (terms, rhs)) in rows.into_iter().enumerate() {
            for (i, a) in terms {
                eq[(k, i)] = a;
            }
            eq_rhs[k] = rhs;
        }
        Self {
            prob,
            layout,
            slacks,
            eq,
            eq_rhs,
            eq_nodes,
        }
    }

    fn rates(&self, x: &DVector<f64>) -> Vec<f64> {
        self.layout
            .r_var
            .iter()
            .map(|v| v.map_or(0.0, |i| x[i]))
            .collect()
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        objective(self.prob, &self.rates(x))
    }

    /// Gradient and Hessian of the objective in barrier coordinates.
    fn objective_derivatives(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.layout.len;
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        let r = self.rates(x);
        for ((_, lambda, ins), sum) in self.prob.receivers.iter().zip(self.prob.receiver_sums(&r)) {
            let vars: Vec<usize> = ins.iter().filter_map(|&e| self.layout.r_var[e]).collect();
            let val = lambda * sum.exp2();
            for &a in &vars {
                g[a] += val * LN_2;
                for &b in &vars {
                    h[(a, b)] += val * LN_2 * LN_2;
                }
            }
        }
        (g, h)
    }

    fn slack_values(&self, x: &DVector<f64>) -> Vec<f64> {
        self.slacks.iter().map(|s| s.value(x)).collect()
    }

    fn centered_value(&self, t: f64, x: &DVector<f64>) -> Option<f64> {
        let mut v = t * self.objective(x);
        for s in self.slack_values(x) {
            if !(s > 0.0) {
                return None;
            }
            v -= s.ln();
        }
        Some(v)
    }

    /// Equality-constrained Newton step for `t F(x) - sum log s(x)`.
    ///
    /// Returns the step and the squared Newton decrement.
    fn newton_step(&self, t: f64, x: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
        let (gf, hf) = self.objective_derivatives(x);
        let mut g = gf * t;
        let mut h = hf * t;
        for (s, val) in self.slacks.iter().zip(self.slack_values(x)) {
            let inv = 1.0 / val;
            for &(i, a) in &s.terms {
                g[i] -= a * inv;
                for &(j, b) in &s.terms {
                    h[(i, j)] += a * b * inv * inv;
                }
            }
        }
        let residual = &self.eq_rhs - &self.eq * x;
        let (dx, _) = solve_kkt(&h, &self.eq, &g, &residual)?;
        let decrement = dx.dot(&(&h * &dx));
        Some((dx, decrement))
    }

    /// Interior starting point built from unit walks through every usable link.
    fn initial_point(&self, support: &Support, r_max: f64) -> Result<DVector<f64>> {
        let prob = self.prob;
        let rs = prob.multicast_rate();
        let mut x = DVector::zeros(self.layout.len);
        let mut top = vec![0.0_f64; prob.num_links()];
        for (d, usable) in support.usable.iter().enumerate() {
            let dest = prob.dests[d];
            let mut walks: Vec<Vec<usize>> = Vec::new();
            for (e, &ok) in usable.iter().enumerate() {
                if !ok {
                    continue;
                }
                let (t, h) = prob.link_ends[e];
                let mut walk = bfs_path(prob, usable, prob.source, t);
                walk.push(e);
                walk.extend(bfs_path(prob, usable, h, dest));
                walks.push(walk);
            }
            let unit = rs / walks.len() as f64;
            let mut flow = vec![0.0; prob.num_links()];
            for walk in &walks {
                for &e in walk {
                    flow[e] += unit;
                }
            }
            for (e, v) in self.layout.f_var[d].iter().enumerate() {
                if let Some(i) = *v {
                    x[i] = flow[e];
                    top[e] = top[e].max(flow[e]);
                }
            }
        }
        for (e, v) in self.layout.r_var.iter().enumerate() {
            if let Some(i) = *v {
                let r = top[e] + 1.0_f64.min(0.5 * (r_max - top[e]));
                if !(r < r_max) || !(r > top[e]) {
                    return Err(invalid(format!(
                        "multicast rate {rs} needs link rates beyond the cap r_max = {r_max}"
                    )));
                }
                x[i] = r;
            }
        }
        let _ = &support.from_source;
        Ok(x)
    }
}

/// Solves `[H A^T; A 0] [dx; nu] = [-g; res]` by block elimination.
fn solve_kkt(
    h: &DMatrix<f64>,
    a: &DMatrix<f64>,
    g: &DVector<f64>,
    res: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    // symmetric diagonal scaling keeps barrier Hessians with entries spanning
    // many orders of magnitude factorizable
    let n = h.nrows();
    let scale = DVector::from_iterator(n, (0..n).map(|i| 1.0 / h[(i, i)].max(1e-300).sqrt()));
    let hs = DMatrix::from_fn(n, n, |i, j| h[(i, j)] * scale[i] * scale[j]);
    let as_ = DMatrix::from_fn(a.nrows(), n, |i, j| a[(i, j)] * scale[j]);
    let gs = g.component_mul(&scale);

    let chol = hs.cholesky()?;
    let hinv_g = chol.solve(&gs);
    let dx = if a.nrows() == 0 {
        -hinv_g
    } else {
        let hinv_at = chol.solve(&as_.transpose());
        let schur = &as_ * &hinv_at;
        let rhs = -(&as_ * &hinv_g) - res;
        let nu = schur.cholesky()?.solve(&rhs);
        let dxs = -(hinv_g + hinv_at * &nu);
        return Some((dxs.component_mul(&scale), nu));
    };
    Some((dx.component_mul(&scale), DVector::zeros(0)))
}

/// Minimizes the allocation objective and certifies the result.
///
/// Returns `converged == false` (with the best iterate) when the Newton
/// budget runs out before the KKT residuals meet `tol`.
pub fn solve_centralized(prob: &AllocationProblem, tol: &Tolerances) -> Result<Solution> {
    let mut state = AllocationState::zeros(prob);
    if prob.multicast_rate() == 0.0 {
        let residuals = trivial_duals(prob, &mut state);
        return Ok(Solution {
            report: SolveReport {
                converged: residuals.within(tol),
                newton_steps: 0,
                barrier_stages: 0,
                objective: objective(prob, &state.r),
                residuals,
                cap_utilization: 0.0,
            },
            state,
        });
    }

    let support = Support::new(prob);
    let barrier = Barrier::new(prob, &support, tol.r_max);
    let mut x = barrier.initial_point(&support, tol.r_max)?;
    let m = barrier.slacks.len() as f64;

    let mut t = m / barrier.objective(&x).max(1.0);
    let mut steps = 0;
    let mut stages = 0;
    let mut best: Option<(AllocationState, KktResiduals)> = None;
    let margin = Tolerances {
        primal: tol.primal * 1e-2,
        stationarity: tol.stationarity * 1e-2,
        complementarity: tol.complementarity * 1e-2,
        ..*tol
    };
    loop {
        stages += 1;
        // centering
        let mut inner = 0;
        loop {
            if steps >= tol.max_newton_steps {
                break;
            }
            let Some((dx, dec)) = barrier.newton_step(t, &x) else {
                break;
            };
            steps += 1;
            inner += 1;
            // rounding floors the decrement near 1e-8 once t is large
            if dec / 2.0 <= 1e-10 || inner > 40 {
                break;
            }
            let phi0 = barrier.centered_value(t, &x).expect("interior");
            let slope = -dec;
            let mut step = 1.0;
            let mut accepted = false;
            while step > 1e-14 {
                let cand = &x + &dx * step;
                if let Some(v) = barrier.centered_value(t, &cand) {
                    // near the center rounding swamps the sufficient-decrease test
                    if dec < 1e-3 || v <= phi0 + 0.25 * step * slope {
                        x = cand;
                        accepted = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }

        let candidate = barrier.extract_state(&x, &barrier.center_multipliers(t, &x), &support);
        let res = kkt_residuals(prob, &candidate);
        let best_score = best.as_ref().map_or(f64::INFINITY, |(_, b)| score(b));
        if score(&res) > 10.0 * best_score {
            // rounding has overtaken the barrier
            break;
        }
        if score(&res) < best_score {
            best = Some((candidate.clone(), res));
        }
        // once the barrier has located the optimal face, finish exactly
        if score(&res) < 1e-3 {
            if let Some((px, bounds)) = barrier.polish(&x, &candidate) {
                let polished = barrier.extract_state(&px, &bounds, &support);
                let pres = kkt_residuals(prob, &polished);
                if score(&pres) < score(&res) {
                    best = Some((polished, pres));
                    if pres.within(&margin) {
                        break;
                    }
                }
            }
        }
        if res.within(&margin) || m / t <= 1e-12 * barrier.objective(&x).max(1.0) {
            break;
        }
        if steps >= tol.max_newton_steps {
            break;
        }
        t *= 10.0;
    }

    let (state, residuals) = best.expect("at least one barrier stage");
    let cap_utilization = state.r.iter().fold(0.0_f64, |m, &r| m.max(r)) / tol.r_max;
    Ok(Solution {
        report: SolveReport {
            converged: residuals.within(tol) && cap_utilization < 1.0 - 1e-6,
            newton_steps: steps,
            barrier_stages: stages,
            objective: objective(prob, &state.r),
            residuals,
            cap_utilization,
        },
        state,
    })
}

fn score(r: &KktResiduals) -> f64 {
    r.primal.max(r.dual).max(r.stationarity).max(r.complementarity)
}

impl Barrier<'_> {
    /// Bound multipliers at a barrier center: `1 / (t s)`, corrected to first
    /// order by the pending Newton step, which cancels most of the
    /// centering error.
    fn center_multipliers(&self, t: f64, x: &DVector<f64>) -> Vec<(f64, f64)> {
        let vals = self.slack_values(x);
        let step = self.newton_step(t, x).map(|(dx, _)| dx);
        let mult = |k: usize| -> f64 {
            let s = vals[k];
            let ds = step.as_ref().map_or(0.0, |dx| {
                self.slacks[k].terms.iter().map(|&(i, a)| a * dx[i]).sum::<f64>()
            });
            (1.0 - ds / s).max(0.0) / (t * s)
        };
        self.flow_pairs().map(|k| (mult(2 * k), mult(2 * k + 1))).collect()
    }

    fn flow_pairs(&self) -> std::ops::Range<usize> {
        let flows = self.layout.f_var.iter().flatten().flatten().count();
        0..flows
    }

    /// Newton iteration on the program with the barrier's active bounds
    /// turned into equalities.
    ///
    /// Returns the polished point and the bound multipliers, or `None` when
    /// the guessed active set is not optimal (a negative multiplier or a
    /// violated inactive bound).
    fn polish(
        &self,
        x0: &DVector<f64>,
        guess: &AllocationState,
    ) -> Option<Polished> {
        let n = self.layout.len;
        let vals = self.slack_values(x0);
        // a bound is active when its multiplier outweighs its slack
        let mut active = Vec::new();
        let mut k = 0;
        for (d, fv) in self.layout.f_var.iter().enumerate() {
            for (e, v) in fv.iter().enumerate() {
                if v.is_some() {
                    if guess.rho[d][e] > vals[2 * k] {
                        active.push(2 * k);
                    }
                    if guess.w[d][e] > vals[2 * k + 1] {
                        active.push(2 * k + 1);
                    }
                    k += 1;
                }
            }
        }
        let m_eq = self.eq.nrows();
        let rows = m_eq + active.len();
        let mut c = DMatrix::zeros(rows, n);
        let mut c_rhs = DVector::zeros(rows);
        c.rows_mut(0, m_eq).copy_from(&self.eq);
        c_rhs.rows_mut(0, m_eq).copy_from(&self.eq_rhs);
        for (row, &s) in active.iter().enumerate() {
            // slack s(x) = 0 written as -s(x) = 0 so the multiplier is the
            // bound's own (L = F - sum mult * s)
            for &(i, a) in &self.slacks[s].terms {
                c[(m_eq + row, i)] = -a;
            }
            c_rhs[m_eq + row] = self.slacks[s].constant;
        }

        let mut x = x0.clone();
        for _ in 0..30 {
            let (g, h) = self.objective_derivatives(&x);
            let reg = 1e-12 * h.amax().max(1.0);
            let dim = n + rows;
            let mut kkt = DMatrix::zeros(dim, dim);
            kkt.view_mut((0, 0), (n, n)).copy_from(&h);
            for i in 0..n {
                kkt[(i, i)] += reg;
            }
            kkt.view_mut((n, 0), (rows, n)).copy_from(&c);
            kkt.view_mut((0, n), (n, rows)).copy_from(&c.transpose());
            let mut rhs = DVector::zeros(dim);
            rhs.rows_mut(0, n).copy_from(&(-&g));
            rhs.rows_mut(n, rows).copy_from(&(&c_rhs - &c * &x));
            let svd = kkt.svd(true, true);
            let cutoff = 1e-13 * svd.singular_values.max();
            let dx = svd.solve(&rhs, cutoff).ok()?.rows(0, n).into_owned();
            x += &dx;
            if dx.amax() <= 1e-14 * (1.0 + x.amax()) {
                break;
            }
        }
        let vals = self.slack_values(&x);
        if vals.iter().any(|&v| v < -1e-12 * (1.0 + x.amax())) {
            return None;
        }

        // Degenerate vertices admit many multiplier vectors, and a minimum-
        // norm one can have negative entries. Take the one nearest the
        // barrier's estimate instead, pinning negatives to zero.
        let grad = self.objective_derivatives(&x).0;
        let scale = grad.amax().max(1.0);
        let mut prior = DVector::zeros(rows);
        for (row, &(d, j)) in self.eq_nodes.iter().enumerate() {
            prior[row] = guess.phi[d][j] - guess.mu[d][j];
        }
        let bound_guess = self.bound_values(guess);
        for (row, &s) in active.iter().enumerate() {
            prior[m_eq + row] = bound_guess[s];
        }
        let ct = c.transpose();
        let mut pinned = vec![false; rows];
        let mut y = prior.clone();
        for _ in 0..=active.len() {
            let keep = DVector::from_iterator(rows, pinned.iter().map(|&p| if p { 0.0 } else { 1.0 }));
            let base = prior.component_mul(&keep);
            let m = DMatrix::from_fn(n, rows, |i, j| ct[(i, j)] * keep[j]);
            let gap = -&grad - &ct * &base;
            let mmt = &m * m.transpose();
            let svd = mmt.svd(true, true);
            let cutoff = 1e-13 * svd.singular_values.max().max(1e-300);
            let corr = m.transpose() * svd.solve(&gap, cutoff).ok()?;
            y = base + corr;
            let mut changed = false;
            for row in m_eq..rows {
                if !pinned[row] && y[row] < 0.0 {
                    pinned[row] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        if (&ct * &y + &grad).amax() > 1e-9 * scale {
            return None;
        }
        let mut mult = vec![0.0; self.slacks.len()];
        for (row, &s) in active.iter().enumerate() {
            mult[s] = y[m_eq + row];
        }
        let flows = self.flow_pairs().len();
        // snap active lower bounds exactly
        for &s in &active {
            if s % 2 == 0 {
                let i = self.slacks[s].terms[0].0;
                x[i] = 0.0;
            }
        }
        let bounds = (0..flows)
            .map(|k| (mult[2 * k].max(0.0), mult[2 * k + 1].max(0.0)))
            .collect();
        Some((x, bounds))
    }

    /// `(rho, w)` of `st` laid out like the slacks.
    fn bound_values(&self, st: &AllocationState) -> Vec<f64> {
        let mut out = vec![0.0; self.slacks.len()];
        let mut k = 0;
        for (d, fv) in self.layout.f_var.iter().enumerate() {
            for (e, v) in fv.iter().enumerate() {
                if v.is_some() {
                    out[2 * k] = st.rho[d][e];
                    out[2 * k + 1] = st.w[d][e];
                    k += 1;
                }
            }
        }
        out
    }

    /// Primal point plus the multipliers implied by the barrier center,
    /// completed for the flow variables fixed at zero.
    ///
    /// `bounds[k]` holds `(rho, w)` of the `k`-th usable flow variable.
    fn extract_state(
        &self,
        x: &DVector<f64>,
        bounds: &[(f64, f64)],
        support: &Support,
    ) -> AllocationState {
        let prob = self.prob;
        let mut st = AllocationState::zeros(prob);
        // rounding can leave zero rates a few ulps negative
        st.r = self.rates(x).into_iter().map(|r| r.max(0.0)).collect();
        let mut k = 0;
        for (d, fv) in self.layout.f_var.iter().enumerate() {
            for (e, v) in fv.iter().enumerate() {
                if let Some(i) = *v {
                    st.f[d][e] = x[i].max(0.0);
                    (st.rho[d][e], st.w[d][e]) = bounds[k];
                    k += 1;
                }
            }
        }

        // Conservation multipliers nu^d_j (L += nu q) by least squares on the
        // flow-stationarity equations of usable variables:
        //   nu_head - nu_tail = rho - w
        let grad = prob.objective_gradient(&st.r);
        let mut nu = vec![vec![0.0; prob.num_nodes()]; prob.num_destinations()];
        for d in 0..prob.num_destinations() {
            let nodes: Vec<usize> = (0..prob.num_nodes())
                .filter(|&j| j != prob.source && support.from_source[j] && support.to_dest[d][j])
                .collect();
            let mut col = vec![usize::MAX; prob.num_nodes()];
            for (c, &j) in nodes.iter().enumerate() {
                col[j] = c;
            }
            let usable: Vec<usize> = (0..prob.num_links()).filter(|&e| support.usable[d][e]).collect();
            let mut a = DMatrix::zeros(usable.len(), nodes.len());
            let mut b = DVector::zeros(usable.len());
            for (k, &e) in usable.iter().enumerate() {
                let (tl, hd) = prob.link_ends[e];
                a[(k, col[hd])] += 1.0;
                if tl != prob.source {
                    a[(k, col[tl])] -= 1.0;
                }
                b[k] = st.rho[d][e] - st.w[d][e];
            }
            if !nodes.is_empty() {
                let ata = a.transpose() * &a;
                let atb = a.transpose() * &b;
                let sol = ata
                    .clone()
                    .cholesky()
                    .map(|c| c.solve(&atb))
                    .unwrap_or_else(|| ata.svd(true, true).solve(&atb, 1e-12).expect("svd"));
                for (c, &j) in nodes.iter().enumerate() {
                    nu[d][j] = sol[c];
                }
            }
        }

        // Flow variables that no walk can use stay at zero. Nodes the source
        // cannot reach get potential -M, nodes that cannot reach the
        // destination get +M; every fixed variable then has rho >= 0.
        let big = 1.0
            + nu.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()))
            + grad.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for d in 0..prob.num_destinations() {
            for j in 0..prob.num_nodes() {
                if j == prob.source {
                    continue;
                }
                if !support.from_source[j] {
                    nu[d][j] = -big;
                } else if !support.to_dest[d][j] {
                    nu[d][j] = big;
                }
            }
        }
        for e in 0..prob.num_links() {
            if self.layout.r_var[e].is_none() {
                // the rate is pinned at zero: one commodity's upper multiplier
                // absorbs the whole marginal cost
                st.w[0][e] = grad[e];
            }
        }
        for d in 0..prob.num_destinations() {
            for e in 0..prob.num_links() {
                if support.usable[d][e] {
                    continue;
                }
                let (tl, hd) = prob.link_ends[e];
                let tail_nu = if tl == prob.source { 0.0 } else { nu[d][tl] };
                st.rho[d][e] = (nu[d][hd] - tail_nu + st.w[d][e]).max(0.0);
            }
            for j in 0..prob.num_nodes() {
                st.phi[d][j] = nu[d][j].max(0.0);
                st.mu[d][j] = (-nu[d][j]).max(0.0);
            }
        }
        st
    }
}

/// Polished point and `(rho, w)` for each usable flow variable.
type Polished = (DVector<f64>, Vec<(f64, f64)>);

/// Multipliers for the all-zero allocation of a zero-demand program.
fn trivial_duals(prob: &AllocationProblem, st: &mut AllocationState) -> KktResiduals {
    let grad = prob.objective_gradient(&st.r);
    st.w[0].copy_from_slice(&grad);
    st.rho[0].copy_from_slice(&grad);
    kkt_residuals(prob, st)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LinkStat, Node, NodeId};
    use approx::assert_relative_eq;

    fn unit_net(n: u32, edges: &[(NodeId, NodeId)], d: &[NodeId], rs: f64) -> NetworkSpec {
        let nodes = (0..n).map(|id| Node { id, noise_var: 1.0 }).collect();
        let links = edges
            .iter()
            .map(|&(tail, head)| LinkStat { tail, head, variance: 0.5, power: 1.0 })
            .collect();
        NetworkSpec::new(nodes, links, 0, d.to_vec(), rs).unwrap()
    }

    fn diamond() -> AllocationProblem {
        AllocationProblem::new(unit_net(4, &[(0, 1), (0, 2), (1, 3), (2, 3)], &[3], 2.0))
    }

    #[test]
    fn objective_values() {
        let p = diamond();
        assert_eq!(objective(&p, &[0.0; 4]), 3.0);
        assert_eq!(objective(&p, &[1.0; 4]), 8.0);
        let single = AllocationProblem::new(unit_net(2, &[(0, 1)], &[1], 1.0));
        assert_relative_eq!(objective(&single, &[1.7]), 1.7f64.exp2());
    }

    #[test]
    fn zero_state_primal_violation_is_demand() {
        let p = diamond();
        let res = kkt_residuals(&p, &AllocationState::zeros(&p));
        assert_eq!(res.primal, 2.0);
    }

    #[test]
    fn hand_built_single_path_kkt_point() {
        // s -> 1 -> 2, R_s = 2: r = f = 2, objective 8
        let p = AllocationProblem::new(unit_net(3, &[(0, 1), (1, 2)], &[2], 2.0));
        let mut st = AllocationState::zeros(&p);
        st.r = vec![2.0, 2.0];
        st.f = vec![vec![2.0, 2.0]];
        let g = 4.0 * LN_2;
        st.w = vec![vec![g, g]];
        // f-stationarity: w + nu_head - nu_tail = 0
        st.mu[0][1] = g;
        st.mu[0][2] = 2.0 * g;
        let res = kkt_residuals(&p, &st);
        assert!(res.primal <= 1e-10, "{res:?}");
        assert!(res.stationarity <= 1e-10, "{res:?}");
        assert!(res.complementarity <= 1e-10, "{res:?}");
        assert_eq!(res.dual, 0.0);
    }

    #[test]
    fn single_path_solution() {
        let p = AllocationProblem::new(unit_net(3, &[(0, 1), (1, 2)], &[2], 2.0));
        let sol = solve_centralized(&p, &Tolerances::default()).unwrap();
        assert!(sol.report.converged, "{:?}", sol.report);
        assert_relative_eq!(sol.report.objective, 8.0, max_relative = 1e-6);
        for r in &sol.state.r {
            assert_relative_eq!(*r, 2.0, max_relative = 1e-6);
        }
    }

    #[test]
    fn diamond_splits_evenly() {
        let sol = solve_centralized(&diamond(), &Tolerances::default()).unwrap();
        assert!(sol.report.converged, "{:?}", sol.report);
        assert_relative_eq!(sol.report.objective, 8.0, max_relative = 1e-6);
        for r in &sol.state.r {
            assert!((r - 1.0).abs() < 1e-5, "{:?}", sol.state.r);
        }
        assert!(sol.state.envelope_gap() < 1e-5);
    }

    #[test]
    fn butterfly_matches_grid_search() {
        let edges = [(0, 1), (0, 2), (0, 3), (1, 4), (2, 5), (3, 4), (3, 5)];
        let p = AllocationProblem::new(unit_net(6, &edges, &[4, 5], 2.0));
        let sol = solve_centralized(&p, &Tolerances::default()).unwrap();
        assert!(sol.report.converged, "{:?}", sol.report);

        // x1 on 0->1 and x2 on 0->2; the shared link 0->3 carries
        // 2 - min(x1, x2) while 3->4 and 3->5 top each sink up to 2
        let mut oracle = f64::INFINITY;
        for i in 0..=200 {
            for j in 0..=200 {
                let (x1, x2) = (i as f64 / 100.0, j as f64 / 100.0);
                let shared = 2.0 - x1.min(x2);
                let v = x1.exp2() + x2.exp2() + shared.exp2() + 8.0;
                oracle = oracle.min(v);
            }
        }
        assert!(sol.report.objective <= oracle + 1e-9);
        assert!(oracle - sol.report.objective < 1e-4, "{} vs {oracle}", sol.report.objective);
        assert_relative_eq!(sol.report.objective, 8.0 + 4.0 * 2f64.sqrt(), max_relative = 1e-9);
        assert!(sol.state.envelope_gap() < 1e-5);
        let res = sol.report.residuals;
        assert!(res.stationarity < 1e-8 && res.complementarity < 1e-8, "{res:?}");
    }

    #[test]
    fn zero_demand_is_immediate() {
        let p = AllocationProblem::new(unit_net(4, &[(0, 1), (0, 2), (1, 3), (2, 3)], &[3], 0.0));
        let sol = solve_centralized(&p, &Tolerances::default()).unwrap();
        assert!(sol.report.converged, "{:?}", sol.report);
        assert!(sol.state.r.iter().all(|&r| r == 0.0));
        assert_eq!(sol.report.newton_steps, 0);
    }

    #[test]
    fn dead_ends_and_unreachable_nodes() {
        // 3 hangs off the destination, 4 -> 1 comes from a node the source
        // never reaches
        let nodes = (0..5).map(|id| Node { id, noise_var: 1.0 }).collect();
        let link = |tail, head| LinkStat { tail, head, variance: 0.5, power: 1.0 };
        let net = NetworkSpec::new(
            nodes,
            vec![link(0, 1), link(1, 2), link(2, 3), link(4, 1), link(0, 2)],
            0,
            vec![2],
            1.5,
        )
        .unwrap();
        let p = AllocationProblem::new(net);
        let sol = solve_centralized(&p, &Tolerances::default()).unwrap();
        assert!(sol.report.converged, "{:?}", sol.report);
        let e23 = p.network().link_index(2, 3).unwrap();
        let e41 = p.network().link_index(4, 1).unwrap();
        assert_eq!(sol.state.r[e23], 0.0);
        assert_eq!(sol.state.r[e41], 0.0);
    }

    #[test]
    fn demand_beyond_cap_is_rejected() {
        let p = AllocationProblem::new(unit_net(2, &[(0, 1)], &[1], 80.0));
        assert!(solve_centralized(&p, &Tolerances::default()).is_err());
    }
}
