//! Primal-dual gradient dynamics run as per-node processors.
//!
//! Every node other than the source owns the rate and flow variables of its
//! in-links together with its own conservation multipliers. A round is one
//! synchronous message exchange along the links followed by one forward-Euler
//! step at every processor. No message travels more than one hop.
//!
//! Internally rates are in nats (`r ln 2`), so the laws carry plain `e^x`
//! and `lambda_j e^{R_j}` equals the base-2 objective term exactly. States and
//! traces are reported in bits.

use std::f64::consts::LN_2;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::Serialize;

use crate::allocation::{objective, AllocationProblem, AllocationState};
use crate::error::{Error, Result};
use crate::network::NodeId;

/// Per-variable gains of the gradient laws plus the Euler step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSizes {
    /// `tau[e]`, rate gain per link.
    pub tau: Vec<f64>,
    /// `k[d][e]`, flow gain.
    pub k: Vec<Vec<f64>>,
    /// `alpha[d][e]`, gain of the `f >= 0` multiplier.
    pub alpha: Vec<Vec<f64>>,
    /// `theta[d][e]`, gain of the `f <= r` multiplier.
    pub theta: Vec<Vec<f64>>,
    /// `beta[d][node]`, `gamma[d][node]`: conservation multiplier gains.
    pub beta: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub euler_dt: f64,
    /// The laws descend `F / objective_scale`; multipliers are reported
    /// for `F` itself.
    pub objective_scale: f64,
}

impl StepSizes {
    /// Gains drawn uniformly from `[0.5, 1.5)` times `primal` (for `tau`, `k`)
    /// or `dual` (for the multipliers).
    ///
    /// The objective is normalized by `max_j lambda_j 2^{R_s}`, the marginal
    /// cost of a receiver carrying the full demand, so the multipliers stay
    /// near one and the gains need no retuning across SNR.
    pub fn random(prob: &AllocationProblem, seed: u64, primal: f64, dual: f64) -> Result<Self> {
        if !(primal > 0.0 && dual > 0.0 && primal.is_finite() && dual.is_finite()) {
            return Err(Error::InvalidInput("step-size scales must be positive".into()));
        }
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut draw = |scale: f64, len: usize| -> Vec<f64> {
            (0..len).map(|_| scale * rng.random_range(0.5..1.5)).collect()
        };
        let (links, nodes, dests) = (prob.num_links(), prob.num_nodes(), prob.num_destinations());
        let tau = draw(primal, links);
        let k = (0..dests).map(|_| draw(primal, links)).collect();
        let alpha = (0..dests).map(|_| draw(dual, links)).collect();
        let theta = (0..dests).map(|_| draw(dual, links)).collect();
        let beta = (0..dests).map(|_| draw(dual, nodes)).collect();
        let gamma = (0..dests).map(|_| draw(dual, nodes)).collect();
        Ok(Self {
            tau,
            k,
            alpha,
            theta,
            beta,
            gamma,
            euler_dt: 1.0,
            objective_scale: default_scale(prob),
        })
    }

    pub fn with_euler_dt(self, euler_dt: f64) -> Self {
        Self { euler_dt, ..self }
    }
}

fn default_scale(prob: &AllocationProblem) -> f64 {
    let top = prob.receivers().iter().fold(0.0_f64, |m, r| m.max(r.1));
    top * prob.multicast_rate().exp2()
}

/// `[x]^+_p`: zero when both the candidate derivative and the current value
/// are negative.
pub fn projected(x: f64, p: f64) -> f64 {
    if x < 0.0 && p < 0.0 {
        0.0
    } else {
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageKind {
    /// Head to tail: the head's flows on the link.
    FlowReport,
    /// Tail to head: the tail's multipliers and conservation residuals.
    DualReport,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Flows(Vec<f64>),
    Duals {
        phi: Vec<f64>,
        mu: Vec<f64>,
        q: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub link: usize,
    pub sender: NodeId,
    pub receiver: NodeId,
    pub payload: Payload,
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self.payload {
            Payload::Flows(_) => MessageKind::FlowReport,
            Payload::Duals { .. } => MessageKind::DualReport,
        }
    }
}

/// Log entry for one delivered message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MessageRecord {
    pub round: u32,
    pub link: u32,
    pub sender: NodeId,
    pub receiver: NodeId,
    pub kind: MessageKind,
}

/// A tail's `(phi, mu, q)` per destination.
pub type DualReport = (Vec<f64>, Vec<f64>, Vec<f64>);

/// State held by one non-source node (rates in nats).
#[derive(Debug, Clone, PartialEq)]
pub struct NodeProcessor {
    pub node: usize,
    pub id: NodeId,
    /// Rate parameter of the in-links (zero when there are none).
    pub lambda: f64,
    pub in_links: Vec<usize>,
    pub out_links: Vec<usize>,
    /// Per in-link.
    pub r: Vec<f64>,
    /// `[d][in-link]`.
    pub f: Vec<Vec<f64>>,
    pub rho: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    /// `[d]`.
    pub phi: Vec<f64>,
    pub mu: Vec<f64>,
    /// `[d]`, demand in nats.
    pub psi: Vec<f64>,
    /// Per in-link: the tail's `(phi, mu, q)` report, `None` until delivered.
    pub upstream: Vec<Option<DualReport>>,
    /// Per in-link: whether the tail is the source.
    pub from_source: Vec<bool>,
    /// Per out-link: flows reported by the head.
    pub downstream: Vec<Option<Vec<f64>>>,
}

impl NodeProcessor {
    fn dests(&self) -> usize {
        self.phi.len()
    }

    /// `q^d_j` from local in-flows and the cached out-flows.
    pub fn residuals(&self) -> Result<Vec<f64>> {
        (0..self.dests())
            .map(|d| {
                let mut q = self.f[d].iter().sum::<f64>() - self.psi[d];
                for (slot, cache) in self.downstream.iter().enumerate() {
                    let flows = cache.as_ref().ok_or_else(|| {
                        Error::Protocol(format!(
                            "node {}: no flow report on out-link {}",
                            self.id, self.out_links[slot]
                        ))
                    })?;
                    q -= flows[d];
                }
                Ok(q)
            })
            .collect()
    }

    /// One Euler step of the gradient laws.
    ///
    /// Returns the number of multipliers clamped back to zero.
    pub fn local_update(&mut self, steps: &StepSizes) -> Result<u64> {
        let q = self.residuals()?;
        let dt = steps.euler_dt;
        let big_r: f64 = self.r.iter().sum();
        let marginal = self.lambda / steps.objective_scale * big_r.exp();

        let mut dr = vec![0.0; self.in_links.len()];
        let mut df = vec![vec![0.0; self.in_links.len()]; self.dests()];
        let mut drho = df.clone();
        let mut dw = df.clone();
        for (a, &e) in self.in_links.iter().enumerate() {
            let cache = self.upstream[a].as_ref().ok_or_else(|| {
                Error::Protocol(format!("node {}: no dual report on in-link {e}", self.id))
            })?;
            let mut pull = -marginal;
            for d in 0..self.dests() {
                let (f, r) = (self.f[d][a], self.r[a]);
                let up = (f - r).exp();
                pull += self.w[d][a] * up;
                let mut delta = -self.phi[d] * q[d].exp() + self.mu[d] * (-q[d]).exp();
                if !self.from_source[a] {
                    let (phi_i, mu_i, q_i) = (cache.0[d], cache.1[d], cache.2[d]);
                    delta += phi_i * q_i.exp() - mu_i * (-q_i).exp();
                }
                df[d][a] = steps.k[d][e] * (self.rho[d][a] * (-f).exp() - self.w[d][a] * up + delta);
                drho[d][a] = steps.alpha[d][e] * projected((-f).exp_m1(), self.rho[d][a]);
                dw[d][a] = steps.theta[d][e] * projected((f - r).exp_m1(), self.w[d][a]);
            }
            dr[a] = steps.tau[e] * pull;
        }

        let mut clamps = 0;
        let mut advance = |v: &mut f64, rate: f64| {
            *v += dt * rate;
            if *v < 0.0 {
                *v = 0.0;
                clamps += 1;
            }
        };
        for d in 0..self.dests() {
            let dphi = steps.beta[d][self.node] * projected(q[d].exp_m1(), self.phi[d]);
            let dmu = steps.gamma[d][self.node] * projected((-q[d]).exp_m1(), self.mu[d]);
            advance(&mut self.phi[d], dphi);
            advance(&mut self.mu[d], dmu);
            for a in 0..self.in_links.len() {
                advance(&mut self.rho[d][a], drho[d][a]);
                advance(&mut self.w[d][a], dw[d][a]);
                self.f[d][a] += dt * df[d][a];
            }
        }
        for (r, d) in self.r.iter_mut().zip(dr) {
            *r += dt * d;
        }
        Ok(clamps)
    }
}

/// All processors of a network plus the message log.
#[derive(Debug, Clone)]
pub struct Simulation<'a> {
    prob: &'a AllocationProblem,
    /// Indexed by internal node index; `None` for the source.
    procs: Vec<Option<NodeProcessor>>,
    // link -> position in its head's and tail's link lists
    in_slot: Vec<usize>,
    out_slot: Vec<usize>,
    round: u32,
    scale: f64,
    log: Option<Vec<MessageRecord>>,
    messages: u64,
    locality_violations: u64,
}

impl<'a> Simulation<'a> {
    /// Processors at the zero state.
    pub fn new(prob: &'a AllocationProblem) -> Self {
        let net = prob.network();
        let dests = prob.num_destinations();
        let mut in_slot = vec![0; prob.num_links()];
        let mut out_slot = vec![0; prob.num_links()];
        let procs = (0..prob.num_nodes())
            .map(|j| {
                let ins = net.in_links(j).to_vec();
                let outs = net.out_links(j).to_vec();
                for (a, &e) in ins.iter().enumerate() {
                    in_slot[e] = a;
                }
                for (b, &e) in outs.iter().enumerate() {
                    out_slot[e] = b;
                }
                if j == prob.source_index() {
                    return None;
                }
                let zeros = vec![vec![0.0; ins.len()]; dests];
                Some(NodeProcessor {
                    node: j,
                    id: net.nodes()[j].id,
                    lambda: net.receiver_lambda(j).unwrap_or(0.0),
                    r: vec![0.0; ins.len()],
                    f: zeros.clone(),
                    rho: zeros.clone(),
                    w: zeros,
                    phi: vec![0.0; dests],
                    mu: vec![0.0; dests],
                    psi: (0..dests).map(|d| prob.demand(d, j) * LN_2).collect(),
                    upstream: vec![None; ins.len()],
                    from_source: ins
                        .iter()
                        .map(|&e| prob.link_ends(e).0 == prob.source_index())
                        .collect(),
                    downstream: vec![None; outs.len()],
                    in_links: ins,
                    out_links: outs,
                })
            })
            .collect();
        Self {
            prob,
            procs,
            in_slot,
            out_slot,
            round: 0,
            scale: 1.0,
            log: None,
            messages: 0,
            locality_violations: 0,
        }
    }

    /// Records every delivered message from now on.
    pub fn with_message_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    /// Loads a state given in bits (multipliers of the base-2 program).
    pub fn load_state(&mut self, st: &AllocationState, steps: &StepSizes) {
        self.scale = steps.objective_scale;
        let c = LN_2 * self.scale;
        for p in self.procs.iter_mut().flatten() {
            for (a, &e) in p.in_links.iter().enumerate() {
                p.r[a] = st.r[e] * LN_2;
                for d in 0..p.phi.len() {
                    p.f[d][a] = st.f[d][e] * LN_2;
                    p.rho[d][a] = st.rho[d][e] / c;
                    p.w[d][a] = st.w[d][e] / c;
                }
            }
            for d in 0..p.phi.len() {
                p.phi[d] = st.phi[d][p.node] / c;
                p.mu[d] = st.mu[d][p.node] / c;
            }
        }
    }

    /// Current state in bits.
    pub fn state(&self) -> AllocationState {
        let c = LN_2 * self.scale;
        let mut st = AllocationState::zeros(self.prob);
        for p in self.procs.iter().flatten() {
            for (a, &e) in p.in_links.iter().enumerate() {
                st.r[e] = p.r[a] / LN_2;
                for d in 0..p.phi.len() {
                    st.f[d][e] = p.f[d][a] / LN_2;
                    st.rho[d][e] = p.rho[d][a] * c;
                    st.w[d][e] = p.w[d][a] * c;
                }
            }
            for d in 0..p.phi.len() {
                st.phi[d][p.node] = p.phi[d] * c;
                st.mu[d][p.node] = p.mu[d] * c;
            }
        }
        st
    }

    pub fn processors(&self) -> impl Iterator<Item = &NodeProcessor> {
        self.procs.iter().flatten()
    }

    pub fn message_log(&self) -> Option<&[MessageRecord]> {
        self.log.as_deref()
    }

    pub fn messages_sent(&self) -> u64 {
        self.messages
    }

    pub fn locality_violations(&self) -> u64 {
        self.locality_violations
    }

    fn deliver(&mut self, msg: Message) {
        let (tail, head) = self.prob.link_ends(msg.link);
        let ids = |k: usize| self.prob.network().nodes()[k].id;
        let (from, to) = match msg.kind() {
            MessageKind::FlowReport => (head, tail),
            MessageKind::DualReport => (tail, head),
        };
        if ids(from) != msg.sender || ids(to) != msg.receiver {
            self.locality_violations += 1;
        }
        self.messages += 1;
        if let Some(log) = &mut self.log {
            log.push(MessageRecord {
                round: self.round,
                link: msg.link as u32,
                sender: msg.sender,
                receiver: msg.receiver,
                kind: msg.kind(),
            });
        }
        match msg.payload {
            Payload::Flows(flows) => {
                if let Some(p) = &mut self.procs[to] {
                    p.downstream[self.out_slot[msg.link]] = Some(flows);
                }
            }
            Payload::Duals { phi, mu, q } => {
                if let Some(p) = &mut self.procs[to] {
                    p.upstream[self.in_slot[msg.link]] = Some((phi, mu, q));
                }
            }
        }
    }

    /// One synchronous exchange in ascending link order: flow reports first,
    /// then dual reports computed from the fresh flows.
    ///
    /// The source runs no processor; its stub sends all-zero dual reports,
    /// which the head ignores.
    pub fn exchange_round(&mut self) -> Result<()> {
        let nodes = self.prob.network().nodes();
        let dests = self.prob.num_destinations();
        let mut batch = Vec::with_capacity(2 * self.prob.num_links());
        for e in 0..self.prob.num_links() {
            let (tail, head) = self.prob.link_ends(e);
            let p = self.procs[head].as_ref().expect("the source has no in-links");
            let a = self.in_slot[e];
            batch.push(Message {
                link: e,
                sender: nodes[head].id,
                receiver: nodes[tail].id,
                payload: Payload::Flows((0..dests).map(|d| p.f[d][a]).collect()),
            });
        }
        for msg in batch.drain(..) {
            self.deliver(msg);
        }
        for e in 0..self.prob.num_links() {
            let (tail, head) = self.prob.link_ends(e);
            let payload = match &self.procs[tail] {
                Some(p) => Payload::Duals {
                    phi: p.phi.clone(),
                    mu: p.mu.clone(),
                    q: p.residuals()?,
                },
                None => Payload::Duals {
                    phi: vec![0.0; dests],
                    mu: vec![0.0; dests],
                    q: vec![0.0; dests],
                },
            };
            batch.push(Message {
                link: e,
                sender: nodes[tail].id,
                receiver: nodes[head].id,
                payload,
            });
        }
        for msg in batch {
            self.deliver(msg);
        }
        Ok(())
    }

    /// Exchange then update everywhere; returns the round's clamp events.
    pub fn step(&mut self, steps: &StepSizes) -> Result<u64> {
        self.scale = steps.objective_scale;
        self.exchange_round()?;
        let mut clamps = 0;
        for p in self.procs.iter_mut().flatten() {
            clamps += p.local_update(steps)?;
        }
        self.round += 1;
        Ok(clamps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopCriterion {
    pub max_rounds: u64,
    pub window: u64,
    /// Relative objective change over `window` rounds.
    pub objective_tol: f64,
    /// Bound on `max |q|` in bits.
    pub flow_tol: f64,
    /// Divergence when the objective exceeds this multiple of the initial one.
    pub divergence_factor: f64,
}

impl Default for StopCriterion {
    fn default() -> Self {
        Self {
            max_rounds: 100_000,
            window: 100,
            objective_tol: 1e-6,
            flow_tol: 1e-4,
            divergence_factor: 1e6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Converged,
    RoundCap,
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub round: u64,
    pub objective: f64,
    pub max_flow_violation: f64,
    pub max_dual: f64,
    pub clamp_events: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub status: RunStatus,
    pub rounds: u64,
    pub objective: f64,
    pub messages: u64,
    pub locality_violations: u64,
    pub clamp_events: u64,
    pub trace: Vec<TraceRow>,
    pub state: AllocationState,
    /// Every delivered message, when the simulation was logging.
    #[serde(skip)]
    pub message_log: Option<Vec<MessageRecord>>,
}

fn trace_row(prob: &AllocationProblem, st: &AllocationState, round: u64, clamps: u64) -> TraceRow {
    let q = st.flow_residuals(prob);
    let max_dual = st
        .rho
        .iter()
        .chain(&st.w)
        .chain(&st.phi)
        .chain(&st.mu)
        .flatten()
        .fold(0.0_f64, |m, &v| m.max(v));
    TraceRow {
        round,
        objective: objective(prob, &st.r),
        max_flow_violation: q.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs())),
        max_dual,
        clamp_events: clamps,
    }
}

/// Runs synchronous rounds from the zero state until `stop` decides.
pub fn run(prob: &AllocationProblem, steps: &StepSizes, stop: &StopCriterion) -> Result<RunReport> {
    run_simulation(Simulation::new(prob), steps, stop)
}

/// Runs an already configured simulation (for example one with a message
/// log or a loaded state).
pub fn run_simulation(
    mut sim: Simulation<'_>,
    steps: &StepSizes,
    stop: &StopCriterion,
) -> Result<RunReport> {
    let prob = sim.prob;
    let initial = trace_row(prob, &sim.state(), 0, 0);
    let mut trace = vec![initial];
    let limit = initial.objective.max(f64::MIN_POSITIVE) * stop.divergence_factor;
    let mut status = RunStatus::RoundCap;
    let mut total_clamps = 0;
    for round in 1..=stop.max_rounds {
        let clamps = sim.step(steps)?;
        total_clamps += clamps;
        let row = trace_row(prob, &sim.state(), round, clamps);
        trace.push(row);
        if !row.objective.is_finite() || row.objective > limit {
            status = RunStatus::Diverged;
            break;
        }
        if round >= stop.window {
            let past = trace[(round - stop.window) as usize].objective;
            let change = (row.objective - past).abs() / row.objective.abs().max(f64::MIN_POSITIVE);
            if change < stop.objective_tol && row.max_flow_violation < stop.flow_tol {
                status = RunStatus::Converged;
                break;
            }
        }
    }
    let state = sim.state();
    Ok(RunReport {
        status,
        rounds: trace.len() as u64 - 1,
        objective: objective(prob, &state.r),
        messages: sim.messages_sent(),
        locality_violations: sim.locality_violations(),
        clamp_events: total_clamps,
        trace,
        state,
        message_log: sim.log.take(),
    })
}

/// Writes the trace as CSV with a header row.
pub fn write_trace_csv<W: Write>(trace: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in trace {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}
