//! A wireless network viewed as a collection of fading MACs.
//!
//! Every node other than the source decodes all of its in-neighbors jointly;
//! different receivers do not interfere. Link `(i, j)` has rate parameter
//! `lambda_{i,j} = sigma_j^2 / (2 v_{i,j}^2 p_{i,j})`, and all in-links of a
//! receiver must share the same value `lambda_j`. Because all gains are
//! independent, the network outage is `1 - prod_j (1 - P_j)`.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mac::{self, MacSpec, Method, OutageEstimate, RateVector};
use crate::monte_carlo::{self, McConfig};

/// Relative tolerance for the per-receiver equal-lambda requirement.
pub const LAMBDA_MATCH_TOL: f64 = 1e-12;

/// Slack allowed when comparing a max-flow against the multicast demand.
pub const FLOW_TOL: f64 = 1e-9;

pub type NodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Node {
    pub id: NodeId,
    /// Receiver noise variance `sigma^2`.
    pub noise_var: f64,
}

/// Statistics of one directed link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkStat {
    pub tail: NodeId,
    pub head: NodeId,
    /// Channel variance parameter `v^2` of `h ~ CN(0, v^2)`.
    pub variance: f64,
    /// Average transmit power `p`.
    pub power: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    nodes: Vec<Node>,
    // sorted by (tail, head)
    links: Vec<LinkStat>,
    source: NodeId,
    destinations: Vec<NodeId>,
    multicast_rate: f64,
    index: BTreeMap<NodeId, usize>,
    in_links: Vec<Vec<usize>>,
    out_links: Vec<Vec<usize>>,
    link_lambda: Vec<f64>,
}

impl NetworkSpec {
    pub fn new(
        nodes: Vec<Node>,
        mut links: Vec<LinkStat>,
        source: NodeId,
        destinations: Vec<NodeId>,
        multicast_rate: f64,
    ) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (k, node) in nodes.iter().enumerate() {
            if index.insert(node.id, k).is_some() {
                return Err(invalid(format!("node {} is listed twice", node.id)));
            }
            if !(node.noise_var > 0.0) || !node.noise_var.is_finite() {
                return Err(invalid(format!(
                    "node {}: noise_var must be positive, got {}",
                    node.id, node.noise_var
                )));
            }
        }
        links.sort_by_key(|l| (l.tail, l.head));
        for w in links.windows(2) {
            if (w[0].tail, w[0].head) == (w[1].tail, w[1].head) {
                return Err(invalid(format!(
                    "link ({}, {}) is listed twice",
                    w[0].tail, w[0].head
                )));
            }
        }
        let mut in_links = vec![Vec::new(); nodes.len()];
        let mut out_links = vec![Vec::new(); nodes.len()];
        let mut link_lambda = Vec::with_capacity(links.len());
        for (e, l) in links.iter().enumerate() {
            let (Some(&t), Some(&h)) = (index.get(&l.tail), index.get(&l.head)) else {
                return Err(invalid(format!(
                    "link ({}, {}) refers to an unknown node",
                    l.tail, l.head
                )));
            };
            if t == h {
                return Err(invalid(format!("link ({}, {}) is a self-loop", l.tail, l.head)));
            }
            for (name, v) in [("variance", l.variance), ("power", l.power)] {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(invalid(format!(
                        "link ({}, {}): {name} must be positive, got {v}",
                        l.tail, l.head
                    )));
                }
            }
            link_lambda.push(nodes[h].noise_var / (2.0 * l.variance * l.power));
            out_links[t].push(e);
            in_links[h].push(e);
        }

        let Some(&s) = index.get(&source) else {
            return Err(invalid(format!("source {source} is not a node")));
        };
        if !in_links[s].is_empty() {
            return Err(invalid(format!("source {source} must not have in-links")));
        }
        let mut destinations = destinations;
        destinations.sort_unstable();
        destinations.dedup();
        if destinations.is_empty() {
            return Err(invalid("at least one destination is required"));
        }
        if !(multicast_rate >= 0.0) || !multicast_rate.is_finite() {
            return Err(invalid(format!(
                "multicast_rate must be a finite nonnegative number, got {multicast_rate}"
            )));
        }

        let spec = Self {
            nodes,
            links,
            source,
            destinations,
            multicast_rate,
            index,
            in_links,
            out_links,
            link_lambda,
        };

        let reach = spec.reachable_from(s);
        for &d in &spec.destinations {
            let Some(&k) = spec.index.get(&d) else {
                return Err(invalid(format!("destination {d} is not a node")));
            };
            if d == source {
                return Err(invalid("the source cannot be a destination"));
            }
            if !reach[k] {
                return Err(invalid(format!(
                    "destination {d} is not reachable from source {source}"
                )));
            }
        }
        for (j, ins) in spec.in_links.iter().enumerate() {
            let Some(&first) = ins.first() else { continue };
            let l0 = spec.link_lambda[first];
            for &e in &ins[1..] {
                let l = spec.link_lambda[e];
                if (l - l0).abs() > LAMBDA_MATCH_TOL * l0.max(l) {
                    return Err(invalid(format!(
                        "receiver {}: in-links must share one lambda, got {} on ({}, {}) and {} on ({}, {})",
                        spec.nodes[j].id,
                        l0,
                        spec.links[first].tail,
                        spec.links[first].head,
                        l,
                        spec.links[e].tail,
                        spec.links[e].head,
                    )));
                }
            }
        }
        Ok(spec)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Links in canonical `(tail, head)` order; rate vectors follow it.
    pub fn links(&self) -> &[LinkStat] {
        &self.links
    }

    pub fn source(&self) -> NodeId {
        self.source
    }

    pub fn destinations(&self) -> &[NodeId] {
        &self.destinations
    }

    pub fn multicast_rate(&self) -> f64 {
        self.multicast_rate
    }

    pub fn node_index(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn link_index(&self, tail: NodeId, head: NodeId) -> Option<usize> {
        self.links
            .binary_search_by_key(&(tail, head), |l| (l.tail, l.head))
            .ok()
    }

    /// Indices of the in-links of node `k` (internal index), ascending tail.
    pub fn in_links(&self, k: usize) -> &[usize] {
        &self.in_links[k]
    }

    pub fn out_links(&self, k: usize) -> &[usize] {
        &self.out_links[k]
    }

    pub fn link_lambda(&self, e: usize) -> f64 {
        self.link_lambda[e]
    }

    /// Internal indices of the nodes that receive on at least one link.
    pub fn receivers(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&k| !self.in_links[k].is_empty())
    }

    /// Common rate parameter of receiver `k`'s in-links.
    pub fn receiver_lambda(&self, k: usize) -> Option<f64> {
        self.in_links[k].first().map(|&e| self.link_lambda[e])
    }

    /// The MAC seen by node `id`, links in ascending tail order.
    pub fn mac_of(&self, id: NodeId) -> Result<MacSpec> {
        let k = self
            .node_index(id)
            .ok_or_else(|| invalid(format!("unknown node {id}")))?;
        let lambda = self
            .receiver_lambda(k)
            .ok_or_else(|| invalid(format!("node {id} has no in-links")))?;
        MacSpec::iid(self.in_links[k].len(), lambda)
    }

    /// In-neighbor ids of node `id`, ascending.
    pub fn in_neighbors(&self, id: NodeId) -> Vec<NodeId> {
        self.node_index(id)
            .map(|k| self.in_links[k].iter().map(|&e| self.links[e].tail).collect())
            .unwrap_or_default()
    }

    /// Receiver `k`'s slice of a full link-rate vector.
    pub fn local_rates(&self, k: usize, rates: &[f64]) -> Result<RateVector> {
        RateVector::new(self.in_links[k].iter().map(|&e| rates[e]).collect())
    }

    pub fn with_multicast_rate(&self, multicast_rate: f64) -> Result<Self> {
        Self::new(
            self.nodes.clone(),
            self.links.clone(),
            self.source,
            self.destinations.clone(),
            multicast_rate,
        )
    }

    /// Sets every link's power so that `p / sigma_head^2 = snr` (linear).
    pub fn with_snr(&self, snr: f64) -> Result<Self> {
        if !(snr > 0.0) || !snr.is_finite() {
            return Err(invalid(format!("SNR must be positive, got {snr}")));
        }
        let links = self
            .links
            .iter()
            .map(|l| LinkStat {
                power: snr * self.nodes[self.index[&l.head]].noise_var,
                ..*l
            })
            .collect();
        Self::new(
            self.nodes.clone(),
            links,
            self.source,
            self.destinations.clone(),
            self.multicast_rate,
        )
    }

    pub(crate) fn check_rates(&self, rates: &[f64]) -> Result<()> {
        if rates.len() != self.links.len() {
            return Err(Error::DimensionMismatch {
                expected: self.links.len(),
                actual: rates.len(),
            });
        }
        if let Some(r) = rates.iter().find(|&&r| !(r >= 0.0) || !r.is_finite()) {
            return Err(invalid(format!("link rate {r} is not a finite nonnegative number")));
        }
        Ok(())
    }

    fn reachable_from(&self, s: usize) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([s]);
        seen[s] = true;
        while let Some(u) = queue.pop_front() {
            for &e in &self.out_links[u] {
                let v = self.index[&self.links[e].head];
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen
    }
}

/// Which per-receiver computation [`network_outage`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutageMethod {
    /// Exact values; fails where the recursion does not resolve.
    Exact,
    /// Exact for `n <= 2`, Erlang-tail lower bound otherwise.
    Lower,
    /// Exact for `n <= 2`, quadratic-`G` upper bound otherwise.
    Upper,
    /// The weak bound `1 - e^{-lambda (2^{R} - 1)}` everywhere.
    Weak,
    /// Distinct-lambda lower bound; inapplicable to i.i.d. MACs with `n >= 2`.
    LowerDistinct,
    /// Sampled.
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeOutage {
    pub node: NodeId,
    pub links: usize,
    pub outage: OutageEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetworkOutage {
    pub total: OutageEstimate,
    pub per_node: Vec<NodeOutage>,
}

/// Network outage `1 - prod_j (1 - P_j)` over all receivers.
///
/// `mc` supplies the sampling configuration for [`OutageMethod::MonteCarlo`]
/// (per-node and whole-network estimates use derived seeds) and is ignored
/// otherwise.
pub fn network_outage(
    net: &NetworkSpec,
    rates: &[f64],
    method: OutageMethod,
    mc: &McConfig,
) -> Result<NetworkOutage> {
    net.check_rates(rates)?;
    let mut per_node = Vec::new();
    for (slot, k) in net.receivers().enumerate() {
        let id = net.nodes[k].id;
        let mac = net.mac_of(id)?;
        let r = net.local_rates(k, rates)?;
        let outage = match method {
            OutageMethod::Exact => mac::outage_exact(&mac, &r).ok_or_else(|| {
                Error::NotComputable(format!(
                    "receiver {id} has {} links; use bounds or mc",
                    mac.len()
                ))
            })?,
            OutageMethod::Lower => mac::outage_lower_iid(&mac, &r)?,
            OutageMethod::Upper => mac::outage_upper_iid(&mac, &r)?,
            OutageMethod::Weak => mac::outage_upper_weak(&mac, &r)?,
            OutageMethod::LowerDistinct => mac::outage_lower_distinct(&mac, &r).map_err(|e| {
                Error::NotApplicable(format!(
                    "receiver {id}: the distinct-lambda bound needs pairwise distinct lambda, \
                     but its {} in-links are i.i.d. ({e})",
                    mac.len()
                ))
            })?,
            OutageMethod::MonteCarlo => {
                monte_carlo::mc_mac_outage(&mac, &r, &mc.derived(slot as u64 + 1)).into()
            }
        };
        per_node.push(NodeOutage {
            node: id,
            links: mac.len(),
            outage,
        });
    }

    let total = if method == OutageMethod::MonteCarlo {
        monte_carlo::mc_network_outage(net, rates, mc)?.into()
    } else {
        let tag = combine_methods(per_node.iter().map(|n| n.outage.method))?;
        let success: f64 = per_node.iter().map(|n| 1.0 - n.outage.value).product();
        OutageEstimate::analytic(1.0 - success, tag)
    };
    Ok(NetworkOutage { total, per_node })
}

/// Combines per-receiver probabilities `P_j` by `1 - prod (1 - P_j)`.
pub fn combine_independent(per_node: &[f64]) -> f64 {
    1.0 - per_node.iter().map(|p| 1.0 - p).product::<f64>()
}

fn combine_methods(methods: impl Iterator<Item = Method>) -> Result<Method> {
    let mut tag = Method::Exact;
    for m in methods {
        tag = match (tag, m) {
            (t, Method::Exact) => t,
            (Method::Exact, m) => m,
            (t, m) if t == m => t,
            _ => return Err(Error::MixedBounds),
        };
    }
    Ok(tag)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Feasibility {
    pub feasible: bool,
    /// `(destination, s -> d max-flow)` for every destination.
    pub max_flows: Vec<(NodeId, f64)>,
}

/// Whether every destination's min-cut under capacities `rates` reaches the
/// multicast demand; network coding then achieves the multicast rate.
pub fn feasible_multicast(net: &NetworkSpec, rates: &[f64]) -> Result<Feasibility> {
    net.check_rates(rates)?;
    let s = net.index[&net.source];
    let mut max_flows = Vec::with_capacity(net.destinations.len());
    for &d in &net.destinations {
        let t = net.index[&d];
        max_flows.push((d, max_flow(net, rates, s, t)));
    }
    let feasible = max_flows
        .iter()
        .all(|&(_, f)| f >= net.multicast_rate - FLOW_TOL);
    Ok(Feasibility {
        feasible,
        max_flows,
    })
}

/// Edmonds-Karp on the link digraph.
fn max_flow(net: &NetworkSpec, cap: &[f64], s: usize, t: usize) -> f64 {
    let n = net.nodes.len();
    // residual arcs: 2e forward, 2e+1 backward
    let mut residual: Vec<f64> = cap.iter().flat_map(|&c| [c, 0.0]).collect();
    let mut adj = vec![Vec::new(); n];
    let mut ends = Vec::with_capacity(2 * cap.len());
    for (e, l) in net.links.iter().enumerate() {
        let (u, v) = (net.index[&l.tail], net.index[&l.head]);
        adj[u].push(2 * e);
        adj[v].push(2 * e + 1);
        ends.push(v);
        ends.push(u);
    }
    let mut total = 0.0;
    loop {
        let mut pred = vec![usize::MAX; n];
        let mut queue = VecDeque::from([s]);
        let mut seen = vec![false; n];
        seen[s] = true;
        while let Some(u) = queue.pop_front() {
            if u == t {
                break;
            }
            for &a in &adj[u] {
                let v = ends[a];
                if !seen[v] && residual[a] > FLOW_TOL * 1e-3 {
                    seen[v] = true;
                    pred[v] = a;
                    queue.push_back(v);
                }
            }
        }
        if !seen[t] {
            return total;
        }
        let mut push = f64::INFINITY;
        let mut v = t;
        while v != s {
            let a = pred[v];
            push = push.min(residual[a]);
            v = ends[a ^ 1];
        }
        let mut v = t;
        while v != s {
            let a = pred[v];
            residual[a] -= push;
            residual[a ^ 1] += push;
            v = ends[a ^ 1];
        }
        total += push;
    }
}
