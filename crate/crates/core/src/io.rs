//! JSON file formats and the bundled example networks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LinkStat, NetworkSpec, Node, NodeId};

/// On-disk network description. Unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub nodes: Vec<Node>,
    pub links: Vec<LinkStat>,
    pub source: NodeId,
    pub destinations: Vec<NodeId>,
    pub multicast_rate: f64,
}

impl NetworkFile {
    /// Parses and validates; serde's line/column diagnostics are kept.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: Self = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        file.to_spec()?;
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network files always serialize")
    }

    pub fn to_spec(&self) -> Result<NetworkSpec> {
        NetworkSpec::new(
            self.nodes.clone(),
            self.links.clone(),
            self.source,
            self.destinations.clone(),
            self.multicast_rate,
        )
    }

    pub fn from_spec(net: &NetworkSpec) -> Self {
        Self {
            nodes: net.nodes().to_vec(),
            links: net.links().to_vec(),
            source: net.source(),
            destinations: net.destinations().to_vec(),
            multicast_rate: net.multicast_rate(),
        }
    }
}

/// Reads and validates a network file.
pub fn load_network(text: &str) -> Result<NetworkSpec> {
    NetworkFile::from_json(text)?.to_spec()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkRate {
    pub tail: NodeId,
    pub head: NodeId,
    pub rate: f64,
}

/// Per-link rates. Other top-level fields are ignored, so a solve report can
/// be fed back as a rates file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatesFile {
    pub rates: Vec<LinkRate>,
}

impl RatesFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    /// Rates in the network's canonical link order; unlisted links get 0.
    pub fn to_vector(&self, net: &NetworkSpec) -> Result<Vec<f64>> {
        let mut out = vec![0.0; net.links().len()];
        let mut seen = vec![false; out.len()];
        for lr in &self.rates {
            let e = net.link_index(lr.tail, lr.head).ok_or_else(|| {
                Error::InvalidInput(format!("rate given for unknown link ({}, {})", lr.tail, lr.head))
            })?;
            if seen[e] {
                return Err(Error::InvalidInput(format!(
                    "link ({}, {}) listed twice",
                    lr.tail, lr.head
                )));
            }
            seen[e] = true;
            out[e] = lr.rate;
        }
        Ok(out)
    }

    pub fn from_vector(net: &NetworkSpec, rates: &[f64]) -> Self {
        Self {
            rates: net
                .links()
                .iter()
                .zip(rates)
                .map(|(l, &rate)| LinkRate {
                    tail: l.tail,
                    head: l.head,
                    rate,
                })
                .collect(),
        }
    }
}

/// Example networks shipped with the crate (unit noise, `v^2 = 0.5`, unit
/// power, so every `lambda` is 1; multicast rate 2).
pub mod fixtures {
    /// `0 -> 1 -> 2`.
    pub const SINGLE_PATH: &str = include_str!("../fixtures/single-path.json");
    /// Two disjoint two-hop routes from 0 to 3.
    pub const DIAMOND: &str = include_str!("../fixtures/diamond.json");
    /// Source 0 feeding sinks 4 and 5 through private relays 1, 2 and the
    /// shared relay 3.
    pub const BUTTERFLY: &str = include_str!("../fixtures/butterfly.json");
    /// Twelve nodes, source 5, destinations 1, 4, 8, 10. The topology is a
    /// plausible reconstruction, not a reference network.
    pub const TWELVE_NODE: &str = include_str!("../fixtures/twelve-node.json");

    pub const ALL: [(&str, &str); 4] = [
        ("single-path", SINGLE_PATH),
        ("diamond", DIAMOND),
        ("butterfly", BUTTERFLY),
        ("twelve-node", TWELVE_NODE),
    ];
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_load() {
        for (name, text) in fixtures::ALL {
            let net = load_network(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(net.multicast_rate(), 2.0);
        }
        let net = load_network(fixtures::TWELVE_NODE).unwrap();
        assert_eq!(net.nodes().len(), 12);
        assert_eq!(net.links().len(), 21);
    }

    #[test]
    fn round_trip_is_identity() {
        for (_, text) in fixtures::ALL {
            let a = NetworkFile::from_json(text).unwrap();
            let b = NetworkFile::from_json(&a.to_json()).unwrap();
            assert_eq!(a, b);
            assert_eq!(NetworkFile::from_spec(&a.to_spec().unwrap()).to_spec(), a.to_spec());
        }
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = fixtures::SINGLE_PATH.replacen("\"source\"", "\"colour\": 1, \"source\"", 1);
        let err = NetworkFile::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("colour"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn invalid_network_rejected() {
        let text = fixtures::SINGLE_PATH.replace("\"source\": 0", "\"source\": 9");
        assert!(matches!(NetworkFile::from_json(&text), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn rates_file() {
        let net = load_network(fixtures::DIAMOND).unwrap();
        let rf = RatesFile::from_json(
            r#"{"objective": 8, "rates": [{"tail": 2, "head": 3, "rate": 1.5}]}"#,
        )
        .unwrap();
        let v = rf.to_vector(&net).unwrap();
        assert_eq!(v[net.link_index(2, 3).unwrap()], 1.5);
        assert_eq!(v.iter().sum::<f64>(), 1.5);
        assert_eq!(RatesFile::from_vector(&net, &v).to_vector(&net).unwrap(), v);

        let bad = RatesFile::from_json(r#"{"rates": [{"tail": 3, "head": 0, "rate": 1}]}"#).unwrap();
        assert!(bad.to_vector(&net).is_err());
    }
}
