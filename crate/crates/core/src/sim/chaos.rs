use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DcId, Millis, Network, NodeId, SimError, SimRng, Topology};

/// Default container/node restart delay after an injected failure.
pub const DEFAULT_RESTART_MS: Millis = 2_000;

fn default_jitter() -> f64 {
    0.1
}

fn default_restart() -> Millis {
    DEFAULT_RESTART_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultScope {
    All,
    Node(String),
    Nodes(Vec<String>),
    Datacenter(String),
}

impl FaultScope {
    fn resolve(&self, topo: &Topology) -> Result<Vec<NodeId>, SimError> {
        let unknown = |what: &str, n: &str| SimError::Chaos(format!("unknown {what} `{n}`"));
        Ok(match self {
            FaultScope::All => topo.nodes().collect(),
            FaultScope::Node(n) => vec![topo.node_id(n).ok_or_else(|| unknown("node", n))?],
            FaultScope::Nodes(ns) => ns
                .iter()
                .map(|n| topo.node_id(n).ok_or_else(|| unknown("node", n)))
                .collect::<Result<_, _>>()?,
            FaultScope::Datacenter(d) => {
                let dc = topo.dc_id(d).ok_or_else(|| unknown("datacenter", d))?;
                topo.nodes_in(dc).collect()
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ChaosEvent {
    PartitionStart {
        at_ms: Millis,
        a: String,
        b: String,
    },
    PartitionHeal {
        at_ms: Millis,
        a: String,
        b: String,
    },
    NodeKill {
        at_ms: Millis,
        node: String,
        /// `None` leaves the node down for the rest of the run.
        #[serde(default)]
        restart_after_ms: Option<Millis>,
    },
    /// Repeated independent failures on every node in scope: up for a
    /// normally distributed time around `mtbf_ms` (standard deviation
    /// `jitter × mtbf_ms`, at least 1 ms), then down for `restart_ms`.
    MtbfFailures {
        at_ms: Millis,
        scope: FaultScope,
        mtbf_ms: Millis,
        #[serde(default = "default_jitter")]
        jitter: f64,
        #[serde(default = "default_restart")]
        restart_ms: Millis,
        #[serde(default)]
        until_ms: Option<Millis>,
    },
}

impl ChaosEvent {
    pub fn at(&self) -> Millis {
        match self {
            ChaosEvent::PartitionStart { at_ms, .. }
            | ChaosEvent::PartitionHeal { at_ms, .. }
            | ChaosEvent::NodeKill { at_ms, .. }
            | ChaosEvent::MtbfFailures { at_ms, .. } => *at_ms,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChaosSchedule {
    pub events: Vec<ChaosEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultKind {
    Kill(NodeId),
    Restart(NodeId),
    Partition(DcId, DcId),
    Heal(DcId, DcId),
}

/// A concrete fault at a point in virtual time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fault {
    pub at: Millis,
    pub kind: FaultKind,
}

impl Fault {
    pub fn apply(&self, net: &mut Network) {
        match self.kind {
            FaultKind::Kill(n) => net.kill(n),
            FaultKind::Restart(n) => net.restart(n),
            FaultKind::Partition(a, b) => net.partition(a, b),
            FaultKind::Heal(a, b) => net.heal(a, b),
        }
    }
}

impl ChaosSchedule {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::Chaos(e.to_string()))
    }

    fn dc_pair(topo: &Topology, a: &str, b: &str) -> Result<(DcId, DcId), SimError> {
        let find = |n: &str| {
            topo.dc_id(n)
                .ok_or_else(|| SimError::Chaos(format!("unknown datacenter `{n}`")))
        };
        let (a, b) = (find(a)?, find(b)?);
        if a == b {
            return Err(SimError::Chaos(
                "cannot partition a datacenter from itself".into(),
            ));
        }
        Ok(if a <= b { (a, b) } else { (b, a) })
    }

    /// Checks ordering, names, and that every heal closes an open partition.
    pub fn validate(&self, topo: &Topology) -> Result<(), SimError> {
        let mut open: Vec<(DcId, DcId)> = Vec::new();
        let mut last = 0;
        for ev in &self.events {
            if ev.at() < last {
                return Err(SimError::Chaos("events are not sorted by time".into()));
            }
            last = ev.at();
            match ev {
                ChaosEvent::PartitionStart { a, b, .. } => open.push(Self::dc_pair(topo, a, b)?),
                ChaosEvent::PartitionHeal { a, b, .. } => {
                    let p = Self::dc_pair(topo, a, b)?;
                    let i = open
                        .iter()
                        .position(|o| *o == p)
                        .ok_or_else(|| SimError::Chaos(format!("heal {a}–{b} without a start")))?;
                    open.remove(i);
                }
                ChaosEvent::NodeKill { node, .. } => {
                    topo.node_id(node)
                        .ok_or_else(|| SimError::Chaos(format!("unknown node `{node}`")))?;
                }
                ChaosEvent::MtbfFailures {
                    scope,
                    mtbf_ms,
                    jitter,
                    ..
                } => {
                    scope.resolve(topo)?;
                    if *mtbf_ms == 0 || !(*jitter >= 0.0) {
                        return Err(SimError::Chaos("mtbf must be positive, jitter ≥ 0".into()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Expands the schedule into concrete faults up to `horizon`, drawing MTBF
    /// gaps from per-node streams of `rng`.
    pub fn expand(
        &self,
        topo: &Topology,
        rng: &SimRng,
        horizon: Millis,
    ) -> Result<Vec<Fault>, SimError> {
        self.validate(topo)?;
        let mut faults = Vec::new();
        for (idx, ev) in self.events.iter().enumerate() {
            match ev {
                ChaosEvent::PartitionStart { at_ms, a, b } => {
                    let (a, b) = Self::dc_pair(topo, a, b)?;
                    faults.push(Fault {
                        at: *at_ms,
                        kind: FaultKind::Partition(a, b),
                    });
                }
                ChaosEvent::PartitionHeal { at_ms, a, b } => {
                    let (a, b) = Self::dc_pair(topo, a, b)?;
                    faults.push(Fault {
                        at: *at_ms,
                        kind: FaultKind::Heal(a, b),
                    });
                }
                ChaosEvent::NodeKill {
                    at_ms,
                    node,
                    restart_after_ms,
                } => {
                    let n = topo.node_id(node).expect("validated");
                    faults.push(Fault {
                        at: *at_ms,
                        kind: FaultKind::Kill(n),
                    });
                    if let Some(d) = restart_after_ms {
                        faults.push(Fault {
                            at: at_ms + d,
                            kind: FaultKind::Restart(n),
                        });
                    }
                }
                ChaosEvent::MtbfFailures {
                    at_ms,
                    scope,
                    mtbf_ms,
                    jitter,
                    restart_ms,
                    until_ms,
                } => {
                    let end = until_ms.unwrap_or(horizon).min(horizon);
                    let mean = *mtbf_ms as f64;
                    let normal = Normal::new(mean, mean * jitter)
                        .map_err(|e| SimError::Chaos(e.to_string()))?;
                    for node in scope.resolve(topo)? {
                        let mut r = rng.fork_indexed(&format!("mtbf/{idx}"), node.0 as u64);
                        let mut t = *at_ms;
                        loop {
                            let gap = normal.sample(&mut r).round().max(1.0) as Millis;
                            let kill = t + gap;
                            if kill > end {
                                break;
                            }
                            faults.push(Fault {
                                at: kill,
                                kind: FaultKind::Kill(node),
                            });
                            faults.push(Fault {
                                at: kill + restart_ms,
                                kind: FaultKind::Restart(node),
                            });
                            t = kill + restart_ms;
                        }
                    }
                }
            }
        }
        faults.sort_by_key(|f| f.at);
        Ok(faults)
    }
}

/// Total time in `[0, horizon)` that `node` is up under `faults`.
pub fn up_time(faults: &[Fault], node: NodeId, horizon: Millis) -> Millis {
    let mut up = 0;
    let mut alive_since = Some(0);
    for f in faults.iter().filter(|f| f.at < horizon) {
        match f.kind {
            FaultKind::Kill(n) if n == node => {
                if let Some(s) = alive_since.take() {
                    up += f.at - s;
                }
            }
            FaultKind::Restart(n) if n == node && alive_since.is_none() => alive_since = Some(f.at),
            _ => {}
        }
    }
    if let Some(s) = alive_since {
        up += horizon - s;
    }
    up
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_layout() {
        let text = r#"{"events":[
            {"type":"MtbfFailures","at_ms":0,"scope":{"datacenter":"edge-1"},"mtbf_ms":180000},
            {"type":"PartitionStart","at_ms":1000,"a":"edge-1","b":"cloud-1"},
            {"type":"NodeKill","at_ms":1500,"node":"cloud-1/n0","restart_after_ms":200},
            {"type":"PartitionHeal","at_ms":2000,"a":"cloud-1","b":"edge-1"}
        ]}"#;
        let s = ChaosSchedule::from_json(text).unwrap();
        let topo = Topology::edge_cloud();
        s.validate(&topo).unwrap();
        let faults = s.expand(&topo, &SimRng::new(1), 600_000).unwrap();
        assert!(faults.windows(2).all(|w| w[0].at <= w[1].at));
        assert!(faults.iter().any(|f| f.kind
            == FaultKind::Restart(topo.node_id("cloud-1/n0").unwrap())
            && f.at == 1700));
    }

    #[test]
    fn unmatched_heal_and_unsorted_rejected() {
        let topo = Topology::edge_cloud();
        let heal = ChaosSchedule {
            events: vec![ChaosEvent::PartitionHeal {
                at_ms: 5,
                a: "edge-1".into(),
                b: "cloud-1".into(),
            }],
        };
        assert!(heal.validate(&topo).is_err());
        let unsorted = ChaosSchedule {
            events: vec![
                ChaosEvent::NodeKill {
                    at_ms: 10,
                    node: "edge-1/n0".into(),
                    restart_after_ms: None,
                },
                ChaosEvent::NodeKill {
                    at_ms: 5,
                    node: "edge-1/n1".into(),
                    restart_after_ms: None,
                },
            ],
        };
        assert!(unsorted.validate(&topo).is_err());
    }

    #[test]
    fn mtbf_expansion_is_seeded() {
        let topo = Topology::edge_cloud();
        let s = ChaosSchedule {
            events: vec![ChaosEvent::MtbfFailures {
                at_ms: 0,
                scope: FaultScope::All,
                mtbf_ms: 10_000,
                jitter: 0.1,
                restart_ms: 500,
                until_ms: None,
            }],
        };
        let a = s.expand(&topo, &SimRng::new(3), 100_000).unwrap();
        let b = s.expand(&topo, &SimRng::new(3), 100_000).unwrap();
        let c = s.expand(&topo, &SimRng::new(4), 100_000).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
