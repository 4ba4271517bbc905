use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DcId, Millis, NodeId, Topology};

/// Metadata that travels with every message and is re-checked on arrival.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Envelope {
    pub src: NodeId,
    pub dst: NodeId,
    pub sent_at: Millis,
    dst_incarnation: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    At(Millis),
    Dropped,
}

/// One captured message, for wire-level assertions in tests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRecord {
    pub at: Millis,
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: String,
    pub dropped: bool,
}

/// Latency and partition model plus node liveness.
///
/// Messages on a fixed (src, dst) pair see the same delay, so they arrive in
/// send order. A message is dropped if the pair is partitioned or the
/// destination is down either when it is sent or when it would arrive; a
/// destination that crashed and restarted in between also drops it.
#[derive(Debug, Clone)]
pub struct Network {
    topology: Topology,
    alive: Vec<bool>,
    incarnation: Vec<u32>,
    partitions: BTreeMap<(DcId, DcId), u32>,
    tap: Option<Vec<WireRecord>>,
    sent: u64,
    dropped: u64,
}

fn pair(a: DcId, b: DcId) -> (DcId, DcId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl Network {
    pub fn new(topology: Topology) -> Self {
        let n = topology.node_count();
        Self {
            topology,
            alive: vec![true; n],
            incarnation: vec![0; n],
            partitions: BTreeMap::new(),
            tap: None,
            sent: 0,
            dropped: 0,
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    /// Starts recording every message into the wire tap.
    pub fn enable_tap(&mut self) {
        self.tap.get_or_insert_with(Vec::new);
    }

    pub fn tap(&self) -> &[WireRecord] {
        self.tap.as_deref().unwrap_or(&[])
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn is_alive(&self, node: NodeId) -> bool {
        self.alive[node.0 as usize]
    }

    pub fn incarnation(&self, node: NodeId) -> u32 {
        self.incarnation[node.0 as usize]
    }

    pub fn kill(&mut self, node: NodeId) {
        self.alive[node.0 as usize] = false;
    }

    pub fn restart(&mut self, node: NodeId) {
        let i = node.0 as usize;
        if !self.alive[i] {
            self.alive[i] = true;
            self.incarnation[i] += 1;
        }
    }

    pub fn partition(&mut self, a: DcId, b: DcId) {
        *self.partitions.entry(pair(a, b)).or_insert(0) += 1;
    }

    pub fn heal(&mut self, a: DcId, b: DcId) {
        if let Some(c) = self.partitions.get_mut(&pair(a, b)) {
            *c -= 1;
            if *c == 0 {
                self.partitions.remove(&pair(a, b));
            }
        }
    }

    pub fn is_partitioned(&self, a: DcId, b: DcId) -> bool {
        a != b && self.partitions.contains_key(&pair(a, b))
    }

    /// Whether `a` can currently reach `b`.
    pub fn reachable(&self, a: NodeId, b: NodeId) -> bool {
        self.is_alive(a)
            && self.is_alive(b)
            && !self.is_partitioned(self.topology.dc_of(a), self.topology.dc_of(b))
    }

    /// Sends a message. The caller schedules the payload at the returned time
    /// and must pass the envelope through [`Network::accept`] on arrival.
    pub fn send(
        &mut self,
        now: Millis,
        src: NodeId,
        dst: NodeId,
        kind: &str,
    ) -> (Delivery, Envelope) {
        let env = Envelope {
            src,
            dst,
            sent_at: now,
            dst_incarnation: self.incarnation(dst),
        };
        self.sent += 1;
        let ok = self.reachable(src, dst);
        if !ok {
            self.dropped += 1;
        }
        if let Some(tap) = self.tap.as_mut() {
            tap.push(WireRecord {
                at: now,
                src,
                dst,
                kind: kind.to_string(),
                dropped: !ok,
            });
        }
        let delivery = if ok {
            Delivery::At(now + self.topology.delay(src, dst))
        } else {
            Delivery::Dropped
        };
        (delivery, env)
    }

    /// Arrival-time check: destination still the same live incarnation and
    /// the pair not partitioned in the meantime.
    pub fn accept(&mut self, env: &Envelope) -> bool {
        let ok = self.is_alive(env.dst)
            && self.incarnation(env.dst) == env.dst_incarnation
            && !self.is_partitioned(self.topology.dc_of(env.src), self.topology.dc_of(env.dst));
        if !ok {
            self.dropped += 1;
        }
        ok
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Topology;

    fn net() -> Network {
        Network::new(Topology::edge_cloud())
    }

    #[test]
    fn latency_and_loopback() {
        let mut n = net();
        let t = n.topology().clone();
        let e = t.node_id("edge-1/n0").unwrap();
        let c = t.node_id("cloud-1/n0").unwrap();
        assert_eq!(n.send(100, e, c, "m").0, Delivery::At(117));
        assert_eq!(n.send(100, e, e, "m").0, Delivery::At(100));
    }

    #[test]
    fn explicit_33ms_link() {
        let mut f = Topology::edge_cloud().file().clone();
        f.links[0].latency_ms = 33.0;
        let t = Topology::from_file(f).unwrap();
        let mut n = Network::new(t.clone());
        let e = t.node_id("edge-1/n0").unwrap();
        let c = t.node_id("cloud-1/n0").unwrap();
        assert_eq!(n.send(7, e, c, "m").0, Delivery::At(40));
    }

    #[test]
    fn partition_is_symmetric_until_heal() {
        let mut n = net();
        let t = n.topology().clone();
        let e = t.node_id("edge-1/n0").unwrap();
        let c = t.node_id("cloud-1/n0").unwrap();
        let (edge, cloud) = (t.dc_of(e), t.dc_of(c));
        n.partition(edge, cloud);
        assert_eq!(n.send(0, e, c, "m").0, Delivery::Dropped);
        assert_eq!(n.send(0, c, e, "m").0, Delivery::Dropped);
        n.heal(cloud, edge);
        assert!(matches!(n.send(0, c, e, "m").0, Delivery::At(_)));
    }

    #[test]
    fn in_flight_message_dropped_by_partition_or_restart() {
        let mut n = net();
        let t = n.topology().clone();
        let e = t.node_id("edge-1/n0").unwrap();
        let c = t.node_id("cloud-1/n0").unwrap();
        let (_, env) = n.send(0, e, c, "m");
        n.partition(t.dc_of(e), t.dc_of(c));
        assert!(!n.accept(&env));
        n.heal(t.dc_of(e), t.dc_of(c));
        let (_, env) = n.send(0, e, c, "m");
        n.kill(c);
        n.restart(c);
        assert!(
            !n.accept(&env),
            "a restarted node never sees pre-crash messages"
        );
        let (_, env) = n.send(0, e, c, "m");
        assert!(n.accept(&env));
    }

    #[test]
    fn tap_records_kinds() {
        let mut n = net();
        n.enable_tap();
        n.send(0, NodeId(0), NodeId(1), "invoke");
        n.send(0, NodeId(1), NodeId(0), "reply");
        let kinds: Vec<_> = n.tap().iter().map(|r| r.kind.as_str()).collect();
        assert_eq!(kinds, ["invoke", "reply"]);
    }
}
