use std::collections::BTreeMap;

use super::{stable_hash, GridError};
use crate::sim::NodeId;

/// Default virtual nodes per physical node.
pub const DEFAULT_VNODES: u32 = 64;

/// Consistent-hash ring over 64-bit points. An id is owned by the first
/// virtual node clockwise from its hash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashRing {
    points: BTreeMap<u64, NodeId>,
    vnodes_per_node: u32,
    members: Vec<NodeId>,
}

impl HashRing {
    pub fn new(vnodes_per_node: u32) -> Self {
        assert!(vnodes_per_node > 0, "vnodes_per_node must be positive");
        Self {
            points: BTreeMap::new(),
            vnodes_per_node,
            members: Vec::new(),
        }
    }

    pub fn with_nodes(vnodes_per_node: u32, nodes: impl IntoIterator<Item = NodeId>) -> Self {
        let mut ring = Self::new(vnodes_per_node);
        for n in nodes {
            ring.add(n);
        }
        ring
    }

    fn point(node: NodeId, replica: u32) -> u64 {
        stable_hash(format!("node-{}#{}", node.0, replica).as_bytes())
    }

    pub fn add(&mut self, node: NodeId) {
        if self.members.contains(&node) {
            return;
        }
        self.members.push(node);
        self.members.sort();
        for i in 0..self.vnodes_per_node {
            // On a (vanishingly rare) point collision the lower node id keeps it.
            let p = Self::point(node, i);
            let slot = self.points.entry(p).or_insert(node);
            if node < *slot {
                *slot = node;
            }
        }
    }

    pub fn remove(&mut self, node: NodeId) {
        self.members.retain(|&n| n != node);
        self.points.retain(|_, n| *n != node);
    }

    pub fn members(&self) -> &[NodeId] {
        &self.members
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn vnodes_per_node(&self) -> u32 {
        self.vnodes_per_node
    }

    pub fn owner(&self, object_id: &str) -> Result<NodeId, GridError> {
        self.owner_of_hash(stable_hash(object_id.as_bytes()))
    }

    fn owner_of_hash(&self, h: u64) -> Result<NodeId, GridError> {
        self.points
            .range(h..)
            .next()
            .or_else(|| self.points.iter().next())
            .map(|(_, &n)| n)
            .ok_or(GridError::EmptyRing)
    }

    /// The first `n` distinct nodes clockwise from the id: primary first, then
    /// backups.
    pub fn preference_list(&self, object_id: &str, n: usize) -> Vec<NodeId> {
        let h = stable_hash(object_id.as_bytes());
        let mut out = Vec::with_capacity(n);
        for (_, &node) in self.points.range(h..).chain(self.points.range(..h)) {
            if out.len() == n.min(self.members.len()) {
                break;
            }
            if !out.contains(&node) {
                out.push(node);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("obj-{i}")).collect()
    }

    #[test]
    fn empty_ring_errors() {
        assert_eq!(HashRing::new(8).owner("x"), Err(GridError::EmptyRing));
    }

    #[test]
    fn single_node_owns_everything() {
        let ring = HashRing::with_nodes(DEFAULT_VNODES, [NodeId(4)]);
        assert!(ids(1000).iter().all(|id| ring.owner(id) == Ok(NodeId(4))));
    }

    #[test]
    fn removal_moves_only_the_removed_nodes_ids() {
        let mut ring = HashRing::with_nodes(DEFAULT_VNODES, (0..3).map(NodeId));
        let ids = ids(10_000);
        let before: HashMap<_, _> = ids.iter().map(|id| (id, ring.owner(id).unwrap())).collect();
        ring.remove(NodeId(1));
        let mut moved = 0;
        for id in &ids {
            let now = ring.owner(id).unwrap();
            if before[id] == NodeId(1) {
                assert_ne!(now, NodeId(1));
                moved += 1;
            } else {
                assert_eq!(now, before[id], "{id} moved although its owner stayed");
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn lookups_are_deterministic() {
        let a = HashRing::with_nodes(DEFAULT_VNODES, (0..5).map(NodeId));
        let b = HashRing::with_nodes(DEFAULT_VNODES, (0..5).rev().map(NodeId));
        for id in ids(500) {
            assert_eq!(a.owner(&id), a.owner(&id));
            assert_eq!(a.owner(&id), b.owner(&id));
        }
    }

    #[test]
    fn balance_with_64_vnodes() {
        for nodes in [3u32, 6, 12] {
            let ring = HashRing::with_nodes(DEFAULT_VNODES, (0..nodes).map(NodeId));
            let mut counts = vec![0usize; nodes as usize];
            let ids = ids(10_000);
            for id in &ids {
                counts[ring.owner(id).unwrap().0 as usize] += 1;
            }
            let mean = ids.len() as f64 / nodes as f64;
            let max = *counts.iter().max().unwrap() as f64;
            assert!(max / mean <= 1.35, "{nodes} nodes: {counts:?}");
        }
    }

    #[test]
    fn preference_list_is_distinct_and_starts_with_owner() {
        let ring = HashRing::with_nodes(DEFAULT_VNODES, (0..5).map(NodeId));
        for id in ids(200) {
            let pl = ring.preference_list(&id, 3);
            assert_eq!(pl.len(), 3);
            assert_eq!(pl[0], ring.owner(&id).unwrap());
            assert!(pl[0] != pl[1] && pl[1] != pl[2] && pl[0] != pl[2]);
        }
        assert_eq!(ring.preference_list("x", 9).len(), 5);
    }
}
