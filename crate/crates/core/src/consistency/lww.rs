use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::sim::{Millis, NodeId};

/// Write stamp. Ordered by time, then node, then a per-node sequence number
/// so that two writes never carry equal stamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Stamp {
    pub time: Millis,
    pub node: NodeId,
    pub seq: u64,
}

impl Stamp {
    pub fn as_version(&self) -> Vec<u64> {
        vec![self.time, self.node.0 as u64, self.seq]
    }
}

/// Last-writer-wins register.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LwwRegister<V> {
    pub value: V,
    pub stamp: Stamp,
}

impl<V: Clone> LwwRegister<V> {
    pub fn new(value: V, stamp: Stamp) -> Self {
        Self { value, stamp }
    }

    /// The register with the larger stamp.
    pub fn merge(&self, other: &Self) -> Self {
        if other.stamp > self.stamp {
            other.clone()
        } else {
            self.clone()
        }
    }
}

/// A map of LWW registers; merging is key-wise.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LwwMap {
    entries: BTreeMap<String, LwwRegister<Value>>,
}

impl LwwMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &str) -> Option<&LwwRegister<Value>> {
        self.entries.get(key)
    }

    /// Merges one register; returns true if the stored value changed.
    pub fn merge_entry(&mut self, key: &str, reg: &LwwRegister<Value>) -> bool {
        match self.entries.get_mut(key) {
            Some(cur) if cur.stamp >= reg.stamp => false,
            Some(cur) => {
                *cur = reg.clone();
                true
            }
            None => {
                self.entries.insert(key.to_string(), reg.clone());
                true
            }
        }
    }

    pub fn merge(&mut self, other: &LwwMap) -> usize {
        other
            .entries
            .iter()
            .filter(|(k, r)| self.merge_entry(k, r))
            .count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &LwwRegister<Value>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
