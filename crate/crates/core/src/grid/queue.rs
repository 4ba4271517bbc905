use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::sim::NodeId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueuedInvocation {
    pub offset: u64,
    pub producer: String,
    pub seq: u64,
    pub object_id: String,
    pub function: String,
    pub args: Value,
}

/// Durable append-only invocation log with idempotent-producer dedupe and
/// per-consumer committed offsets. Offsets start at 1.
#[derive(Debug, Clone, Default)]
pub struct AsyncQueue {
    log: Vec<QueuedInvocation>,
    by_producer: HashMap<(String, u64), u64>,
    committed: BTreeMap<NodeId, u64>,
    duplicates: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Appended {
    pub offset: u64,
    pub duplicate: bool,
}

impl AsyncQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(
        &mut self,
        producer: &str,
        seq: u64,
        object_id: &str,
        function: &str,
        args: Value,
    ) -> Appended {
        if let Some(&offset) = self.by_producer.get(&(producer.to_string(), seq)) {
            self.duplicates += 1;
            return Appended {
                offset,
                duplicate: true,
            };
        }
        let offset = self.log.len() as u64 + 1;
        self.log.push(QueuedInvocation {
            offset,
            producer: producer.to_string(),
            seq,
            object_id: object_id.to_string(),
            function: function.to_string(),
            args,
        });
        self.by_producer.insert((producer.to_string(), seq), offset);
        Appended {
            offset,
            duplicate: false,
        }
    }

    pub fn len(&self) -> usize {
        self.log.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log.is_empty()
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }

    pub fn get(&self, offset: u64) -> Option<&QueuedInvocation> {
        offset.checked_sub(1).and_then(|i| self.log.get(i as usize))
    }

    /// Entries with offset ≥ `from`.
    pub fn fetch(&self, from: u64) -> &[QueuedInvocation] {
        let start = (from.max(1) - 1) as usize;
        &self.log[start.min(self.log.len())..]
    }

    /// Next offset `consumer` must read after a restart.
    pub fn committed(&self, consumer: NodeId) -> u64 {
        self.committed.get(&consumer).copied().unwrap_or(1)
    }

    pub fn commit(&mut self, consumer: NodeId, next_offset: u64) {
        let slot = self.committed.entry(consumer).or_insert(1);
        *slot = (*slot).max(next_offset);
    }

    pub fn entries(&self) -> &[QueuedInvocation] {
        &self.log
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn idempotent_producer() {
        let mut q = AsyncQueue::new();
        let a = q.append("p", 1, "o", "f", json!({}));
        let b = q.append("p", 1, "o", "f", json!({}));
        assert_eq!(a.offset, b.offset);
        assert!(b.duplicate && !a.duplicate);
        assert_eq!(q.len(), 1);
        let c = q.append("p", 2, "o", "f", json!({}));
        assert_eq!(c.offset, 2);
        assert_eq!(q.fetch(2).len(), 1);
        assert_eq!(q.fetch(3).len(), 0);
    }

    #[test]
    fn commits_are_monotone() {
        let mut q = AsyncQueue::new();
        q.commit(NodeId(0), 5);
        q.commit(NodeId(0), 3);
        assert_eq!(q.committed(NodeId(0)), 5);
        assert_eq!(q.committed(NodeId(1)), 1);
    }
}
