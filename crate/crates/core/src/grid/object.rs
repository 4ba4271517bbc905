use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Identifier of one stored version of an unstructured state key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VersionId(pub u64);

impl std::fmt::Display for VersionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "v{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplicaRole {
    Primary,
    Backup,
}

/// One cloud object: structured document, current blob versions and the
/// offset of the last asynchronous request applied to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub object_id: String,
    pub class: String,
    pub structured: Value,
    pub versions: BTreeMap<String, VersionId>,
    /// 0 until the first queued request is applied; queue offsets start at 1.
    pub last_offset: u64,
    pub role: ReplicaRole,
}

impl ObjectRecord {
    pub fn new(object_id: impl Into<String>, class: impl Into<String>) -> Self {
        Self {
            object_id: object_id.into(),
            class: class.into(),
            structured: Value::Object(Default::default()),
            versions: BTreeMap::new(),
            last_offset: 0,
            role: ReplicaRole::Primary,
        }
    }
}
