use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{GridError, VersionId};
use crate::sim::{Millis, SimRng};

/// Default lifetime of an issued capability token.
pub const DEFAULT_TOKEN_TTL_MS: Millis = 30_000;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlobKey {
    pub object_id: String,
    pub key: String,
    pub version: VersionId,
}

impl BlobKey {
    pub fn new(object_id: &str, key: &str, version: VersionId) -> Self {
        Self {
            object_id: object_id.to_string(),
            key: key.to_string(),
            version,
        }
    }
}

/// Simulated object storage. Versions are write-once.
#[derive(Debug, Clone, Default)]
pub struct BlobStore {
    blobs: BTreeMap<BlobKey, Vec<u8>>,
    next_version: u64,
    purged: u64,
}

impl BlobStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocates a version id never handed out before.
    pub fn fresh_version(&mut self) -> VersionId {
        self.next_version += 1;
        VersionId(self.next_version)
    }

    pub fn put(&mut self, key: BlobKey, bytes: Vec<u8>) -> Result<(), GridError> {
        if self.blobs.contains_key(&key) {
            return Err(GridError::ImmutableVersion(key.version));
        }
        self.blobs.insert(key, bytes);
        Ok(())
    }

    pub fn get(&self, key: &BlobKey) -> Option<&[u8]> {
        self.blobs.get(key).map(Vec::as_slice)
    }

    pub fn contains(&self, key: &BlobKey) -> bool {
        self.blobs.contains_key(key)
    }

    pub fn purge(&mut self, key: &BlobKey) -> bool {
        let removed = self.blobs.remove(key).is_some();
        if removed {
            self.purged += 1;
        }
        removed
    }

    pub fn purged(&self) -> u64 {
        self.purged
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &BlobKey> {
        self.blobs.keys()
    }

    /// Inventory as a JSON array of `{object_id, key, version, bytes}`.
    pub fn inventory_json(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.blobs
                .iter()
                .map(|(k, v)| {
                    serde_json::json!({
                        "object_id": k.object_id,
                        "key": k.key,
                        "version": k.version.to_string(),
                        "bytes": v.len(),
                    })
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccessMode {
    Read,
    WriteNewVersion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grant {
    pub object_id: String,
    pub key: String,
    pub version: VersionId,
    pub mode: AccessMode,
}

/// Scoped, expiring credential for direct blob access.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilityToken {
    pub token: u128,
    pub grant: Grant,
    pub expires_at: Millis,
}

/// Issues and checks capability tokens.
#[derive(Debug, Clone)]
pub struct TokenIssuer {
    rng: SimRng,
    ttl_ms: Millis,
    live: HashMap<u128, CapabilityToken>,
}

impl TokenIssuer {
    pub fn new(rng: SimRng, ttl_ms: Millis) -> Self {
        Self {
            rng,
            ttl_ms,
            live: HashMap::new(),
        }
    }

    pub fn issue(&mut self, now: Millis, grant: Grant) -> CapabilityToken {
        let token = loop {
            let t = self.rng.next_u128();
            if !self.live.contains_key(&t) {
                break t;
            }
        };
        let tok = CapabilityToken {
            token,
            grant,
            expires_at: now + self.ttl_ms,
        };
        self.live.insert(token, tok.clone());
        tok
    }

    pub fn revoke(&mut self, token: u128) {
        self.live.remove(&token);
    }

    pub fn outstanding(&self) -> usize {
        self.live.len()
    }

    /// Reads or writes the blob `(object_id, key)` with `token`. A read returns
    /// the bytes of the granted version; a write stores `payload` as the
    /// granted new version and returns it. The new version stays invisible
    /// to readers until the invoker commits it.
    pub fn blob_access(
        &self,
        store: &mut BlobStore,
        now: Millis,
        token: u128,
        object_id: &str,
        key: &str,
        payload: Option<Vec<u8>>,
    ) -> Result<BlobAccess, GridError> {
        let tok = self.live.get(&token).ok_or(GridError::InvalidToken)?;
        let g = &tok.grant;
        if g.object_id != object_id || g.key != key {
            return Err(GridError::InvalidToken);
        }
        if now >= tok.expires_at {
            return Err(GridError::Expired);
        }
        let blob = BlobKey::new(object_id, key, g.version);
        match (g.mode, payload) {
            (AccessMode::Read, None) => store
                .get(&blob)
                .map(|b| BlobAccess::Bytes(b.to_vec()))
                .ok_or(GridError::MissingBlob(g.version)),
            (AccessMode::WriteNewVersion, Some(bytes)) => {
                store.put(blob, bytes)?;
                Ok(BlobAccess::Written(g.version))
            }
            _ => Err(GridError::WrongMode),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlobAccess {
    Bytes(Vec<u8>),
    Written(VersionId),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (BlobStore, TokenIssuer) {
        let mut store = BlobStore::new();
        let v1 = store.fresh_version();
        store
            .put(BlobKey::new("o1", "mp4", v1), b"frame-data".to_vec())
            .unwrap();
        (
            store,
            TokenIssuer::new(SimRng::new(9), DEFAULT_TOKEN_TTL_MS),
        )
    }

    fn grant(obj: &str, version: u64, mode: AccessMode) -> Grant {
        Grant {
            object_id: obj.into(),
            key: "mp4".into(),
            version: VersionId(version),
            mode,
        }
    }

    #[test]
    fn valid_read_returns_exact_bytes() {
        let (mut store, mut iss) = setup();
        let t = iss.issue(0, grant("o1", 1, AccessMode::Read));
        assert_eq!(
            iss.blob_access(&mut store, 10, t.token, "o1", "mp4", None),
            Ok(BlobAccess::Bytes(b"frame-data".to_vec()))
        );
    }

    #[test]
    fn out_of_scope_token_is_invalid() {
        let (mut store, mut iss) = setup();
        let t = iss.issue(0, grant("o1", 1, AccessMode::Read));
        assert_eq!(
            iss.blob_access(&mut store, 10, t.token, "o2", "mp4", None),
            Err(GridError::InvalidToken)
        );
        assert_eq!(
            iss.blob_access(&mut store, 10, t.token ^ 1, "o1", "mp4", None),
            Err(GridError::InvalidToken)
        );
    }

    #[test]
    fn expired_token() {
        let (mut store, mut iss) = setup();
        let t = iss.issue(0, grant("o1", 1, AccessMode::Read));
        assert_eq!(
            iss.blob_access(&mut store, DEFAULT_TOKEN_TTL_MS, t.token, "o1", "mp4", None),
            Err(GridError::Expired)
        );
    }

    #[test]
    fn wrong_mode_and_write_once() {
        let (mut store, mut iss) = setup();
        let r = iss.issue(0, grant("o1", 1, AccessMode::Read));
        assert_eq!(
            iss.blob_access(&mut store, 1, r.token, "o1", "mp4", Some(vec![1])),
            Err(GridError::WrongMode)
        );
        let v2 = store.fresh_version();
        let w = iss.issue(0, grant("o1", v2.0, AccessMode::WriteNewVersion));
        assert_eq!(
            iss.blob_access(&mut store, 1, w.token, "o1", "mp4", Some(vec![7])),
            Ok(BlobAccess::Written(v2))
        );
        assert_eq!(
            iss.blob_access(&mut store, 2, w.token, "o1", "mp4", Some(vec![8])),
            Err(GridError::ImmutableVersion(v2))
        );
        assert_eq!(store.get(&BlobKey::new("o1", "mp4", v2)), Some(&[7u8][..]));
    }
}
