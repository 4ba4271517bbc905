//! Replica coordination for the three consistency levels.

mod group;
pub mod history;
pub mod lww;
pub mod merkle;
pub mod raft;

pub use group::{
    ae_interval_for, ClientOps, ClientSpec, GroupConfig, GroupRun, GroupSim, GroupStats, RaftAudit,
};
pub use history::{check, read_lags, CheckKind, History, HistoryError, HistoryOp, OpKind, Verdict};
pub use lww::{LwwMap, LwwRegister, Stamp};
pub use merkle::{reconcile, DigestedMap, MerkleTree, TreeDiff, DEFAULT_DEPTH, DEFAULT_FANOUT};
pub use raft::{Command, Entry, OpRef, RaftConfig, RaftMsg, RaftNode, ReadTicket, Role};

use serde::{Deserialize, Serialize};

use crate::sim::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub enum ConsistencyError {
    #[error("no quorum reachable")]
    NoQuorum,
    #[error("staleness window exceeded")]
    StalenessWindowExceeded,
    #[error("not the leader (hint {0:?})")]
    NotLeader(Option<NodeId>),
    #[error("replica unavailable")]
    Unavailable,
    #[error("invalid group: {0}")]
    InvalidGroup(String),
}
