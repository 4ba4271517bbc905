use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::sim::{Millis, NodeId, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaftConfig {
    pub election_min_ms: Millis,
    pub election_max_ms: Millis,
    pub heartbeat_ms: Millis,
}

impl Default for RaftConfig {
    fn default() -> Self {
        Self {
            election_min_ms: 150,
            election_max_ms: 300,
            heartbeat_ms: 50,
        }
    }
}

impl RaftConfig {
    pub fn election_timeout(&self, rng: &mut SimRng) -> Millis {
        rng.range_inclusive(self.election_min_ms, self.election_max_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Follower,
    Candidate,
    Leader,
}

/// Identifies the client operation behind a log entry.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OpRef {
    pub client: String,
    pub op: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Command {
    Noop,
    Put {
        key: String,
        value: Value,
        op: OpRef,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub term: u64,
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RaftMsg {
    RequestVote {
        term: u64,
        last_index: u64,
        last_term: u64,
    },
    Vote {
        term: u64,
        granted: bool,
    },
    Append {
        term: u64,
        prev_index: u64,
        prev_term: u64,
        entries: Vec<Entry>,
        commit: u64,
        probe: u64,
    },
    AppendResp {
        term: u64,
        success: bool,
        match_index: u64,
        probe: u64,
    },
}

impl RaftMsg {
    pub fn kind(&self) -> &'static str {
        match self {
            RaftMsg::RequestVote { .. } => "raft-request-vote",
            RaftMsg::Vote { .. } => "raft-vote",
            RaftMsg::Append { .. } => "raft-append",
            RaftMsg::AppendResp { .. } => "raft-append-resp",
        }
    }
}

/// Pending linearizable read: served once `probe` is acked by a majority in
/// `term` and the state machine has applied `index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadTicket {
    pub term: u64,
    pub probe: u64,
    pub index: u64,
}

pub type Sends = Vec<(NodeId, RaftMsg)>;

/// What handling one input did, beyond the messages it produced.
#[derive(Debug, Default)]
pub struct Step {
    pub sends: Sends,
    /// The election timer should restart.
    pub reset_timer: bool,
    pub became_leader: bool,
}

const MAX_BATCH: usize = 64;

/// One Raft participant. Term, vote and log survive crashes; the rest does not.
#[derive(Debug, Clone)]
pub struct RaftNode {
    pub id: NodeId,
    peers: Vec<NodeId>,
    cfg: RaftConfig,
    term: u64,
    voted_for: Option<NodeId>,
    log: Vec<Entry>,
    role: Role,
    leader: Option<NodeId>,
    commit: u64,
    applied: u64,
    kv: BTreeMap<String, (Value, u64)>,
    votes: BTreeSet<NodeId>,
    next: BTreeMap<NodeId, u64>,
    matched: BTreeMap<NodeId, u64>,
    last_heard: BTreeMap<NodeId, Millis>,
    probe: u64,
    probe_acks: BTreeMap<NodeId, u64>,
    term_start: u64,
}

impl RaftNode {
    pub fn new(id: NodeId, members: &[NodeId], cfg: RaftConfig) -> Self {
        Self {
            id,
            peers: members.iter().copied().filter(|&m| m != id).collect(),
            cfg,
            term: 0,
            voted_for: None,
            log: Vec::new(),
            role: Role::Follower,
            leader: None,
            commit: 0,
            applied: 0,
            kv: BTreeMap::new(),
            votes: BTreeSet::new(),
            next: BTreeMap::new(),
            matched: BTreeMap::new(),
            last_heard: BTreeMap::new(),
            probe: 0,
            probe_acks: BTreeMap::new(),
            term_start: 0,
        }
    }

    pub fn term(&self) -> u64 {
        self.term
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn is_leader(&self) -> bool {
        self.role == Role::Leader
    }

    pub fn leader_hint(&self) -> Option<NodeId> {
        self.leader
    }

    pub fn commit_index(&self) -> u64 {
        self.commit
    }

    pub fn log(&self) -> &[Entry] {
        &self.log
    }

    pub fn last_index(&self) -> u64 {
        self.log.len() as u64
    }

    fn term_at(&self, index: u64) -> u64 {
        if index == 0 {
            0
        } else {
            self.log.get(index as usize - 1).map_or(0, |e| e.term)
        }
    }

    fn majority(&self) -> usize {
        let cluster = self.peers.len() + 1;
        cluster / 2 + 1
    }

    /// Local state-machine read: value and the log index that wrote it.
    pub fn read_local(&self, key: &str) -> Option<&(Value, u64)> {
        self.kv.get(key)
    }

    /// Crash and restart: volatile state is rebuilt from the log.
    pub fn restart(&mut self) {
        *self = Self {
            term: self.term,
            voted_for: self.voted_for,
            log: std::mem::take(&mut self.log),
            ..Self::new(self.id, &self.members(), self.cfg)
        };
    }

    fn members(&self) -> Vec<NodeId> {
        let mut m = self.peers.clone();
        m.push(self.id);
        m.sort();
        m
    }

    fn become_follower(&mut self, term: u64, leader: Option<NodeId>) {
        if term > self.term {
            self.term = term;
            self.voted_for = None;
        }
        self.role = Role::Follower;
        self.leader = leader;
        self.votes.clear();
    }

    fn become_leader(&mut self, now: Millis, step: &mut Step) {
        self.role = Role::Leader;
        self.leader = Some(self.id);
        let next = self.last_index() + 1;
        for &p in &self.peers {
            self.next.insert(p, next);
            self.matched.insert(p, 0);
            self.last_heard.insert(p, now);
        }
        self.probe_acks.clear();
        self.log.push(Entry {
            term: self.term,
            command: Command::Noop,
        });
        self.term_start = self.last_index();
        step.became_leader = true;
        self.advance_commit();
        self.broadcast(&mut step.sends);
    }

    pub fn on_election_timeout(&mut self, now: Millis) -> Step {
        let mut step = Step {
            reset_timer: true,
            ..Step::default()
        };
        if self.role == Role::Leader {
            return step;
        }
        self.term += 1;
        self.role = Role::Candidate;
        self.voted_for = Some(self.id);
        self.leader = None;
        self.votes = BTreeSet::from([self.id]);
        if self.votes.len() >= self.majority() {
            self.become_leader(now, &mut step);
            return step;
        }
        let msg = RaftMsg::RequestVote {
            term: self.term,
            last_index: self.last_index(),
            last_term: self.term_at(self.last_index()),
        };
        step.sends = self.peers.iter().map(|&p| (p, msg.clone())).collect();
        step
    }

    /// Leader heartbeat. Steps down if a majority has been silent for a full
    /// election timeout.
    pub fn on_heartbeat(&mut self, now: Millis) -> Step {
        let mut step = Step::default();
        if self.role != Role::Leader {
            return step;
        }
        let window = now.saturating_sub(self.cfg.election_max_ms);
        let heard = 1 + self
            .peers
            .iter()
            .filter(|p| self.last_heard.get(p).copied().unwrap_or(0) >= window)
            .count();
        if heard < self.majority() {
            self.become_follower(self.term, None);
            step.reset_timer = true;
            return step;
        }
        self.probe += 1;
        self.broadcast(&mut step.sends);
        step
    }

    fn append_for(&self, peer: NodeId) -> RaftMsg {
        let next = self.next.get(&peer).copied().unwrap_or(1).max(1);
        let prev_index = next - 1;
        let entries: Vec<Entry> = self
            .log
            .iter()
            .skip(prev_index as usize)
            .take(MAX_BATCH)
            .cloned()
            .collect();
        RaftMsg::Append {
            term: self.term,
            prev_index,
            prev_term: self.term_at(prev_index),
            entries,
            commit: self.commit,
            probe: self.probe,
        }
    }

    fn broadcast(&mut self, sends: &mut Sends) {
        for p in self.peers.clone() {
            let msg = self.append_for(p);
            if let RaftMsg::Append {
                prev_index,
                entries,
                ..
            } = &msg
            {
                // Pipelined: assume delivery, fall back on rejection.
                self.next.insert(p, prev_index + entries.len() as u64 + 1);
            }
            sends.push((p, msg));
        }
    }

    /// Appends a client command. Returns its log index, or `None` if this
    /// node is not the leader.
    pub fn propose(&mut self, command: Command) -> Option<(u64, Sends)> {
        if self.role != Role::Leader {
            return None;
        }
        self.log.push(Entry {
            term: self.term,
            command,
        });
        let index = self.last_index();
        self.advance_commit();
        let mut sends = Vec::new();
        self.broadcast(&mut sends);
        Some((index, sends))
    }

    /// Starts a read-index round.
    pub fn start_read(&mut self) -> Option<(ReadTicket, Sends)> {
        if self.role != Role::Leader {
            return None;
        }
        self.probe += 1;
        let ticket = ReadTicket {
            term: self.term,
            probe: self.probe,
            index: self.commit.max(self.term_start),
        };
        let mut sends = Vec::new();
        self.broadcast(&mut sends);
        Some((ticket, sends))
    }

    /// `Some(true)` when the read can be served, `Some(false)` while waiting,
    /// `None` once leadership for the ticket's term is gone.
    pub fn read_ready(&self, t: &ReadTicket) -> Option<bool> {
        if self.role != Role::Leader || self.term != t.term {
            return None;
        }
        let acked = 1 + self
            .peers
            .iter()
            .filter(|p| self.probe_acks.get(p).copied().unwrap_or(0) >= t.probe)
            .count();
        Some(acked >= self.majority() && self.applied >= t.index)
    }

    fn advance_commit(&mut self) {
        if self.role != Role::Leader {
            return;
        }
        let mut n = self.last_index();
        while n > self.commit {
            if self.term_at(n) == self.term {
                let votes = 1 + self.matched.values().filter(|&&m| m >= n).count();
                if votes >= self.majority() {
                    self.commit = n;
                    break;
                }
            }
            n -= 1;
        }
    }

    /// Applies newly committed entries; returns them with their indexes.
    pub fn apply(&mut self) -> Vec<(u64, Entry)> {
        let mut out = Vec::new();
        while self.applied < self.commit {
            self.applied += 1;
            let e = self.log[self.applied as usize - 1].clone();
            if let Command::Put { key, value, .. } = &e.command {
                self.kv.insert(key.clone(), (value.clone(), self.applied));
            }
            out.push((self.applied, e));
        }
        out
    }

    pub fn handle(&mut self, now: Millis, from: NodeId, msg: RaftMsg) -> Step {
        let mut step = Step::default();
        let msg_term = match &msg {
            RaftMsg::RequestVote { term, .. }
            | RaftMsg::Vote { term, .. }
            | RaftMsg::Append { term, .. }
            | RaftMsg::AppendResp { term, .. } => *term,
        };
        if msg_term > self.term {
            let was_leader = self.role == Role::Leader;
            self.become_follower(msg_term, None);
            if was_leader {
                step.reset_timer = true;
            }
        }
        match msg {
            RaftMsg::RequestVote {
                term,
                last_index,
                last_term,
            } => {
                let up_to_date =
                    (last_term, last_index) >= (self.term_at(self.last_index()), self.last_index());
                let granted = term == self.term
                    && self.role == Role::Follower
                    && self.voted_for.is_none_or(|v| v == from)
                    && up_to_date;
                if granted {
                    self.voted_for = Some(from);
                    step.reset_timer = true;
                }
                step.sends.push((
                    from,
                    RaftMsg::Vote {
                        term: self.term,
                        granted,
                    },
                ));
            }
            RaftMsg::Vote { term, granted } => {
                if self.role == Role::Candidate && term == self.term && granted {
                    self.votes.insert(from);
                    if self.votes.len() >= self.majority() {
                        self.become_leader(now, &mut step);
                    }
                }
            }
            RaftMsg::Append {
                term,
                prev_index,
                prev_term,
                entries,
                commit,
                probe,
            } => {
                if term < self.term {
                    step.sends.push((
                        from,
                        RaftMsg::AppendResp {
                            term: self.term,
                            success: false,
                            match_index: 0,
                            probe,
                        },
                    ));
                    return step;
                }
                self.become_follower(term, Some(from));
                step.reset_timer = true;
                if prev_index > self.last_index() || self.term_at(prev_index) != prev_term {
                    // Committed entries match the leader's, so retry from there.
                    let hint = if prev_index > self.last_index() {
                        self.last_index()
                    } else {
                        self.commit.min(prev_index - 1)
                    };
                    step.sends.push((
                        from,
                        RaftMsg::AppendResp {
                            term: self.term,
                            success: false,
                            match_index: hint,
                            probe,
                        },
                    ));
                    return step;
                }
                let mut idx = prev_index;
                for e in entries {
                    idx += 1;
                    if idx <= self.last_index() {
                        if self.term_at(idx) == e.term {
                            continue;
                        }
                        assert!(
                            idx > self.commit,
                            "leader tried to overwrite a committed entry"
                        );
                        self.log.truncate(idx as usize - 1);
                    }
                    self.log.push(e);
                }
                if commit > self.commit {
                    self.commit = commit.min(idx);
                }
                step.sends.push((
                    from,
                    RaftMsg::AppendResp {
                        term: self.term,
                        success: true,
                        match_index: idx,
                        probe,
                    },
                ));
            }
            RaftMsg::AppendResp {
                term,
                success,
                match_index,
                probe,
            } => {
                if self.role != Role::Leader || term != self.term {
                    return step;
                }
                self.last_heard.insert(from, now);
                let acks = self.probe_acks.entry(from).or_insert(0);
                *acks = (*acks).max(probe);
                if success {
                    let m = self.matched.entry(from).or_insert(0);
                    *m = (*m).max(match_index);
                    let n = self.next.entry(from).or_insert(1);
                    *n = (*n).max(match_index + 1);
                    self.advance_commit();
                } else {
                    let m = self.matched.get(&from).copied().unwrap_or(0);
                    self.next.insert(from, match_index.max(m) + 1);
                    let msg = self.append_for(from);
                    if let RaftMsg::Append {
                        prev_index,
                        entries,
                        ..
                    } = &msg
                    {
                        self.next
                            .insert(from, prev_index + entries.len() as u64 + 1);
                    }
                    step.sends.push((from, msg));
                }
            }
        }
        step
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn trio() -> Vec<RaftNode> {
        let ids = [NodeId(0), NodeId(1), NodeId(2)];
        ids.iter()
            .map(|&i| RaftNode::new(i, &ids, RaftConfig::default()))
            .collect()
    }

    /// Delivers messages instantly until none remain.
    fn pump(nodes: &mut [RaftNode], from: NodeId, sends: Sends, down: &[NodeId]) {
        let mut queue: Vec<(NodeId, NodeId, RaftMsg)> =
            sends.into_iter().map(|(to, m)| (from, to, m)).collect();
        while !queue.is_empty() {
            let (src, dst, m) = queue.remove(0);
            if down.contains(&dst) || down.contains(&src) {
                continue;
            }
            let step = nodes[dst.0 as usize].handle(0, src, m);
            queue.extend(step.sends.into_iter().map(|(to, m)| (dst, to, m)));
            nodes[dst.0 as usize].apply();
        }
    }

    fn put(k: &str, v: i64, op: u64) -> Command {
        Command::Put {
            key: k.into(),
            value: json!(v),
            op: OpRef {
                client: "c".into(),
                op,
            },
        }
    }

    #[test]
    fn election_then_commit() {
        let mut n = trio();
        let step = n[0].on_election_timeout(0);
        pump(&mut n, NodeId(0), step.sends, &[]);
        assert!(n[0].is_leader());
        assert_eq!(n[0].term(), 1);
        let (idx, sends) = n[0].propose(put("x", 1, 1)).unwrap();
        assert_eq!(idx, 2);
        pump(&mut n, NodeId(0), sends, &[]);
        n[0].apply();
        assert_eq!(n[0].commit_index(), 2);
        assert_eq!(n[0].read_local("x"), Some(&(json!(1), 2)));
    }

    #[test]
    fn stale_candidate_loses() {
        let mut n = trio();
        let s = n[0].on_election_timeout(0);
        pump(&mut n, NodeId(0), s.sends, &[]);
        let (_, s) = n[0].propose(put("x", 1, 1)).unwrap();
        pump(&mut n, NodeId(0), s, &[NodeId(2)]);
        // Node 2 missed the entry; its log is behind, so it cannot win.
        let s = n[2].on_election_timeout(0);
        pump(&mut n, NodeId(2), s.sends, &[NodeId(0)]);
        assert!(!n[2].is_leader());
    }

    #[test]
    fn two_candidates_same_term_at_most_one_wins() {
        let mut n = trio();
        let a = n[0].on_election_timeout(0);
        let b = n[1].on_election_timeout(0);
        assert_eq!(n[0].term(), n[1].term());
        pump(&mut n, NodeId(0), a.sends, &[]);
        pump(&mut n, NodeId(1), b.sends, &[]);
        let leaders = n.iter().filter(|x| x.is_leader() && x.term() == 1).count();
        assert!(leaders <= 1);
    }

    #[test]
    fn isolated_leader_steps_down() {
        let mut n = trio();
        let s = n[0].on_election_timeout(0);
        pump(&mut n, NodeId(0), s.sends, &[]);
        let s = n[0].on_heartbeat(400);
        assert!(s.reset_timer);
        assert!(!n[0].is_leader());
    }

    #[test]
    fn restart_keeps_log_and_term() {
        let mut n = trio();
        let s = n[0].on_election_timeout(0);
        pump(&mut n, NodeId(0), s.sends, &[]);
        n[1].restart();
        assert_eq!(n[1].term(), 1);
        assert_eq!(n[1].last_index(), 1);
        assert_eq!(n[1].commit_index(), 0);
    }
}
