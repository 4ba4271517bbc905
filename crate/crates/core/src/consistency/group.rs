use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::history::{History, HistoryOp, OpKind};
use super::lww::{LwwRegister, Stamp};
use super::merkle::DigestedMap;
use super::raft::{Command, OpRef, RaftConfig, RaftMsg, RaftNode, ReadTicket, Step};
use super::ConsistencyError;
use crate::package::Consistency;
use crate::sim::{
    Delivery, Envelope, Fault, FaultKind, Millis, Network, NodeId, Scheduler, SimRng, Topology,
};

pub const MIN_AE_INTERVAL_MS: Millis = 250;

/// Anti-entropy period for a staleness bound: a quarter of it, at least 250 ms.
pub fn ae_interval_for(delta_ms: Millis) -> Millis {
    (delta_ms / 4).max(MIN_AE_INTERVAL_MS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupConfig {
    pub mode: Consistency,
    pub members: Vec<NodeId>,
    pub raft: RaftConfig,
    pub ae_interval_ms: Millis,
    /// Client-side deadline per operation.
    pub client_timeout_ms: Millis,
}

impl GroupConfig {
    pub fn new(mode: Consistency, members: Vec<NodeId>) -> Self {
        let raft = RaftConfig::default();
        let ae_interval_ms = match mode {
            Consistency::BoundedStaleness { delta_ms } => ae_interval_for(delta_ms),
            _ => MIN_AE_INTERVAL_MS,
        };
        Self {
            mode,
            members,
            raft,
            ae_interval_ms,
            client_timeout_ms: raft.election_max_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClientOps {
    /// Random reads and writes until `stop_ms`.
    Random {
        stop_ms: Millis,
        write_ratio: f64,
        keys: Vec<String>,
    },
    /// Fixed sequence; writes carry a value, reads do not.
    Script(Vec<(OpKind, String, Option<Value>)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSpec {
    pub name: String,
    pub node: NodeId,
    pub start_ms: Millis,
    pub think_ms: Millis,
    pub ops: ClientOps,
}

/// Leader elections and committed entries observed across the run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RaftAudit {
    pub elections: Vec<(Millis, u64, NodeId)>,
    pub committed: BTreeMap<u64, (u64, Command)>,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub ae_rounds: u64,
    pub digests_exchanged: u64,
    pub keys_reconciled: u64,
    /// First time each replica refused an operation for staleness.
    pub first_block: BTreeMap<NodeId, Millis>,
    /// Anti-entropy rounds after each heal until every replica held all
    /// values that existed anywhere at heal time.
    pub convergence_rounds: Vec<u64>,
    pub messages_sent: u64,
}

#[derive(Debug, Clone)]
struct Replica {
    data: DigestedMap,
    seq: u64,
    /// Per peer: time as of which this replica holds all of that peer's state.
    synced: BTreeMap<NodeId, Millis>,
}

type OpResult = Result<(Value, Vec<u64>), ConsistencyError>;

#[derive(Debug, Clone)]
enum Wire {
    Raft(RaftMsg),
    Req {
        client: usize,
        op: u64,
        kind: OpKind,
        key: String,
        value: Value,
    },
    Resp {
        client: usize,
        op: u64,
        result: OpResult,
    },
    Digest {
        snapshot: Box<DigestedMap>,
        sent_at: Millis,
    },
    DigestReply {
        entries: Vec<(String, LwwRegister<Value>)>,
        sent_at: Millis,
    },
}

impl Wire {
    fn kind(&self) -> &'static str {
        match self {
            Wire::Raft(m) => m.kind(),
            Wire::Req { .. } => "client-req",
            Wire::Resp { .. } => "client-resp",
            Wire::Digest { .. } => "ae-digest",
            Wire::DigestReply { .. } => "ae-reply",
        }
    }
}

#[derive(Debug)]
enum Ev {
    Deliver { env: Envelope, wire: Wire },
    Election { node: NodeId, gen: u64 },
    Heartbeat { node: NodeId, term: u64 },
    AeTick,
    ClientNext { client: usize },
    ClientRetry { client: usize, op: u64 },
    ClientTimeout { client: usize, op: u64 },
    Fault(FaultKind),
    KillLeader { down_ms: Millis },
}

#[derive(Debug, Clone)]
struct InFlight {
    op: u64,
    kind: OpKind,
    key: String,
    value: Value,
    invoke: Millis,
}

#[derive(Debug, Clone)]
struct Client {
    spec: ClientSpec,
    rng: SimRng,
    target: NodeId,
    next_op: u64,
    script_pos: usize,
    inflight: Option<InFlight>,
}

#[derive(Debug, Clone)]
struct PendingRead {
    node: NodeId,
    ticket: ReadTicket,
    client: usize,
    op: u64,
    key: String,
}

/// Everything a finished run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRun {
    pub history: History,
    pub audit: RaftAudit,
    pub stats: GroupStats,
}

/// One replica group plus its clients, simulated over the network model.
pub struct GroupSim {
    cfg: GroupConfig,
    sched: Scheduler<Ev>,
    net: Network,
    rng: SimRng,
    raft: BTreeMap<NodeId, RaftNode>,
    election_gen: BTreeMap<NodeId, u64>,
    replicas: BTreeMap<NodeId, Replica>,
    clients: Vec<Client>,
    pending_writes: BTreeMap<OpRef, NodeId>,
    pending_reads: Vec<PendingRead>,
    history: History,
    audit: RaftAudit,
    stats: GroupStats,
    heal_target: Option<(Millis, BTreeMap<String, Stamp>)>,
}

impl GroupSim {
    pub fn new(
        topology: Topology,
        cfg: GroupConfig,
        clients: Vec<ClientSpec>,
        faults: &[Fault],
        seed: u64,
    ) -> Result<Self, ConsistencyError> {
        let n = topology.node_count() as u32;
        let distinct: BTreeSet<NodeId> = cfg.members.iter().copied().collect();
        if cfg.members.is_empty()
            || distinct.len() != cfg.members.len()
            || cfg.members.iter().any(|m| m.0 >= n)
        {
            return Err(ConsistencyError::InvalidGroup(
                "members must be distinct, existing nodes".into(),
            ));
        }
        if clients.iter().any(|c| c.node.0 >= n) {
            return Err(ConsistencyError::InvalidGroup(
                "client on unknown node".into(),
            ));
        }
        let rng = SimRng::new(seed);
        let mut sim = Self {
            sched: Scheduler::new(),
            net: Network::new(topology),
            raft: BTreeMap::new(),
            election_gen: BTreeMap::new(),
            replicas: BTreeMap::new(),
            clients: Vec::new(),
            pending_writes: BTreeMap::new(),
            pending_reads: Vec::new(),
            history: History::default(),
            audit: RaftAudit::default(),
            stats: GroupStats::default(),
            heal_target: None,
            rng: rng.fork("group"),
            cfg,
        };
        for (i, spec) in clients.into_iter().enumerate() {
            let target = match sim.cfg.mode {
                Consistency::Strong => sim.cfg.members[0],
                _ => sim.local_replica(spec.node),
            };
            let start = spec.start_ms;
            sim.clients.push(Client {
                rng: rng.fork_indexed("client", i as u64),
                spec,
                target,
                next_op: 0,
                script_pos: 0,
                inflight: None,
            });
            sim.at(start, Ev::ClientNext { client: i });
        }
        for f in faults {
            sim.at(f.at, Ev::Fault(f.kind));
        }
        let members = sim.cfg.members.clone();
        match sim.cfg.mode {
            Consistency::Strong => {
                for &m in &members {
                    sim.raft.insert(m, RaftNode::new(m, &members, sim.cfg.raft));
                    sim.schedule_election(m);
                }
            }
            _ => {
                for &m in &members {
                    let synced = members
                        .iter()
                        .filter(|&&p| p != m)
                        .map(|&p| (p, 0))
                        .collect();
                    sim.replicas.insert(
                        m,
                        Replica {
                            data: DigestedMap::new(),
                            seq: 0,
                            synced,
                        },
                    );
                }
                sim.at(sim.cfg.ae_interval_ms, Ev::AeTick);
            }
        }
        Ok(sim)
    }

    fn at(&mut self, at: Millis, ev: Ev) {
        let at = at.max(self.sched.now());
        self.sched.schedule(at, ev).expect("run is live");
    }

    pub fn now(&self) -> Millis {
        self.sched.now()
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn raft_node(&self, node: NodeId) -> Option<&RaftNode> {
        self.raft.get(&node)
    }

    /// Current leader with the highest term, if any live node believes it leads.
    pub fn leader(&self) -> Option<NodeId> {
        self.raft
            .values()
            .filter(|r| r.is_leader() && self.net.is_alive(r.id))
            .max_by_key(|r| r.term())
            .map(|r| r.id)
    }

    pub fn replica(&self, node: NodeId) -> Option<&DigestedMap> {
        self.replicas.get(&node).map(|r| &r.data)
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn audit(&self) -> &RaftAudit {
        &self.audit
    }

    pub fn stats(&self) -> &GroupStats {
        &self.stats
    }

    /// Member in the client's datacenter, else the closest one.
    fn local_replica(&self, node: NodeId) -> NodeId {
        let topo = self.net.topology();
        *self
            .cfg
            .members
            .iter()
            .min_by_key(|&&m| {
                (
                    topo.dc_of(m) != topo.dc_of(node),
                    m != node,
                    topo.delay(node, m),
                    m.0,
                )
            })
            .expect("non-empty group")
    }

    fn send(&mut self, from: NodeId, to: NodeId, wire: Wire) {
        let now = self.now();
        self.stats.messages_sent += 1;
        let (delivery, env) = self.net.send(now, from, to, wire.kind());
        if let Delivery::At(t) = delivery {
            self.at(t, Ev::Deliver { env, wire });
        }
    }

    /// Kills whichever node leads at `at` and restarts it `down_ms` later.
    /// No-op if there is no leader then.
    pub fn kill_leader_at(&mut self, at: Millis, down_ms: Millis) {
        self.at(at, Ev::KillLeader { down_ms });
    }

    pub fn run_until(&mut self, until: Millis) {
        while let Some((_, ev)) = self.sched.pop_until(until) {
            self.handle(ev);
        }
        self.sched.advance_to(until);
    }

    /// Runs to `until` and returns the collected results.
    pub fn run(mut self, until: Millis) -> GroupRun {
        self.run_until(until);
        self.finish()
    }

    pub fn finish(mut self) -> GroupRun {
        let extra = self.verify_logs();
        self.audit.violations.extend(extra);
        GroupRun {
            history: self.history,
            audit: self.audit,
            stats: self.stats,
        }
    }

    /// Log-level safety: one leader per term, every member's committed prefix
    /// agrees with what was committed anywhere, and the newest leader holds
    /// every committed entry.
    pub fn verify_logs(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut by_term: BTreeMap<u64, BTreeSet<NodeId>> = BTreeMap::new();
        for &(_, term, node) in &self.audit.elections {
            by_term.entry(term).or_default().insert(node);
        }
        for (term, leaders) in &by_term {
            if leaders.len() > 1 {
                out.push(format!("term {term} had leaders {leaders:?}"));
            }
        }
        for r in self.raft.values() {
            for (i, e) in r.log().iter().enumerate().take(r.commit_index() as usize) {
                let idx = i as u64 + 1;
                if let Some((t, c)) = self.audit.committed.get(&idx) {
                    if *t != e.term || *c != e.command {
                        out.push(format!("{:?} committed a different entry at {idx}", r.id));
                    }
                }
            }
        }
        if let Some(l) = self.leader() {
            let log = self.raft[&l].log();
            for (idx, (t, c)) in &self.audit.committed {
                match log.get(*idx as usize - 1) {
                    Some(e) if e.term == *t && e.command == *c => {}
                    _ => out.push(format!("leader {l:?} lost committed entry {idx}")),
                }
            }
        }
        out
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Deliver { env, wire } => {
                if self.net.accept(&env) {
                    self.on_wire(env.src, env.dst, wire);
                }
            }
            Ev::Election { node, gen } => {
                if self.election_gen.get(&node) != Some(&gen) || !self.net.is_alive(node) {
                    return;
                }
                let now = self.now();
                let step = self
                    .raft
                    .get_mut(&node)
                    .expect("member")
                    .on_election_timeout(now);
                self.raft_step(node, step);
            }
            Ev::Heartbeat { node, term } => {
                let now = self.now();
                let Some(r) = self.raft.get_mut(&node) else {
                    return;
                };
                if !r.is_leader() || r.term() != term || !self.net.is_alive(node) {
                    return;
                }
                let step = r.on_heartbeat(now);
                self.raft_step(node, step);
                if self.raft[&node].is_leader() {
                    let hb = self.cfg.raft.heartbeat_ms;
                    self.at(now + hb, Ev::Heartbeat { node, term });
                } else {
                    self.check_reads(node);
                }
            }
            Ev::AeTick => self.ae_tick(),
            Ev::ClientNext { client } => self.client_next(client),
            Ev::ClientRetry { client, op } => {
                if let Some(f) = self.clients[client].inflight.clone().filter(|f| f.op == op) {
                    self.send_req(client, &f);
                }
            }
            Ev::ClientTimeout { client, op } => {
                if self.clients[client]
                    .inflight
                    .as_ref()
                    .is_some_and(|f| f.op == op)
                {
                    let err = match self.cfg.mode {
                        Consistency::Strong => ConsistencyError::NoQuorum,
                        _ => ConsistencyError::Unavailable,
                    };
                    self.complete(client, Err(err));
                }
            }
            Ev::Fault(kind) => self.fault(kind),
            Ev::KillLeader { down_ms } => {
                if let Some(l) = self.leader() {
                    self.fault(FaultKind::Kill(l));
                    let at = self.now() + down_ms;
                    self.at(at, Ev::Fault(FaultKind::Restart(l)));
                }
            }
        }
    }

    fn fault(&mut self, kind: FaultKind) {
        let now = self.now();
        Fault { at: now, kind }.apply(&mut self.net);
        match kind {
            FaultKind::Restart(n) => {
                if let Some(r) = self.raft.get_mut(&n) {
                    r.restart();
                    self.schedule_election(n);
                }
                self.pending_reads.retain(|p| p.node != n);
                self.pending_writes.retain(|_, at| *at != n);
            }
            FaultKind::Heal(..) if !self.replicas.is_empty() => {
                let mut target: BTreeMap<String, Stamp> = BTreeMap::new();
                for r in self.replicas.values() {
                    for (k, reg) in r.data.map().iter() {
                        let e = target.entry(k.clone()).or_insert(reg.stamp);
                        *e = (*e).max(reg.stamp);
                    }
                }
                self.heal_target = Some((now, target));
            }
            _ => {}
        }
    }

    fn schedule_election(&mut self, node: NodeId) {
        let gen = {
            let g = self.election_gen.entry(node).or_insert(0);
            *g += 1;
            *g
        };
        let delay = self.cfg.raft.election_timeout(&mut self.rng);
        let at = self.now() + delay;
        self.at(at, Ev::Election { node, gen });
    }

    fn raft_step(&mut self, node: NodeId, step: Step) {
        let now = self.now();
        for (to, msg) in step.sends {
            self.send(node, to, Wire::Raft(msg));
        }
        if step.reset_timer {
            self.schedule_election(node);
        }
        if step.became_leader {
            let term = self.raft[&node].term();
            self.audit.elections.push((now, term, node));
            let hb = self.cfg.raft.heartbeat_ms;
            self.at(now + hb, Ev::Heartbeat { node, term });
        }
        self.apply(node);
        self.check_reads(node);
    }

    fn apply(&mut self, node: NodeId) {
        let applied = self.raft.get_mut(&node).expect("member").apply();
        for (idx, e) in applied {
            match self.audit.committed.get(&idx) {
                None => {
                    self.audit
                        .committed
                        .insert(idx, (e.term, e.command.clone()));
                }
                Some((t, c)) if *t != e.term || *c != e.command => {
                    self.audit.violations.push(format!(
                        "{node:?} applied term {} at {idx}, committed term {t}",
                        e.term
                    ));
                }
                _ => {}
            }
            if let Command::Put { value, op, .. } = e.command {
                if self.pending_writes.get(&op) == Some(&node) {
                    self.pending_writes.remove(&op);
                    if let Some(client) = self.clients.iter().position(|c| c.spec.name == op.client)
                    {
                        self.respond(node, client, op.op, Ok((value, vec![idx])));
                    }
                }
            }
        }
    }

    fn check_reads(&mut self, node: NodeId) {
        let mut i = 0;
        while i < self.pending_reads.len() {
            let p = &self.pending_reads[i];
            if p.node != node {
                i += 1;
                continue;
            }
            let r = &self.raft[&node];
            match r.read_ready(&p.ticket) {
                Some(false) => i += 1,
                Some(true) => {
                    let p = self.pending_reads.remove(i);
                    let res = match self.raft[&node].read_local(&p.key) {
                        Some((v, idx)) => (v.clone(), vec![*idx]),
                        None => (Value::Null, vec![]),
                    };
                    self.respond(node, p.client, p.op, Ok(res));
                }
                None => {
                    let hint = r.leader_hint();
                    let p = self.pending_reads.remove(i);
                    self.respond(node, p.client, p.op, Err(ConsistencyError::NotLeader(hint)));
                }
            }
        }
    }

    fn respond(&mut self, from: NodeId, client: usize, op: u64, result: OpResult) {
        let to = self.clients[client].spec.node;
        self.send(from, to, Wire::Resp { client, op, result });
    }

    fn on_wire(&mut self, src: NodeId, dst: NodeId, wire: Wire) {
        let now = self.now();
        match wire {
            Wire::Raft(msg) => {
                let step = self
                    .raft
                    .get_mut(&dst)
                    .expect("member")
                    .handle(now, src, msg);
                self.raft_step(dst, step);
            }
            Wire::Req {
                client,
                op,
                kind,
                key,
                value,
            } => self.on_request(dst, client, op, kind, key, value),
            Wire::Resp { client, op, result } => {
                if self.clients[client]
                    .inflight
                    .as_ref()
                    .is_none_or(|f| f.op != op)
                {
                    return;
                }
                match result {
                    Err(ConsistencyError::NotLeader(hint)) => {
                        let c = &mut self.clients[client];
                        let members = &self.cfg.members;
                        let (target, delay) = match hint {
                            Some(h) if h != c.target => (h, 0),
                            _ => {
                                let pos = members.iter().position(|&m| m == c.target).unwrap_or(0);
                                (
                                    members[(pos + 1) % members.len()],
                                    self.cfg.raft.heartbeat_ms,
                                )
                            }
                        };
                        c.target = target;
                        self.at(now + delay, Ev::ClientRetry { client, op });
                    }
                    other => self.complete(client, other),
                }
            }
            Wire::Digest { snapshot, sent_at } => {
                let Some(me) = self.replicas.get_mut(&dst) else {
                    return;
                };
                let diff = snapshot.tree().diff(me.data.tree());
                self.stats.digests_exchanged += 1 + diff.digests_exchanged as u64;
                let mut changed = 0;
                for (k, r) in snapshot.entries_in(&diff.divergent_leaves) {
                    changed += me.data.merge_entry(&k, &r) as u64;
                }
                let s = me.synced.entry(src).or_insert(0);
                *s = (*s).max(sent_at);
                let entries = me.data.entries_in(&diff.divergent_leaves);
                self.stats.keys_reconciled += changed;
                self.send(
                    dst,
                    src,
                    Wire::DigestReply {
                        entries,
                        sent_at: now,
                    },
                );
            }
            Wire::DigestReply { entries, sent_at } => {
                let Some(me) = self.replicas.get_mut(&dst) else {
                    return;
                };
                let mut changed = 0;
                for (k, r) in &entries {
                    changed += me.data.merge_entry(k, r) as u64;
                }
                let s = me.synced.entry(src).or_insert(0);
                *s = (*s).max(sent_at);
                self.stats.keys_reconciled += changed;
            }
        }
    }

    fn on_request(
        &mut self,
        node: NodeId,
        client: usize,
        op: u64,
        kind: OpKind,
        key: String,
        value: Value,
    ) {
        let now = self.now();
        match self.cfg.mode {
            Consistency::Strong => {
                let r = self.raft.get_mut(&node).expect("member");
                let hint = r.leader_hint();
                match kind {
                    OpKind::Read => match r.start_read() {
                        Some((ticket, sends)) => {
                            self.pending_reads.push(PendingRead {
                                node,
                                ticket,
                                client,
                                op,
                                key,
                            });
                            self.raft_step(
                                node,
                                Step {
                                    sends,
                                    ..Step::default()
                                },
                            );
                        }
                        None => {
                            self.respond(node, client, op, Err(ConsistencyError::NotLeader(hint)))
                        }
                    },
                    _ => {
                        let op_ref = OpRef {
                            client: self.clients[client].spec.name.clone(),
                            op,
                        };
                        let cmd = Command::Put {
                            key,
                            value,
                            op: op_ref.clone(),
                        };
                        match r.propose(cmd) {
                            Some((_, sends)) => {
                                self.pending_writes.insert(op_ref, node);
                                self.raft_step(
                                    node,
                                    Step {
                                        sends,
                                        ..Step::default()
                                    },
                                );
                            }
                            None => self.respond(
                                node,
                                client,
                                op,
                                Err(ConsistencyError::NotLeader(hint)),
                            ),
                        }
                    }
                }
            }
            mode => {
                let me = self.replicas.get_mut(&node).expect("member");
                if let Consistency::BoundedStaleness { delta_ms } = mode {
                    let oldest = me.synced.values().copied().min().unwrap_or(now);
                    if now.saturating_sub(oldest) >= delta_ms {
                        self.stats.first_block.entry(node).or_insert(now);
                        return self.respond(
                            node,
                            client,
                            op,
                            Err(ConsistencyError::StalenessWindowExceeded),
                        );
                    }
                }
                let res = match kind {
                    OpKind::Read => match me.data.get(&key) {
                        Some(r) => (r.value.clone(), r.stamp.as_version()),
                        None => (Value::Null, vec![]),
                    },
                    _ => {
                        // Stamps from this replica always beat what it already holds.
                        let time = match me.data.get(&key) {
                            Some(r) if r.stamp.time >= now => r.stamp.time + 1,
                            _ => now,
                        };
                        me.seq += 1;
                        let stamp = Stamp {
                            time,
                            node,
                            seq: me.seq,
                        };
                        me.data
                            .merge_entry(&key, &LwwRegister::new(value.clone(), stamp));
                        (value, stamp.as_version())
                    }
                };
                self.respond(node, client, op, Ok(res));
            }
        }
    }

    fn ae_tick(&mut self) {
        let now = self.now();
        let interval = self.cfg.ae_interval_ms;
        self.at(now + interval, Ev::AeTick);
        if let Some((healed_at, target)) = &self.heal_target {
            let done = self
                .replicas
                .iter()
                .filter(|(n, _)| self.net.is_alive(**n))
                .all(|(_, r)| {
                    target
                        .iter()
                        .all(|(k, s)| r.data.get(k).is_some_and(|reg| reg.stamp >= *s))
                });
            if done {
                let rounds = (now - healed_at).div_ceil(interval).saturating_sub(1);
                self.stats.convergence_rounds.push(rounds);
                self.heal_target = None;
            }
        }
        self.stats.ae_rounds += 1;
        let members = self.cfg.members.clone();
        for &a in &members {
            if !self.net.is_alive(a) {
                continue;
            }
            for &b in members.iter().filter(|&&b| b != a) {
                let snapshot = Box::new(self.replicas[&a].data.clone());
                self.send(
                    a,
                    b,
                    Wire::Digest {
                        snapshot,
                        sent_at: now,
                    },
                );
            }
        }
    }

    fn client_next(&mut self, client: usize) {
        let now = self.now();
        let c = &mut self.clients[client];
        let (kind, key, value) = match &c.spec.ops {
            ClientOps::Random {
                stop_ms,
                write_ratio,
                keys,
            } => {
                if now >= *stop_ms || keys.is_empty() {
                    return;
                }
                let key = keys[c.rng.range_inclusive(0, keys.len() as u64 - 1) as usize].clone();
                if c.rng.chance(*write_ratio) {
                    (
                        OpKind::Write,
                        key,
                        json!(format!("{}-{}", c.spec.name, c.next_op)),
                    )
                } else {
                    (OpKind::Read, key, Value::Null)
                }
            }
            ClientOps::Script(ops) => {
                let Some((kind, key, value)) = ops.get(c.script_pos).cloned() else {
                    return;
                };
                c.script_pos += 1;
                (kind, key, value.unwrap_or(Value::Null))
            }
        };
        let f = InFlight {
            op: c.next_op,
            kind,
            key,
            value,
            invoke: now,
        };
        c.next_op += 1;
        c.inflight = Some(f.clone());
        let timeout = self.cfg.client_timeout_ms;
        self.at(now + timeout, Ev::ClientTimeout { client, op: f.op });
        self.send_req(client, &f);
    }

    fn send_req(&mut self, client: usize, f: &InFlight) {
        let (from, to) = (self.clients[client].spec.node, self.clients[client].target);
        self.send(
            from,
            to,
            Wire::Req {
                client,
                op: f.op,
                kind: f.kind,
                key: f.key.clone(),
                value: f.value.clone(),
            },
        );
    }

    fn complete(&mut self, client: usize, result: OpResult) {
        let now = self.now();
        let c = &mut self.clients[client];
        let Some(f) = c.inflight.take() else { return };
        let (ok, value, version, error) = match result {
            Ok((v, ver)) => (true, v, Some(ver), None),
            Err(e) => (false, f.value, None, Some(e.to_string())),
        };
        self.history.push(HistoryOp {
            op: f.kind,
            key: f.key,
            client: c.spec.name.clone(),
            invoke: f.invoke,
            ack: now,
            value,
            version,
            ok,
            error,
        });
        let think = c.spec.think_ms;
        self.at(now + think, Ev::ClientNext { client });
    }
}
