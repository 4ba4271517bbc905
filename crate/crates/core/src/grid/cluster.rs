use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    AccessMode, AsyncQueue, BlobAccess, BlobKey, BlobStore, CapabilityToken, Grant, GridError,
    HashRing, ObjectRecord, TokenIssuer, VersionId, DEFAULT_TOKEN_TTL_MS, DEFAULT_VNODES,
};
use crate::dataflow::MacroRuns;
use crate::faas::{
    BlobGateway, ContainerPool, HandlerInput, HandlerRegistry, PoolConfig, PoolEffect,
};
use crate::package::{
    check_access, is_builtin, AccessTarget, CallerContext, FunctionKind, ResolvedClass,
    ResolvedClassSet,
};
use crate::sim::{
    Delivery, Envelope, FaultKind, Millis, Network, NodeId, Scheduler, SimRng, Topology,
    DEFAULT_RESTART_MS,
};

pub type RequestId = u64;
pub type TaskId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Persistence {
    /// Persist before replying.
    WriteThrough,
    /// Reply after the IMDG update; a periodic flush persists dirty records.
    WriteBehind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LockMode {
    /// Per-object FIFO at the primary owner.
    Localized,
    /// Comparator: a central lock manager reached over the network.
    ClusterWide,
}

/// Places in the two-phase update where a crash can be injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrashPoint {
    /// Invoker dies after issuing tokens and fresh version ids.
    TokensIssued,
    /// Function container dies after its first blob write.
    MidBlobWrite,
    /// Invoker dies after the function wrote its blobs, before the completion arrives.
    BlobsWritten,
    /// Invoker dies after updating its in-memory record, before persisting.
    ImdgUpdated,
    /// Invoker dies after persisting, before purging old blob versions.
    Persisted,
    /// Invoker dies after purging, before replying.
    Purged,
    /// Invoker dies right after replying.
    Replied,
}

impl CrashPoint {
    pub const ALL: [CrashPoint; 7] = [
        CrashPoint::TokensIssued,
        CrashPoint::MidBlobWrite,
        CrashPoint::BlobsWritten,
        CrashPoint::ImdgUpdated,
        CrashPoint::Persisted,
        CrashPoint::Purged,
        CrashPoint::Replied,
    ];
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    pub persistence: Persistence,
    pub flush_interval_ms: Millis,
    pub sweeper_interval_ms: Millis,
    pub token_ttl_ms: Millis,
    pub lock_mode: LockMode,
    pub restart_ms: Millis,
    pub consumer_poll_ms: Millis,
    pub consumer_max_in_flight: usize,
    pub pool: PoolConfig,
    /// Node that receives client requests; the first node when unset.
    pub ingress: Option<NodeId>,
    pub wire_tap: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            persistence: Persistence::WriteBehind,
            flush_interval_ms: 100,
            sweeper_interval_ms: 10_000,
            token_ttl_ms: DEFAULT_TOKEN_TTL_MS,
            lock_mode: LockMode::Localized,
            restart_ms: DEFAULT_RESTART_MS,
            consumer_poll_ms: 5,
            consumer_max_in_flight: 32,
            pool: PoolConfig::default(),
            ingress: None,
            wire_tap: false,
        }
    }
}

/// What the invoker hands to the execution plane.
#[derive(Debug, Clone, PartialEq)]
pub struct InvocationTask {
    pub task_id: TaskId,
    pub request: RequestId,
    pub object_id: String,
    pub function: String,
    pub handler: String,
    pub args: Value,
    pub structured_snapshot: Value,
    pub read_tokens: BTreeMap<String, CapabilityToken>,
    pub write_tokens: BTreeMap<String, CapabilityToken>,
    pub offset: Option<u64>,
    node: NodeId,
    incarnation: u32,
    pool: PoolKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompletionStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionMsg {
    pub task_id: TaskId,
    pub status: CompletionStatus,
    pub new_structured: Option<Value>,
    pub new_versions: BTreeMap<String, VersionId>,
    pub output: Option<Value>,
    pub new_object: Option<Value>,
    pub error: Option<String>,
}

impl CompletionMsg {
    fn failed(task_id: TaskId, error: String, written: BTreeMap<String, VersionId>) -> Self {
        Self {
            task_id,
            status: CompletionStatus::Failed,
            new_structured: None,
            new_versions: written,
            output: None,
            new_object: None,
            error: Some(error),
        }
    }
}

/// Final result of a request with its timing.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub result: Result<Value, GridError>,
    pub submitted_at: Millis,
    pub finished_at: Millis,
}

/// A consistent read of one object.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectView {
    pub structured: Value,
    pub versions: BTreeMap<String, VersionId>,
    pub blobs: BTreeMap<String, Vec<u8>>,
    pub last_offset: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GridStats {
    pub requests: u64,
    pub succeeded: u64,
    pub failed: u64,
    pub async_applied: u64,
    pub async_skipped: u64,
    pub reroutes: u64,
    pub persisted_writes: u64,
    pub crashes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Origin {
    Client,
    Async(u64),
    Macro { run: u64, step: String },
}

#[derive(Debug, Clone)]
pub(crate) struct Request {
    pub(crate) origin: Origin,
    pub(crate) ctx: CallerContext,
    pub(crate) object_id: String,
    pub(crate) function: String,
    pub(crate) args: Value,
    /// Class for `new`, which runs before the object exists.
    pub(crate) class: Option<String>,
    /// Id for an output object, fixed in advance by the caller.
    pub(crate) output_id: Option<String>,
    /// Leave the target's own state untouched.
    pub(crate) immutable: bool,
    pub(crate) reply_node: NodeId,
    pub(crate) submitted_at: Millis,
    /// Node currently holding the request.
    pub(crate) at_node: Option<NodeId>,
    pub(crate) done: bool,
}

/// Lock holder and FIFO waiters, each with the node that asked.
type LockQueue = (Option<(RequestId, NodeId)>, VecDeque<(RequestId, NodeId)>);

#[derive(Debug, Default, Clone)]
struct ObjectLock {
    held: Option<RequestId>,
    waiting: VecDeque<RequestId>,
}

#[derive(Debug, Default, Clone)]
struct NodeState {
    imdg: BTreeMap<String, ObjectRecord>,
    dirty: BTreeSet<String>,
    /// Old blob versions to purge once their replacement is durable.
    pending_purge: Vec<(String, BlobKey)>,
    locks: BTreeMap<String, ObjectLock>,
    position: u64,
    in_progress: BTreeSet<u64>,
    /// A flush event chain is scheduled.
    flushing: bool,
    /// A consumer poll chain is scheduled.
    polling: bool,
}

pub(crate) type PoolKey = (String, String);

#[derive(Debug, Clone)]
pub(crate) enum Ev {
    Ingress(RequestId),
    Arrive {
        env: Envelope,
        req: RequestId,
    },
    LockNext {
        node: NodeId,
        object: String,
    },
    LockAcquire {
        env: Envelope,
        req: RequestId,
        object: String,
    },
    LockGranted {
        env: Envelope,
        req: RequestId,
    },
    LockRelease {
        env: Envelope,
        object: String,
    },
    ExecDone(TaskId),
    PoolWake(PoolKey),
    PoolTick,
    Flush(NodeId),
    Sweep,
    ConsumerPoll(NodeId),
    Reply {
        env: Envelope,
        req: RequestId,
        result: Result<Value, GridError>,
    },
    Fault(FaultKind),
}

/// A simulated cluster of invoker nodes with their execution plane, blob
/// store, document store and invocation queue.
pub struct GridCluster {
    pub(crate) cfg: GridConfig,
    pub(crate) sched: Scheduler<Ev>,
    pub(crate) net: Network,
    ring: HashRing,
    classes: BTreeMap<String, ResolvedClass>,
    handlers: HandlerRegistry,
    nodes: BTreeMap<NodeId, NodeState>,
    pub(crate) docstore: BTreeMap<String, ObjectRecord>,
    blobs: BlobStore,
    tokens: TokenIssuer,
    queue: AsyncQueue,
    pools: BTreeMap<PoolKey, ContainerPool>,
    pool_ticking: bool,
    tasks: BTreeMap<TaskId, InvocationTask>,
    pub(crate) requests: BTreeMap<RequestId, Request>,
    outcomes: BTreeMap<RequestId, Outcome>,
    async_ids: BTreeMap<u64, RequestId>,
    lock_traces: BTreeMap<String, Vec<RequestId>>,
    arrival_traces: BTreeMap<String, Vec<RequestId>>,
    manager: BTreeMap<String, LockQueue>,
    crash_plan: Option<(CrashPoint, u32)>,
    crash_seen: BTreeMap<CrashPoint, u32>,
    pub(crate) macros: MacroRuns,
    next_id: u64,
    stats: GridStats,
}

impl GridCluster {
    pub fn new(topology: Topology, handlers: HandlerRegistry, cfg: GridConfig, seed: u64) -> Self {
        let rng = SimRng::new(seed);
        let mut net = Network::new(topology.clone());
        if cfg.wire_tap {
            net.enable_tap();
        }
        let ring = HashRing::with_nodes(DEFAULT_VNODES, topology.nodes());
        let mut sched = Scheduler::new();
        let mut nodes = BTreeMap::new();
        for n in topology.nodes() {
            nodes.insert(
                n,
                NodeState {
                    position: 1,
                    flushing: true,
                    polling: true,
                    ..Default::default()
                },
            );
            sched.schedule_in(cfg.flush_interval_ms, Ev::Flush(n));
            sched.schedule_in(cfg.consumer_poll_ms, Ev::ConsumerPoll(n));
        }
        sched.schedule_in(cfg.sweeper_interval_ms, Ev::Sweep);
        Self {
            tokens: TokenIssuer::new(rng.fork("tokens"), cfg.token_ttl_ms),
            cfg,
            sched,
            net,
            ring,
            classes: BTreeMap::new(),
            handlers,
            nodes,
            docstore: BTreeMap::new(),
            blobs: BlobStore::new(),
            queue: AsyncQueue::new(),
            pools: BTreeMap::new(),
            pool_ticking: false,
            tasks: BTreeMap::new(),
            requests: BTreeMap::new(),
            outcomes: BTreeMap::new(),
            async_ids: BTreeMap::new(),
            lock_traces: BTreeMap::new(),
            arrival_traces: BTreeMap::new(),
            manager: BTreeMap::new(),
            crash_plan: None,
            crash_seen: BTreeMap::new(),
            macros: MacroRuns::default(),
            next_id: 0,
            stats: GridStats::default(),
        }
    }

    pub fn register_classes(&mut self, set: &ResolvedClassSet) {
        for c in set.classes.values() {
            self.classes.insert(c.name.clone(), c.clone());
        }
    }

    pub fn class(&self, name: &str) -> Option<&ResolvedClass> {
        self.classes.get(name)
    }

    pub fn now(&self) -> Millis {
        self.sched.now()
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn stats(&self) -> &GridStats {
        &self.stats
    }

    pub fn queue(&self) -> &AsyncQueue {
        &self.queue
    }

    pub fn blob_store(&self) -> &BlobStore {
        &self.blobs
    }

    pub fn pool(&self, class: &str, function: &str) -> Option<&ContainerPool> {
        self.pools.get(&(class.to_string(), function.to_string()))
    }

    /// Primary owner of an object.
    pub fn route(&self, object_id: &str) -> Result<NodeId, GridError> {
        self.ring.owner(object_id)
    }

    pub fn ingress(&self) -> NodeId {
        self.cfg.ingress.unwrap_or_else(|| {
            self.net
                .topology()
                .nodes()
                .next()
                .expect("topology has nodes")
        })
    }

    /// Injects a crash at the `occurrence`-th (1-based) time `point` is reached.
    pub fn inject_crash(&mut self, point: CrashPoint, occurrence: u32) {
        self.crash_plan = Some((point, occurrence));
        self.crash_seen.clear();
    }

    pub fn schedule_fault(&mut self, at: Millis, kind: FaultKind) -> Result<(), GridError> {
        self.sched
            .schedule(at, Ev::Fault(kind))
            .map(|_| ())
            .map_err(|e| GridError::Unavailable(e.to_string()))
    }

    pub(crate) fn fresh_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }

    /// Stores an object directly in the document store (test and scenario setup).
    pub fn create_object(
        &mut self,
        class: &str,
        object_id: &str,
        structured: Value,
    ) -> Result<(), GridError> {
        if !self.classes.contains_key(class) {
            return Err(GridError::NoSuchClass(class.to_string()));
        }
        if self.docstore.contains_key(object_id) {
            return Err(GridError::AlreadyExists(object_id.to_string()));
        }
        let mut rec = ObjectRecord::new(object_id, class);
        rec.structured = structured;
        self.docstore.insert(object_id.to_string(), rec);
        Ok(())
    }

    /// Stores a committed blob version for an existing object (setup helper).
    pub fn seed_blob(
        &mut self,
        object_id: &str,
        key: &str,
        bytes: Vec<u8>,
    ) -> Result<VersionId, GridError> {
        let rec = self
            .docstore
            .get_mut(object_id)
            .ok_or_else(|| GridError::NoSuchObject(object_id.to_string()))?;
        let v = self.blobs.fresh_version();
        self.blobs.put(BlobKey::new(object_id, key, v), bytes)?;
        if let Some(old) = rec.versions.insert(key.to_string(), v) {
            self.blobs.purge(&BlobKey::new(object_id, key, old));
        }
        Ok(v)
    }

    /// Guarantees warm capacity for `rate_rps` on one function.
    pub fn provision_for_rate(
        &mut self,
        class: &str,
        function: &str,
        rate_rps: f64,
    ) -> Result<u32, GridError> {
        let handler = self.handler_of(class, function)?;
        let service = self
            .handlers
            .get(&handler)
            .map(|h| h.service.nominal_ms())
            .unwrap_or(0.0);
        let now = self.now();
        let key = (class.to_string(), function.to_string());
        self.ensure_pool(&key);
        self.pools
            .get_mut(&key)
            .expect("pool exists")
            .provision_for_rate(now, rate_rps, service)
            .map_err(|e| GridError::EngineFailure(e.to_string()))
    }

    fn handler_of(&self, class: &str, function: &str) -> Result<String, GridError> {
        let c = self
            .classes
            .get(class)
            .ok_or_else(|| GridError::NoSuchClass(class.to_string()))?;
        let f = c
            .function(function)
            .ok_or_else(|| GridError::NoSuchFunction {
                class: class.to_string(),
                function: function.to_string(),
            })?;
        Ok(f.handler.clone().unwrap_or_else(|| f.name.clone()))
    }

    // ---- client API -------------------------------------------------------

    /// Submits a synchronous call at the current time; see [`Self::outcome`].
    pub fn submit_sync(
        &mut self,
        ctx: CallerContext,
        object_id: &str,
        function: &str,
        args: Value,
    ) -> RequestId {
        self.submit_at(self.now(), ctx, object_id, function, args, None)
    }

    /// Submits a synchronous call arriving at the ingress at time `at`.
    pub fn submit_at(
        &mut self,
        at: Millis,
        ctx: CallerContext,
        object_id: &str,
        function: &str,
        args: Value,
        class: Option<&str>,
    ) -> RequestId {
        let id = self.fresh_id();
        let ingress = self.ingress();
        self.requests.insert(
            id,
            Request {
                origin: Origin::Client,
                ctx,
                object_id: object_id.to_string(),
                function: function.to_string(),
                args,
                class: class.map(String::from),
                output_id: None,
                immutable: false,
                reply_node: ingress,
                submitted_at: at.max(self.now()),
                at_node: None,
                done: false,
            },
        );
        self.stats.requests += 1;
        let at = at.max(self.now());
        self.sched
            .schedule(at, Ev::Ingress(id))
            .expect("not in the past");
        id
    }

    /// Calls the built-in `new` for `class`.
    pub fn submit_new(
        &mut self,
        ctx: CallerContext,
        class: &str,
        object_id: &str,
        args: Value,
    ) -> RequestId {
        self.submit_at(self.now(), ctx, object_id, "new", args, Some(class))
    }

    /// Runs a synchronous call to completion.
    pub fn invoke_sync(
        &mut self,
        ctx: CallerContext,
        object_id: &str,
        function: &str,
        args: Value,
    ) -> Result<Value, GridError> {
        let id = self.submit_sync(ctx, object_id, function, args);
        self.run_until_done(id)
    }

    pub fn run_until_done(&mut self, id: RequestId) -> Result<Value, GridError> {
        while !self.outcomes.contains_key(&id) {
            if !self.step(Millis::MAX) {
                break;
            }
        }
        self.outcomes
            .get(&id)
            .map(|o| o.result.clone())
            .unwrap_or_else(|| Err(GridError::Unavailable("simulation ended".into())))
    }

    /// Appends an asynchronous call to the queue. Returns the invocation id
    /// (its queue offset); a repeated `(producer, seq)` returns the original id.
    pub fn invoke_async(
        &mut self,
        ctx: &CallerContext,
        producer: &str,
        seq: u64,
        object_id: &str,
        function: &str,
        args: Value,
    ) -> Result<u64, GridError> {
        let class = self.class_of(object_id)?;
        self.check_call(ctx, &class, function)?;
        let a = self.queue.append(producer, seq, object_id, function, args);
        Ok(a.offset)
    }

    pub fn async_outcome(&self, invocation: u64) -> Option<&Outcome> {
        self.async_ids
            .get(&invocation)
            .and_then(|r| self.outcomes.get(r))
    }

    pub fn outcome(&self, id: RequestId) -> Option<&Outcome> {
        self.outcomes.get(&id)
    }

    pub fn outcomes(&self) -> &BTreeMap<RequestId, Outcome> {
        &self.outcomes
    }

    /// Request ids in the order their lock was granted.
    pub fn lock_trace(&self, object_id: &str) -> &[RequestId] {
        self.lock_traces
            .get(object_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Request ids in the order they reached the primary.
    pub fn arrival_trace(&self, object_id: &str) -> &[RequestId] {
        self.arrival_traces
            .get(object_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Reads an object as its owner serves it.
    pub fn read_object(&mut self, object_id: &str) -> Result<ObjectView, GridError> {
        let owner = self.route(object_id)?;
        if !self.net.is_alive(owner) {
            return Err(GridError::Unavailable(format!("{owner} is down")));
        }
        let rec = self.load(owner, object_id)?.clone();
        let mut blobs = BTreeMap::new();
        for (k, v) in &rec.versions {
            let b = self
                .blobs
                .get(&BlobKey::new(object_id, k, *v))
                .ok_or(GridError::MissingBlob(*v))?;
            blobs.insert(k.clone(), b.to_vec());
        }
        Ok(ObjectView {
            structured: rec.structured,
            versions: rec.versions,
            blobs,
            last_offset: rec.last_offset,
        })
    }

    /// Durable record, if any.
    pub fn durable(&self, object_id: &str) -> Option<&ObjectRecord> {
        self.docstore.get(object_id)
    }

    pub fn durable_objects(&self) -> impl Iterator<Item = &ObjectRecord> {
        self.docstore.values()
    }

    /// Durable objects and stored blobs as JSON.
    pub fn inventory_json(&self) -> Value {
        json!({
            "objects": self.docstore.values().collect::<Vec<_>>(),
            "blobs": self.blobs.inventory_json(),
        })
    }

    /// Blob versions referenced by no durable record, live cache entry or
    /// outstanding task.
    pub fn orphan_blobs(&self) -> Vec<BlobKey> {
        let live = self.referenced_blobs();
        self.blobs
            .keys()
            .filter(|k| !live.contains(*k))
            .cloned()
            .collect()
    }

    // ---- running ----------------------------------------------------------

    /// Processes one event if one is due at or before `until`.
    pub fn step(&mut self, until: Millis) -> bool {
        match self.sched.pop_until(until) {
            Some((_, ev)) => {
                self.handle(ev);
                true
            }
            None => false,
        }
    }

    pub fn run_until(&mut self, until: Millis) {
        while self.step(until) {}
        self.sched.advance_to(until);
    }

    /// True when no request, task, queued message or dirty record is pending.
    pub fn is_quiescent(&self) -> bool {
        self.requests.values().all(|r| r.done)
            && self.tasks.is_empty()
            && self.macros.active() == 0
            && self.nodes.iter().all(|(n, s)| {
                s.dirty.is_empty()
                    && s.pending_purge.is_empty()
                    && (!self.net.is_alive(*n) || self.consumer_caught_up(*n))
            })
    }

    fn consumer_caught_up(&self, node: NodeId) -> bool {
        let s = &self.nodes[&node];
        s.in_progress.is_empty() && s.position > self.queue.len() as u64
    }

    /// Runs until quiescent or until `limit`. Returns the stop time.
    pub fn run_until_quiescent(&mut self, limit: Millis) -> Millis {
        while !self.is_quiescent() {
            if !self.step(limit) {
                break;
            }
        }
        self.now()
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Ingress(req) => self.on_ingress(req),
            Ev::Arrive { env, req } => {
                if self.net.accept(&env) {
                    self.on_arrive(env.dst, req);
                } else {
                    self.finish(
                        req,
                        Err(GridError::Unavailable(format!("{} unreachable", env.dst))),
                    );
                }
            }
            Ev::LockNext { node, object } => self.grant_next(node, &object),
            Ev::LockAcquire { env, req, object } => {
                if self.net.accept(&env) {
                    self.manager_acquire(env.dst, env.src, req, object);
                }
            }
            Ev::LockGranted { env, req } => {
                if self.net.accept(&env) {
                    self.lock_granted(env.dst, req);
                }
            }
            Ev::LockRelease { env, object } => {
                if self.net.accept(&env) {
                    self.manager_release(env.dst, &object);
                }
            }
            Ev::ExecDone(task) => self.on_exec_done(task),
            Ev::PoolWake(key) => {
                let now = self.now();
                if let Some(p) = self.pools.get_mut(&key) {
                    let effs = p.wake(now);
                    self.apply_pool_effects(&key, effs);
                }
            }
            Ev::PoolTick => self.on_pool_tick(),
            Ev::Flush(node) => self.on_flush(node),
            Ev::Sweep => self.on_sweep(),
            Ev::ConsumerPoll(node) => self.on_consumer_poll(node),
            Ev::Reply { env, req, result } => {
                let result = if self.net.accept(&env) {
                    result
                } else {
                    Err(GridError::Unavailable("reply lost".into()))
                };
                self.deliver_result(req, result);
            }
            Ev::Fault(kind) => self.apply_fault(kind),
        }
    }

    fn apply_fault(&mut self, kind: FaultKind) {
        match kind {
            FaultKind::Kill(n) => self.kill_node(n),
            FaultKind::Restart(n) => self.restart_node(n),
            FaultKind::Partition(a, b) => self.net.partition(a, b),
            FaultKind::Heal(a, b) => self.net.heal(a, b),
        }
    }

    // ---- ingress and routing ----------------------------------------------

    fn on_ingress(&mut self, req: RequestId) {
        let object = self.requests[&req].object_id.clone();
        let src = self.requests[&req].reply_node;
        match self.route(&object) {
            Ok(owner) => self.forward(src, owner, req),
            Err(e) => self.finish(req, Err(e)),
        }
    }

    pub(crate) fn forward(&mut self, src: NodeId, dst: NodeId, req: RequestId) {
        let now = self.now();
        match self.net.send(now, src, dst, "invoke") {
            (Delivery::At(t), env) => {
                self.sched
                    .schedule(t, Ev::Arrive { env, req })
                    .expect("future");
            }
            (Delivery::Dropped, _) => {
                self.finish(
                    req,
                    Err(GridError::Unavailable(format!("{dst} unreachable"))),
                );
            }
        }
    }

    fn class_of(&self, object_id: &str) -> Result<String, GridError> {
        if let Some(r) = self.docstore.get(object_id) {
            return Ok(r.class.clone());
        }
        self.nodes
            .values()
            .find_map(|s| s.imdg.get(object_id).map(|r| r.class.clone()))
            .ok_or_else(|| GridError::NoSuchObject(object_id.to_string()))
    }

    fn check_call(
        &self,
        ctx: &CallerContext,
        class: &str,
        function: &str,
    ) -> Result<FunctionKind, GridError> {
        let c = self
            .classes
            .get(class)
            .ok_or_else(|| GridError::NoSuchClass(class.to_string()))?;
        let Some(f) = c.function(function) else {
            // Unbound built-ins stay callable with public access.
            return if is_builtin(function) {
                Ok(FunctionKind::Builtin)
            } else {
                Err(GridError::NoSuchFunction {
                    class: class.to_string(),
                    function: function.to_string(),
                })
            };
        };
        let target = AccessTarget {
            package: &c.package,
            class: &c.name,
            access: f.access,
        };
        if !check_access(ctx, target).is_allowed() {
            return Err(GridError::AccessDenied {
                function: function.to_string(),
            });
        }
        Ok(f.kind)
    }

    /// Cached record at `node`, loading it from the document store on a miss.
    fn load(&mut self, node: NodeId, object_id: &str) -> Result<&mut ObjectRecord, GridError> {
        let state = self.nodes.get_mut(&node).expect("known node");
        if !state.imdg.contains_key(object_id) {
            let rec = self
                .docstore
                .get(object_id)
                .cloned()
                .ok_or_else(|| GridError::NoSuchObject(object_id.to_string()))?;
            state.imdg.insert(object_id.to_string(), rec);
        }
        Ok(state.imdg.get_mut(object_id).expect("just loaded"))
    }

    fn on_arrive(&mut self, node: NodeId, req: RequestId) {
        let (object, function, class_hint, ctx) = {
            let r = &self.requests[&req];
            (
                r.object_id.clone(),
                r.function.clone(),
                r.class.clone(),
                r.ctx.clone(),
            )
        };
        if self.route(&object).ok() != Some(node) {
            // Never locked remotely: bounce back through the ingress.
            self.stats.reroutes += 1;
            let ingress = self.ingress();
            self.forward(node, ingress, req);
            return;
        }
        let class = match class_hint {
            Some(c) if function == "new" => c,
            _ => match self.load(node, &object) {
                Ok(r) => r.class.clone(),
                Err(e) => return self.finish(req, Err(e)),
            },
        };
        // Queued calls were checked on enqueue.
        let ctx = match self.requests[&req].origin {
            Origin::Async(_) => CallerContext::Class {
                package: self
                    .classes
                    .get(&class)
                    .map(|c| c.package.clone())
                    .unwrap_or_default(),
                class: class.clone(),
            },
            _ => ctx,
        };
        let kind = match self.check_call(&ctx, &class, &function) {
            Ok(k) => k,
            Err(e) => return self.finish(req, Err(e)),
        };
        self.requests.get_mut(&req).unwrap().at_node = Some(node);
        if kind == FunctionKind::Macro {
            let spec = self.classes[&class]
                .function(&function)
                .and_then(|f| f.dataflow.clone())
                .expect("macro has a dataflow");
            crate::dataflow::start_macro(self, node, req, &class, spec);
            return;
        }
        self.arrival_traces
            .entry(object.clone())
            .or_default()
            .push(req);
        match self.cfg.lock_mode {
            LockMode::Localized => {
                let lock = self
                    .nodes
                    .get_mut(&node)
                    .unwrap()
                    .locks
                    .entry(object.clone())
                    .or_default();
                lock.waiting.push_back(req);
                if lock.held.is_none() {
                    self.grant_next(node, &object);
                }
            }
            LockMode::ClusterWide => {
                let mgr = self.lock_manager();
                let now = self.now();
                if let (Delivery::At(t), env) = self.net.send(now, node, mgr, "lock-acquire") {
                    self.sched
                        .schedule(t, Ev::LockAcquire { env, req, object })
                        .expect("future");
                }
            }
        }
    }

    // ---- locking ------------------------------------------------------------

    fn lock_manager(&self) -> NodeId {
        self.net.topology().nodes().next().expect("nodes")
    }

    fn grant_next(&mut self, node: NodeId, object: &str) {
        if !self.net.is_alive(node) {
            return;
        }
        let Some(lock) = self.nodes.get_mut(&node).unwrap().locks.get_mut(object) else {
            return;
        };
        if lock.held.is_some() {
            return;
        }
        let Some(req) = lock.waiting.pop_front() else {
            return;
        };
        lock.held = Some(req);
        self.lock_traces
            .entry(object.to_string())
            .or_default()
            .push(req);
        self.start(node, req);
    }

    fn manager_acquire(&mut self, mgr: NodeId, primary: NodeId, req: RequestId, object: String) {
        let entry = self.manager.entry(object).or_default();
        entry.1.push_back((req, primary));
        if entry.0.is_none() {
            let next = entry.1.pop_front().unwrap();
            entry.0 = Some(next);
            self.send_grant(mgr, next);
        }
    }

    fn send_grant(&mut self, mgr: NodeId, (req, primary): (RequestId, NodeId)) {
        let now = self.now();
        if let (Delivery::At(t), env) = self.net.send(now, mgr, primary, "lock-grant") {
            self.sched
                .schedule(t, Ev::LockGranted { env, req })
                .expect("future");
        }
    }

    fn lock_granted(&mut self, node: NodeId, req: RequestId) {
        let object = self.requests[&req].object_id.clone();
        self.lock_traces.entry(object).or_default().push(req);
        self.start(node, req);
    }

    fn manager_release(&mut self, mgr: NodeId, object: &str) {
        let Some(entry) = self.manager.get_mut(object) else {
            return;
        };
        entry.0 = entry.1.pop_front();
        if let Some(next) = entry.0 {
            self.send_grant(mgr, next);
        }
    }

    fn release(&mut self, node: NodeId, object: &str) {
        match self.cfg.lock_mode {
            LockMode::Localized => {
                if let Some(lock) = self
                    .nodes
                    .get_mut(&node)
                    .and_then(|s| s.locks.get_mut(object))
                {
                    lock.held = None;
                    let more = !lock.waiting.is_empty();
                    if more {
                        let now = self.now();
                        self.sched
                            .schedule(
                                now,
                                Ev::LockNext {
                                    node,
                                    object: object.to_string(),
                                },
                            )
                            .expect("now");
                    }
                }
            }
            LockMode::ClusterWide => {
                let mgr = self.lock_manager();
                let now = self.now();
                if let (Delivery::At(t), env) = self.net.send(now, node, mgr, "lock-release") {
                    self.sched
                        .schedule(
                            t,
                            Ev::LockRelease {
                                env,
                                object: object.to_string(),
                            },
                        )
                        .expect("future");
                }
            }
        }
    }

    // ---- execution ----------------------------------------------------------

    /// Runs a request that holds its object's lock.
    fn start(&mut self, node: NodeId, req: RequestId) {
        let r = self.requests[&req].clone();
        if let Origin::Async(offset) = r.origin {
            let last = self
                .load(node, &r.object_id)
                .map(|rec| rec.last_offset)
                .unwrap_or(0);
            if offset <= last {
                self.stats.async_skipped += 1;
                self.async_done(node, offset);
                self.requests.get_mut(&req).unwrap().done = true;
                self.release(node, &r.object_id);
                return;
            }
        }
        if r.function == "new" {
            let class = r.class.clone().unwrap_or_default();
            let result = if self.docstore.contains_key(&r.object_id)
                || self.nodes[&node].imdg.contains_key(&r.object_id)
            {
                Err(GridError::AlreadyExists(r.object_id.clone()))
            } else {
                let mut rec = ObjectRecord::new(&r.object_id, &class);
                if r.args.is_object() {
                    rec.structured = r.args.clone();
                }
                self.nodes
                    .get_mut(&node)
                    .unwrap()
                    .imdg
                    .insert(r.object_id.clone(), rec);
                self.persist(node, &r.object_id);
                Ok(json!(r.object_id))
            };
            return self.finish_locked(node, req, result);
        }
        let class = match self.load(node, &r.object_id) {
            Ok(rec) => rec.class.clone(),
            Err(e) => return self.finish_locked(node, req, Err(e)),
        };
        let kind = self.classes[&class]
            .function(&r.function)
            .map(|f| f.kind)
            .or_else(|| is_builtin(&r.function).then_some(FunctionKind::Builtin));
        match kind {
            Some(FunctionKind::Builtin) => {
                let result = self.run_builtin(node, &r);
                self.finish_locked(node, req, result)
            }
            _ => self.dispatch_task(node, req, &class),
        }
    }

    fn run_builtin(&mut self, node: NodeId, r: &Request) -> Result<Value, GridError> {
        match r.function.as_str() {
            "get" => Ok(self.load(node, &r.object_id)?.structured.clone()),
            "update" => {
                let rec = self.load(node, &r.object_id)?;
                let input = HandlerInput {
                    object_id: &r.object_id,
                    function: "update",
                    structured: &rec.structured,
                    args: &r.args,
                };
                let out = crate::faas::json_update(&input, &mut crate::faas::NoBlobs)
                    .map_err(GridError::EngineFailure)?;
                if let Some(s) = out.structured {
                    rec.structured = s;
                }
                let doc = rec.structured.clone();
                self.persist(node, &r.object_id);
                Ok(doc)
            }
            "delete" => {
                let rec = self.load(node, &r.object_id)?.clone();
                self.nodes.get_mut(&node).unwrap().imdg.remove(&r.object_id);
                self.nodes
                    .get_mut(&node)
                    .unwrap()
                    .dirty
                    .remove(&r.object_id);
                self.docstore.remove(&r.object_id);
                for (k, v) in rec.versions {
                    self.blobs.purge(&BlobKey::new(&r.object_id, &k, v));
                }
                Ok(Value::Null)
            }
            other => Err(GridError::NoSuchFunction {
                class: r.class.clone().unwrap_or_default(),
                function: other.to_string(),
            }),
        }
    }

    fn dispatch_task(&mut self, node: NodeId, req: RequestId, class: &str) {
        let r = self.requests[&req].clone();
        let handler = match self.handler_of(class, &r.function) {
            Ok(h) => h,
            Err(e) => return self.finish_locked(node, req, Err(e)),
        };
        let Some(service) = self
            .handlers
            .get(&handler)
            .map(|h| h.service.for_args(&r.args))
        else {
            return self.finish_locked(
                node,
                req,
                Err(GridError::EngineFailure(format!("no handler `{handler}`"))),
            );
        };
        let now = self.now();
        let rec = self.load(node, &r.object_id).expect("loaded").clone();
        let keys: Vec<String> = self.classes[class]
            .unstructured_keys()
            .map(String::from)
            .collect();
        let mut read_tokens = BTreeMap::new();
        let mut write_tokens = BTreeMap::new();
        for key in keys {
            if let Some(v) = rec.versions.get(&key) {
                let t = self.tokens.issue(
                    now,
                    Grant {
                        object_id: r.object_id.clone(),
                        key: key.clone(),
                        version: *v,
                        mode: AccessMode::Read,
                    },
                );
                read_tokens.insert(key.clone(), t);
            }
            if !r.immutable {
                let fresh = self.blobs.fresh_version();
                let t = self.tokens.issue(
                    now,
                    Grant {
                        object_id: r.object_id.clone(),
                        key: key.clone(),
                        version: fresh,
                        mode: AccessMode::WriteNewVersion,
                    },
                );
                write_tokens.insert(key, t);
            }
        }
        let task_id = self.fresh_id();
        let offset = match r.origin {
            Origin::Async(o) => Some(o),
            _ => None,
        };
        self.tasks.insert(
            task_id,
            InvocationTask {
                task_id,
                request: req,
                object_id: r.object_id.clone(),
                function: r.function.clone(),
                handler,
                args: r.args.clone(),
                structured_snapshot: rec.structured.clone(),
                read_tokens,
                write_tokens,
                offset,
                node,
                incarnation: self.net.incarnation(node),
                pool: (class.to_string(), r.function.clone()),
            },
        );
        if self.crash_here(CrashPoint::TokensIssued, node) {
            if let Some(t) = self.tasks.remove(&task_id) {
                self.revoke(&t);
            }
            return;
        }
        let key = (class.to_string(), r.function.clone());
        self.ensure_pool(&key);
        let effs = self
            .pools
            .get_mut(&key)
            .unwrap()
            .submit(now, task_id, service);
        self.apply_pool_effects(&key, effs);
    }

    fn ensure_pool(&mut self, key: &PoolKey) {
        if !self.pools.contains_key(key) {
            self.pools
                .insert(key.clone(), ContainerPool::new(self.cfg.pool.clone()));
        }
        if !self.pool_ticking {
            self.pool_ticking = true;
            self.sched
                .schedule_in(self.cfg.pool.autoscale_tick_ms, Ev::PoolTick);
        }
    }

    fn on_pool_tick(&mut self) {
        let now = self.now();
        let keys: Vec<PoolKey> = self.pools.keys().cloned().collect();
        for k in keys {
            let effs = self.pools.get_mut(&k).unwrap().tick(now);
            self.apply_pool_effects(&k, effs);
        }
        self.sched
            .schedule_in(self.cfg.pool.autoscale_tick_ms, Ev::PoolTick);
    }

    fn apply_pool_effects(&mut self, key: &PoolKey, effs: Vec<PoolEffect>) {
        for e in effs {
            match e {
                PoolEffect::Started { job, done_at, .. } => {
                    self.sched
                        .schedule(done_at, Ev::ExecDone(job))
                        .expect("future");
                }
                PoolEffect::TimedOut { job, waited_ms } => {
                    if let Some(task) = self.tasks.get(&job) {
                        let msg = CompletionMsg::failed(
                            task.task_id,
                            format!("timed out after {waited_ms} ms in queue"),
                            BTreeMap::new(),
                        );
                        self.deliver_completion(job, msg);
                    }
                }
                PoolEffect::WakeAt(t) => {
                    self.sched
                        .schedule(t, Ev::PoolWake(key.clone()))
                        .expect("future");
                }
            }
        }
    }

    fn on_exec_done(&mut self, task_id: TaskId) {
        let Some(task) = self.tasks.get(&task_id).cloned() else {
            return;
        };
        let now = self.now();
        let key = task.pool.clone();
        if let Some(p) = self.pools.get_mut(&key) {
            let effs = p.complete(now, task_id);
            self.apply_pool_effects(&key, effs);
        }
        let Some(handler) = self.handlers.get(&task.handler).cloned() else {
            let msg = CompletionMsg::failed(
                task_id,
                format!("no handler `{}`", task.handler),
                BTreeMap::new(),
            );
            return self.deliver_completion(task_id, msg);
        };
        let crash_mid = self.crash_due(CrashPoint::MidBlobWrite);
        let mut gw = TokenGateway {
            store: &mut self.blobs,
            issuer: &self.tokens,
            now,
            object_id: &task.object_id,
            read: &task.read_tokens,
            write: &task.write_tokens,
            written: BTreeMap::new(),
            crash_after_first: crash_mid,
            crashed: false,
        };
        let input = HandlerInput {
            object_id: &task.object_id,
            function: &task.function,
            structured: &task.structured_snapshot,
            args: &task.args,
        };
        let result = (handler.body)(&input, &mut gw);
        let written = std::mem::take(&mut gw.written);
        let crashed = gw.crashed;
        if crash_mid && crashed {
            self.note_crash(CrashPoint::MidBlobWrite);
        }
        let msg = match result {
            Ok(out) if !crashed => CompletionMsg {
                task_id,
                status: CompletionStatus::Ok,
                new_structured: out.structured,
                new_versions: written,
                output: out.output,
                new_object: out.new_object,
                error: None,
            },
            Ok(_) => CompletionMsg::failed(task_id, "container crashed".into(), written),
            Err(e) => CompletionMsg::failed(task_id, e, written),
        };
        if msg.status == CompletionStatus::Ok
            && self.crash_here(CrashPoint::BlobsWritten, task.node)
        {
            self.tasks.remove(&task_id);
            return;
        }
        self.deliver_completion(task_id, msg);
    }

    /// Completion from the execution plane reaches the invoker.
    fn deliver_completion(&mut self, task_id: TaskId, msg: CompletionMsg) {
        let Some(task) = self.tasks.remove(&task_id) else {
            return;
        };
        self.revoke(&task);
        if !self.net.is_alive(task.node) || self.net.incarnation(task.node) != task.incarnation {
            // The invoker that issued the task is gone; new blobs are orphans.
            return;
        }
        let _ = self.commit_completion(&task, msg);
    }

    fn revoke(&mut self, task: &InvocationTask) {
        for t in task.read_tokens.values().chain(task.write_tokens.values()) {
            self.tokens.revoke(t.token);
        }
    }

    /// Applies a completion to the owner's record: structured state, version
    /// swaps and offset in one step, then persistence, purge and reply.
    fn commit_completion(
        &mut self,
        task: &InvocationTask,
        msg: CompletionMsg,
    ) -> Result<(), GridError> {
        let node = task.node;
        let req = task.request;
        if msg.status == CompletionStatus::Failed {
            for (k, v) in &msg.new_versions {
                self.blobs.purge(&BlobKey::new(&task.object_id, k, *v));
            }
            let err = GridError::EngineFailure(msg.error.unwrap_or_default());
            if let Some(o) = task.offset {
                self.async_done(node, o);
            }
            self.finish_locked(node, req, Err(err));
            return Ok(());
        }
        let (immutable, output_id, class) = {
            let r = &self.requests[&req];
            (
                r.immutable,
                r.output_id.clone(),
                self.class_of(&task.object_id).unwrap_or_default(),
            )
        };
        let mut old = Vec::new();
        {
            let rec = match self.load(node, &task.object_id) {
                Ok(r) => r,
                Err(e) => {
                    self.finish_locked(node, req, Err(e));
                    return Ok(());
                }
            };
            if !immutable {
                if let Some(s) = msg.new_structured {
                    rec.structured = s;
                }
                for (k, v) in &msg.new_versions {
                    if let Some(prev) = rec.versions.insert(k.clone(), *v) {
                        old.push(BlobKey::new(&task.object_id, k, prev));
                    }
                }
            }
            if let Some(o) = task.offset {
                rec.last_offset = rec.last_offset.max(o);
            }
        }
        let mut output = msg.output.unwrap_or(Value::Null);
        if let Some(doc) = msg.new_object {
            let id = output_id.unwrap_or_else(|| format!("{}~{}", task.object_id, task.task_id));
            let out_class = self.classes[&class]
                .function(&task.function)
                .and_then(|f| f.output_class.clone())
                .unwrap_or(class);
            self.create_output(&id, &out_class, doc);
            output = json!(id);
        }
        if task.offset.is_some() {
            self.stats.async_applied += 1;
        }
        if self.crash_here(CrashPoint::ImdgUpdated, node) {
            return Ok(());
        }
        let state = self.nodes.get_mut(&node).unwrap();
        state
            .pending_purge
            .extend(old.into_iter().map(|k| (task.object_id.clone(), k)));
        if self.cfg.persistence == Persistence::WriteThrough
            && !self.persist_and_purge(node, std::slice::from_ref(&task.object_id))
        {
            return Ok(());
        }
        if self.cfg.persistence == Persistence::WriteBehind {
            self.nodes
                .get_mut(&node)
                .unwrap()
                .dirty
                .insert(task.object_id.clone());
        }
        if let Some(o) = task.offset {
            self.async_done(node, o);
        }
        self.finish_locked(node, req, Ok(output));
        self.crash_here(CrashPoint::Replied, node);
        Ok(())
    }

    /// Output objects are written durably and cached at their owner.
    fn create_output(&mut self, id: &str, class: &str, doc: Value) {
        let mut rec = ObjectRecord::new(id, class);
        rec.structured = doc;
        self.docstore.insert(id.to_string(), rec.clone());
        self.stats.persisted_writes += 1;
        if let Ok(owner) = self.route(id) {
            if self.net.is_alive(owner) {
                self.nodes
                    .get_mut(&owner)
                    .unwrap()
                    .imdg
                    .insert(id.to_string(), rec);
            }
        }
    }

    /// Persists per the configured mode (used by built-ins).
    fn persist(&mut self, node: NodeId, object_id: &str) {
        match self.cfg.persistence {
            Persistence::WriteThrough => {
                self.persist_and_purge(node, &[object_id.to_string()]);
            }
            Persistence::WriteBehind => {
                self.nodes
                    .get_mut(&node)
                    .unwrap()
                    .dirty
                    .insert(object_id.to_string());
            }
        }
    }

    /// Writes records to the document store, then purges the old blob
    /// versions they replaced. Returns false if a crash was injected.
    fn persist_and_purge(&mut self, node: NodeId, objects: &[String]) -> bool {
        for id in objects {
            let state = self.nodes.get_mut(&node).unwrap();
            state.dirty.remove(id);
            if let Some(rec) = state.imdg.get(id) {
                self.docstore.insert(id.clone(), rec.clone());
                self.stats.persisted_writes += 1;
            }
        }
        if self.crash_here(CrashPoint::Persisted, node) {
            return false;
        }
        let state = self.nodes.get_mut(&node).unwrap();
        let (now_durable, keep): (Vec<_>, Vec<_>) = std::mem::take(&mut state.pending_purge)
            .into_iter()
            .partition(|(obj, _)| !state.dirty.contains(obj));
        state.pending_purge = keep;
        for (_, k) in now_durable {
            self.blobs.purge(&k);
        }
        !self.crash_here(CrashPoint::Purged, node)
    }

    fn finish_locked(&mut self, node: NodeId, req: RequestId, result: Result<Value, GridError>) {
        let object = self.requests[&req].object_id.clone();
        self.finish(req, result);
        self.release(node, &object);
    }

    /// Sends the result back to whoever is waiting for it.
    pub(crate) fn finish(&mut self, req: RequestId, result: Result<Value, GridError>) {
        let Some(r) = self.requests.get_mut(&req) else {
            return;
        };
        if r.done {
            return;
        }
        r.done = true;
        let from = r.at_node.take();
        let reply_node = r.reply_node;
        if let Origin::Async(o) = r.origin {
            self.async_done(reply_node, o);
            self.async_ids.entry(o).or_insert(req);
            self.record(req, result);
            return;
        }
        let Some(from) = from else {
            return self.deliver_result(req, result);
        };
        let now = self.now();
        match self.net.send(now, from, reply_node, "reply") {
            (Delivery::At(t), env) => {
                self.sched
                    .schedule(t, Ev::Reply { env, req, result })
                    .expect("future");
            }
            (Delivery::Dropped, _) => {
                self.deliver_result(req, Err(GridError::Unavailable("reply lost".into())))
            }
        }
    }

    fn deliver_result(&mut self, req: RequestId, result: Result<Value, GridError>) {
        let origin = self.requests[&req].origin.clone();
        match origin {
            Origin::Macro { run, step } => crate::dataflow::on_step_reply(self, run, &step, result),
            _ => self.record(req, result),
        }
    }

    fn record(&mut self, req: RequestId, result: Result<Value, GridError>) {
        if self.outcomes.contains_key(&req) {
            return;
        }
        if result.is_ok() {
            self.stats.succeeded += 1;
        } else {
            self.stats.failed += 1;
        }
        let submitted_at = self.requests[&req].submitted_at;
        self.outcomes.insert(
            req,
            Outcome {
                result,
                submitted_at,
                finished_at: self.now(),
            },
        );
    }

    /// Registers a request raised by another component (macro steps).
    pub(crate) fn new_request(&mut self, r: Request) -> RequestId {
        let id = self.fresh_id();
        self.requests.insert(id, r);
        id
    }

    // ---- asynchronous consumer ------------------------------------------------

    fn on_consumer_poll(&mut self, node: NodeId) {
        if !self.net.is_alive(node) {
            self.nodes.get_mut(&node).unwrap().polling = false;
            return;
        }
        let max = self.cfg.consumer_max_in_flight;
        let from = self.nodes[&node].position;
        let batch: Vec<_> = self.queue.fetch(from).to_vec();
        for m in batch {
            if self.nodes[&node].in_progress.len() >= max {
                break;
            }
            self.nodes.get_mut(&node).unwrap().position = m.offset + 1;
            if self.route(&m.object_id).ok() != Some(node) {
                continue;
            }
            self.nodes
                .get_mut(&node)
                .unwrap()
                .in_progress
                .insert(m.offset);
            let id = self.new_request(Request {
                origin: Origin::Async(m.offset),
                ctx: CallerContext::External,
                object_id: m.object_id.clone(),
                function: m.function.clone(),
                args: m.args.clone(),
                class: None,
                output_id: None,
                immutable: false,
                reply_node: node,
                submitted_at: self.now(),
                at_node: None,
                done: false,
            });
            self.on_arrive(node, id);
        }
        self.sched
            .schedule_in(self.cfg.consumer_poll_ms, Ev::ConsumerPoll(node));
    }

    fn async_done(&mut self, node: NodeId, offset: u64) {
        if let Some(s) = self.nodes.get_mut(&node) {
            s.in_progress.remove(&offset);
        }
    }

    fn on_flush(&mut self, node: NodeId) {
        if !self.net.is_alive(node) {
            self.nodes.get_mut(&node).unwrap().flushing = false;
            return;
        }
        let dirty: Vec<String> = self.nodes[&node].dirty.iter().cloned().collect();
        if (!dirty.is_empty() || !self.nodes[&node].pending_purge.is_empty())
            && !self.persist_and_purge(node, &dirty)
        {
            return;
        }
        let s = &self.nodes[&node];
        let commit = s
            .in_progress
            .iter()
            .next()
            .copied()
            .unwrap_or(s.position)
            .min(s.position);
        self.queue.commit(node, commit);
        self.sched
            .schedule_in(self.cfg.flush_interval_ms, Ev::Flush(node));
    }

    fn referenced_blobs(&self) -> BTreeSet<BlobKey> {
        let mut live = BTreeSet::new();
        let records = self.docstore.values().chain(
            self.nodes
                .iter()
                .filter(|(n, _)| self.net.is_alive(**n))
                .flat_map(|(_, s)| s.imdg.values()),
        );
        for r in records {
            for (k, v) in &r.versions {
                live.insert(BlobKey::new(&r.object_id, k, *v));
            }
        }
        for t in self.tasks.values() {
            for tok in t.read_tokens.values().chain(t.write_tokens.values()) {
                live.insert(BlobKey::new(
                    &tok.grant.object_id,
                    &tok.grant.key,
                    tok.grant.version,
                ));
            }
        }
        live
    }

    fn on_sweep(&mut self) {
        for k in self.orphan_blobs() {
            self.blobs.purge(&k);
        }
        self.sched
            .schedule_in(self.cfg.sweeper_interval_ms, Ev::Sweep);
    }

    // ---- crashes ------------------------------------------------------------

    fn crash_due(&self, point: CrashPoint) -> bool {
        match self.crash_plan {
            Some((p, n)) if p == point => {
                self.crash_seen.get(&point).copied().unwrap_or(0) + 1 == n
            }
            _ => false,
        }
    }

    fn note_crash(&mut self, point: CrashPoint) {
        *self.crash_seen.entry(point).or_default() += 1;
    }

    /// Reaching `point` on `node`: kills the node if a crash is planned here.
    fn crash_here(&mut self, point: CrashPoint, node: NodeId) -> bool {
        if self.crash_plan.map(|(p, _)| p) != Some(point) {
            return false;
        }
        let due = self.crash_due(point);
        self.note_crash(point);
        if due {
            self.kill_node(node);
            let at = self.now() + self.cfg.restart_ms;
            self.sched
                .schedule(at, Ev::Fault(FaultKind::Restart(node)))
                .expect("future");
        }
        due
    }

    pub fn kill_node(&mut self, node: NodeId) {
        if !self.net.is_alive(node) {
            return;
        }
        self.stats.crashes += 1;
        self.net.kill(node);
        let state = self.nodes.get_mut(&node).unwrap();
        *state = NodeState {
            position: 1,
            flushing: state.flushing,
            polling: state.polling,
            ..Default::default()
        };
        let here: Vec<RequestId> = self
            .requests
            .iter()
            .filter(|(_, r)| !r.done && r.at_node == Some(node))
            .map(|(id, _)| *id)
            .collect();
        for id in here {
            let r = self.requests.get_mut(&id).unwrap();
            r.at_node = None;
            match r.origin {
                // Still in the queue; redelivered after restart.
                Origin::Async(_) => r.done = true,
                _ => self.finish(id, Err(GridError::Unavailable(format!("{node} crashed")))),
            }
        }
        crate::dataflow::on_node_crash(self, node);
    }

    pub fn restart_node(&mut self, node: NodeId) {
        if self.net.is_alive(node) {
            return;
        }
        self.net.restart(node);
        let committed = self.queue.committed(node);
        let state = self.nodes.get_mut(&node).unwrap();
        state.position = committed;
        if !std::mem::replace(&mut state.polling, true) {
            self.sched
                .schedule_in(self.cfg.consumer_poll_ms, Ev::ConsumerPoll(node));
        }
        if !std::mem::replace(&mut state.flushing, true) {
            self.sched
                .schedule_in(self.cfg.flush_interval_ms, Ev::Flush(node));
        }
    }
}

/// Blob access for a running function, limited to its task's tokens.
struct TokenGateway<'a> {
    store: &'a mut BlobStore,
    issuer: &'a TokenIssuer,
    now: Millis,
    object_id: &'a str,
    read: &'a BTreeMap<String, CapabilityToken>,
    write: &'a BTreeMap<String, CapabilityToken>,
    written: BTreeMap<String, VersionId>,
    crash_after_first: bool,
    crashed: bool,
}

impl BlobGateway for TokenGateway<'_> {
    fn read(&mut self, key: &str) -> Result<Vec<u8>, String> {
        let t = self
            .read
            .get(key)
            .ok_or_else(|| format!("no read grant for `{key}`"))?;
        match self
            .issuer
            .blob_access(self.store, self.now, t.token, self.object_id, key, None)
            .map_err(|e| e.to_string())?
        {
            BlobAccess::Bytes(b) => Ok(b),
            BlobAccess::Written(_) => Err("unexpected write".into()),
        }
    }

    fn write(&mut self, key: &str, bytes: Vec<u8>) -> Result<(), String> {
        if self.crashed {
            return Err("container crashed".into());
        }
        let t = self
            .write
            .get(key)
            .ok_or_else(|| format!("no write grant for `{key}`"))?;
        if let BlobAccess::Written(v) = self
            .issuer
            .blob_access(
                self.store,
                self.now,
                t.token,
                self.object_id,
                key,
                Some(bytes),
            )
            .map_err(|e| e.to_string())?
        {
            self.written.insert(key.to_string(), v);
        }
        if self.crash_after_first {
            self.crashed = true;
            return Err("container crashed".into());
        }
        Ok(())
    }
}
