use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{build_dag, Dag, DataflowError, DataflowSpec, StepInput, StepTarget};
use crate::grid::{GridCluster, GridError, RequestId};
use crate::grid::{Origin, Request};
use crate::package::CallerContext;
use crate::sim::{FaultKind, Millis, NodeId};

/// Durable orchestrator state, written after every step completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub run: u64,
    pub root: String,
    pub class: String,
    pub function: String,
    pub spec: DataflowSpec,
    pub bindings: BTreeMap<String, Value>,
    pub done: BTreeSet<String>,
    pub pre_generated_ids: BTreeMap<String, String>,
    pub failed: Option<(String, String)>,
    pub finished: bool,
}

/// One dispatched step, for ordering and overlap assertions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub run: u64,
    pub step: String,
    pub orchestrator: NodeId,
    pub dispatched_at: Millis,
    pub completed_at: Option<Millis>,
}

#[derive(Debug, Clone)]
struct ActiveRun {
    client_req: RequestId,
    orchestrator: NodeId,
    incarnation: u32,
    package: String,
    dag: Dag,
    in_flight: BTreeSet<String>,
}

#[derive(Debug, Clone, Default)]
pub struct MacroRuns {
    active: BTreeMap<u64, ActiveRun>,
    checkpoints: BTreeMap<u64, Checkpoint>,
    by_request: BTreeMap<RequestId, u64>,
    trace: Vec<StepTrace>,
    crash_after: Option<String>,
}

impl MacroRuns {
    pub(crate) fn active(&self) -> usize {
        self.active.len()
    }
}

impl GridCluster {
    /// Run started by a client macro request.
    pub fn macro_run_of(&self, req: RequestId) -> Option<u64> {
        self.macros.by_request.get(&req).copied()
    }

    pub fn checkpoint(&self, run: u64) -> Option<&Checkpoint> {
        self.macros.checkpoints.get(&run)
    }

    pub fn macro_trace(&self) -> &[StepTrace] {
        &self.macros.trace
    }

    /// Kills the orchestrator right after `step` is checkpointed.
    pub fn crash_orchestrator_after(&mut self, step: &str) {
        self.macros.crash_after = Some(step.to_string());
    }

    /// Continues a run whose orchestrator crashed, from its checkpoint. Steps
    /// already checkpointed are not re-executed; the rest reuse their
    /// pre-generated output ids. Returns the request that will carry the
    /// run's result, or `None` if there is nothing to resume.
    pub fn resume_after_crash(&mut self, run: u64) -> Result<Option<RequestId>, DataflowError> {
        let cp = self
            .macros
            .checkpoints
            .get(&run)
            .ok_or(DataflowError::UnknownRun(run))?
            .clone();
        if cp.finished || cp.failed.is_some() || self.macros.active.contains_key(&run) {
            return Ok(None);
        }
        if !cp.spec.all_immutable() {
            return Err(DataflowError::NotIdempotent(run));
        }
        let orchestrator = self
            .route(&cp.root)
            .map_err(|_| DataflowError::OrchestratorDown(run))?;
        if !self.net.is_alive(orchestrator) {
            return Err(DataflowError::OrchestratorDown(run));
        }
        let package = self
            .class(&cp.class)
            .map(|c| c.package.clone())
            .unwrap_or_default();
        let now = self.now();
        let ingress = self.ingress();
        let req = self.new_request(Request {
            origin: Origin::Client,
            ctx: CallerContext::External,
            object_id: cp.root.clone(),
            function: cp.function.clone(),
            args: Value::Null,
            class: None,
            output_id: None,
            immutable: false,
            reply_node: ingress,
            submitted_at: now,
            at_node: Some(orchestrator),
            done: false,
        });
        let dag = build_dag(&cp.spec).expect("validated on load");
        self.macros.by_request.insert(req, run);
        self.macros.active.insert(
            run,
            ActiveRun {
                client_req: req,
                orchestrator,
                incarnation: self.net.incarnation(orchestrator),
                package,
                dag,
                in_flight: BTreeSet::new(),
            },
        );
        dispatch_ready(self, run);
        Ok(Some(req))
    }
}

pub(crate) fn start_macro(
    g: &mut GridCluster,
    node: NodeId,
    req: RequestId,
    class: &str,
    spec: DataflowSpec,
) {
    let dag = match build_dag(&spec) {
        Ok(d) => d,
        Err(e) => return g.finish(req, Err(GridError::Macro(e.to_string()))),
    };
    let run = g.fresh_id();
    let (root, function, args) = {
        let r = &g.requests[&req];
        (r.object_id.clone(), r.function.clone(), r.args.clone())
    };
    let mut bindings = BTreeMap::new();
    for a in &spec.args {
        bindings.insert(a.clone(), args.get(a).cloned().unwrap_or(Value::Null));
    }
    let pre_generated_ids = spec
        .steps
        .iter()
        .filter(|s| s.output_var.is_some())
        .map(|s| {
            (
                s.name.clone(),
                format!("{root}.{function}.r{run}.{}", s.name),
            )
        })
        .collect();
    let package = g
        .class(class)
        .map(|c| c.package.clone())
        .unwrap_or_default();
    g.macros.checkpoints.insert(
        run,
        Checkpoint {
            run,
            root,
            class: class.to_string(),
            function,
            spec,
            bindings,
            done: BTreeSet::new(),
            pre_generated_ids,
            failed: None,
            finished: false,
        },
    );
    g.macros.by_request.insert(req, run);
    g.macros.active.insert(
        run,
        ActiveRun {
            client_req: req,
            orchestrator: node,
            incarnation: g.net.incarnation(node),
            package,
            dag,
            in_flight: BTreeSet::new(),
        },
    );
    dispatch_ready(g, run);
}

fn step_args(inputs: &[StepInput], bindings: &BTreeMap<String, Value>) -> Value {
    let mut map = Map::new();
    let mut literals = Vec::new();
    for i in inputs {
        match i {
            StepInput::Var(v) => match bindings.get(v).cloned().unwrap_or(Value::Null) {
                Value::Object(o) => map.extend(o),
                other => {
                    map.insert(v.clone(), other);
                }
            },
            StepInput::Literal(Value::Object(o)) => map.extend(o.clone()),
            StepInput::Literal(other) => literals.push(other.clone()),
        }
    }
    if !literals.is_empty() {
        map.insert("inputs".into(), Value::Array(literals));
    }
    Value::Object(map)
}

/// Sends every step whose inputs are bound, in step-name order.
fn dispatch_ready(g: &mut GridCluster, run: u64) {
    let Some(active) = g.macros.active.get(&run) else {
        return;
    };
    let cp = &g.macros.checkpoints[&run];
    let ready: Vec<String> = active
        .dag
        .deps
        .iter()
        .filter(|(s, deps)| {
            !cp.done.contains(*s)
                && !active.in_flight.contains(*s)
                && deps.iter().all(|d| cp.done.contains(d))
        })
        .map(|(s, _)| s.clone())
        .collect();
    let orchestrator = active.orchestrator;
    let package = active.package.clone();
    for name in ready {
        let cp = &g.macros.checkpoints[&run];
        let step = cp.spec.step(&name).expect("step in dag").clone();
        let target = match &step.target {
            StepTarget::Root => Some(cp.root.clone()),
            StepTarget::Object(id) => Some(id.clone()),
            StepTarget::Var(v) => cp.bindings.get(v).and_then(Value::as_str).map(String::from),
        };
        let Some(target) = target else {
            let cause = "variable does not name an object".to_string();
            return fail_run(g, run, &name, cause);
        };
        let req = Request {
            origin: Origin::Macro {
                run,
                step: name.clone(),
            },
            ctx: CallerContext::Class {
                package: package.clone(),
                class: cp.class.clone(),
            },
            object_id: target.clone(),
            function: step.function.clone(),
            args: step_args(&step.inputs, &cp.bindings),
            class: None,
            output_id: cp.pre_generated_ids.get(&name).cloned(),
            immutable: step.immutable,
            reply_node: orchestrator,
            submitted_at: g.now(),
            at_node: None,
            done: false,
        };
        let id = g.new_request(req);
        g.macros
            .active
            .get_mut(&run)
            .unwrap()
            .in_flight
            .insert(name.clone());
        let now = g.now();
        g.macros.trace.push(StepTrace {
            run,
            step: name.clone(),
            orchestrator,
            dispatched_at: now,
            completed_at: None,
        });
        match g.route(&target) {
            Ok(owner) => g.forward(orchestrator, owner, id),
            Err(e) => g.finish(id, Err(e)),
        }
        if !g.macros.active.contains_key(&run) {
            return;
        }
    }
}

fn fail_run(g: &mut GridCluster, run: u64, step: &str, cause: String) {
    let Some(active) = g.macros.active.remove(&run) else {
        return;
    };
    if let Some(cp) = g.macros.checkpoints.get_mut(&run) {
        cp.failed = Some((step.to_string(), cause.clone()));
    }
    let err = DataflowError::StepFailure {
        step: step.to_string(),
        cause,
    };
    g.finish(active.client_req, Err(GridError::Macro(err.to_string())));
}

pub(crate) fn on_step_reply(
    g: &mut GridCluster,
    run: u64,
    step: &str,
    result: Result<Value, GridError>,
) {
    let now = g.now();
    let Some(active) = g.macros.active.get(&run) else {
        return;
    };
    let orch = active.orchestrator;
    if !g.net.is_alive(orch) || g.net.incarnation(orch) != active.incarnation {
        return;
    }
    if let Some(t) = g
        .macros
        .trace
        .iter_mut()
        .rev()
        .find(|t| t.run == run && t.step == step && t.completed_at.is_none())
    {
        t.completed_at = Some(now);
    }
    g.macros
        .active
        .get_mut(&run)
        .unwrap()
        .in_flight
        .remove(step);
    let value = match result {
        Ok(v) => v,
        Err(e) => return fail_run(g, run, step, e.to_string()),
    };
    let cp = g.macros.checkpoints.get_mut(&run).expect("checkpoint");
    if let Some(var) = cp.spec.step(step).and_then(|s| s.output_var.clone()) {
        cp.bindings.insert(var, value);
    }
    cp.done.insert(step.to_string());
    if g.macros.crash_after.as_deref() == Some(step) {
        g.macros.crash_after = None;
        g.kill_node(orch);
        let at = now + g.cfg.restart_ms;
        let _ = g.schedule_fault(at, FaultKind::Restart(orch));
        return;
    }
    let cp = &g.macros.checkpoints[&run];
    if cp.done.len() == cp.spec.steps.len() {
        let out = cp
            .spec
            .output_var()
            .and_then(|v| cp.bindings.get(v).cloned())
            .unwrap_or(Value::Null);
        g.macros.checkpoints.get_mut(&run).unwrap().finished = true;
        let active = g.macros.active.remove(&run).unwrap();
        g.finish(active.client_req, Ok(out));
    } else {
        dispatch_ready(g, run);
    }
}

/// Orchestration state of runs on a crashed node is lost; checkpoints remain.
pub(crate) fn on_node_crash(g: &mut GridCluster, node: NodeId) {
    g.macros.active.retain(|_, a| a.orchestrator != node);
}
