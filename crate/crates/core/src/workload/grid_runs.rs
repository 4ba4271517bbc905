use serde_json::{json, Value};

use super::report::{MetricsReport, PhaseMetrics};
use super::{Mode, ScenarioError, ScenarioSpec};
use crate::consistency::{check, CheckKind, History, HistoryOp, OpKind};
use crate::faas::{
    detect_faces, recognize_faces, split_frames, HandlerInput, HandlerRegistry, NoBlobs, PoolConfig,
};
use crate::grid::{CrashPoint, GridCluster, GridConfig, Persistence};
use crate::package::CallerContext;
use crate::sim::{Millis, SimRng};

fn cluster(spec: &ScenarioSpec, cfg: GridConfig, seed: u64) -> Result<GridCluster, ScenarioError> {
    let classes = spec
        .classes()?
        .ok_or_else(|| ScenarioError::Invalid("this driver needs a package".into()))?;
    let mut g = GridCluster::new(
        spec.topology()?,
        HandlerRegistry::with_builtins(),
        cfg,
        seed,
    );
    g.register_classes(&classes);
    Ok(g)
}

fn warm() -> GridConfig {
    GridConfig {
        pool: PoolConfig {
            cold_start_ms: 0,
            ..PoolConfig::default()
        },
        ..GridConfig::default()
    }
}

fn run_err(e: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Run(e.to_string())
}

/// Async counter increments under invoker crashes. Some submissions are
/// repeated with the same producer sequence, as a producer would after a
/// lost acknowledgement.
pub(super) fn exactly_once(
    spec: &ScenarioSpec,
    report: &mut MetricsReport,
) -> Result<(), ScenarioError> {
    let phase = spec
        .workload
        .first()
        .cloned()
        .unwrap_or(super::WorkloadPhase {
            phase: "increments".into(),
            target: "video.increment".into(),
            rate_rps: 100.0,
            duration_ms: 10_000,
            mode: Mode::Async,
            payload_bytes: 0,
        });
    let (class, function) = phase.target.split_once('.').ok_or_else(|| {
        ScenarioError::Invalid(format!("target `{}` is not Class.function", phase.target))
    })?;
    let n = (phase.rate_rps * phase.duration_ms as f64 / 1000.0).round() as u64;
    let gap = (1000.0 / phase.rate_rps).max(1.0) as Millis;
    let retry_every = spec.param_u64("retry_every", 7).max(1);
    let limit = spec.until_ms.unwrap_or(600_000);
    let mut failing = Vec::new();
    for seed in spec.seed_list() {
        let mut g = cluster(spec, GridConfig::default(), seed)?;
        g.create_object(class, "counter", json!({}))
            .map_err(run_err)?;
        if let Some(chaos) = &spec.chaos {
            let faults = chaos
                .expand(&spec.topology()?, &SimRng::new(seed), phase.duration_ms)
                .map_err(|e| ScenarioError::Chaos(e.to_string()))?;
            for f in faults {
                g.schedule_fault(f.at, f.kind).map_err(run_err)?;
            }
        }
        let mut ids = Vec::new();
        for i in 0..n {
            g.run_until(i * gap);
            let ctx = CallerContext::External;
            let id = g
                .invoke_async(&ctx, "producer", i, "counter", function, json!({}))
                .map_err(run_err)?;
            if i % retry_every == 0 {
                g.invoke_async(&ctx, "producer", i, "counter", function, json!({}))
                    .map_err(run_err)?;
            }
            ids.push((i, i * gap, id));
        }
        g.run_until_quiescent(limit);
        let t = g.now();
        // Let write-behind flush so the durable copy is current too.
        g.run_until(t + 1_000);
        let read_at = g.now();
        let count = g.read_object("counter").map_err(run_err)?.structured["count"].clone();
        let durable = g.durable("counter").map(|r| r.structured["count"].clone());

        let mut h = History::default();
        let mut latencies = Vec::new();
        let mut errors = 0;
        for (i, at, id) in ids {
            let outcome = g.async_outcome(id);
            let ok = outcome.is_some_and(|o| o.result.is_ok());
            if ok {
                latencies.push(outcome.map_or(0, |o| o.finished_at - at));
            } else {
                errors += 1;
            }
            h.push(HistoryOp {
                op: OpKind::Increment,
                key: "counter".into(),
                client: "producer".into(),
                invoke: at,
                ack: outcome.map_or(at, |o| o.finished_at.max(at)),
                value: json!(i),
                version: None,
                ok,
                error: outcome.and_then(|o| o.result.as_ref().err().map(|e| e.to_string())),
            });
        }
        h.push(HistoryOp {
            op: OpKind::Read,
            key: "counter".into(),
            client: "reader".into(),
            invoke: read_at,
            ack: read_at,
            value: count.clone(),
            version: None,
            ok: true,
            error: None,
        });
        let verdict = check(&h, CheckKind::ExactlyOnce);
        let exact = count == json!(n) && durable == Some(json!(n));
        if !(verdict.passed && exact) {
            failing.push(format!("seed {seed}: count {count}, durable {durable:?}"));
        }
        report.value(&format!("count/{seed}"), &count);
        report.value(&format!("crashes/{seed}"), g.stats().crashes);
        report.phases.push(PhaseMetrics::from_samples(
            seed,
            &phase.phase,
            &phase.target,
            phase.rate_rps,
            phase.duration_ms,
            n,
            errors,
            0,
            latencies,
        ));
        report.histories.insert(format!("increments-{seed}"), h);
    }
    if spec.wants("exactly-once") {
        let detail = if failing.is_empty() {
            format!("counter = {n} in all {} seeds", spec.seeds)
        } else {
            failing.join("; ")
        };
        report.check("exactly-once", failing.is_empty(), detail);
    }
    Ok(())
}

/// Concurrent same-object requests under localized locking.
pub(super) fn locking(
    spec: &ScenarioSpec,
    report: &mut MetricsReport,
) -> Result<(), ScenarioError> {
    let n = spec.param_u64("requests", 100);
    let cfg = GridConfig {
        wire_tap: true,
        ..warm()
    };
    let mut g = cluster(spec, cfg, spec.seed)?;
    g.create_object("video", "hot", json!({}))
        .map_err(run_err)?;
    let ids: Vec<_> = (0..n)
        .map(|i| {
            g.submit_at(
                10,
                CallerContext::External,
                "hot",
                "append",
                json!({"append": {"order": i}}),
                None,
            )
        })
        .collect();
    g.run_until_quiescent(spec.until_ms.unwrap_or(600_000));
    let lock = g.lock_trace("hot").to_vec();
    let arrival = g.arrival_trace("hot").to_vec();
    let lock_msgs = g
        .network()
        .tap()
        .iter()
        .filter(|m| m.kind.starts_with("lock-"))
        .count();
    let applied: Vec<u64> = g.read_object("hot").map_err(run_err)?.structured["order"]
        .as_array()
        .map(|a| a.iter().filter_map(Value::as_u64).collect())
        .unwrap_or_default();
    let latencies: Vec<u64> = ids
        .iter()
        .filter_map(|id| g.outcome(*id))
        .map(|o| o.finished_at - o.submitted_at)
        .collect();
    let errors = n - latencies.len() as u64;
    report.phases.push(PhaseMetrics::from_samples(
        spec.seed,
        "burst",
        "video.append",
        n as f64 * 1000.0,
        1,
        n,
        errors,
        0,
        latencies,
    ));
    report.value("lock_messages", lock_msgs);
    report.value("messages", g.network().tap().len());
    if spec.wants("fifo-lock-order") {
        report.check(
            "fifo-lock-order",
            lock == arrival && lock == ids && applied == (0..n).collect::<Vec<_>>(),
            format!(
                "{} grants, {} arrivals, {} applied",
                lock.len(),
                arrival.len(),
                applied.len()
            ),
        );
    }
    if spec.wants("no-lock-messages") {
        report.check(
            "no-lock-messages",
            lock_msgs == 0,
            format!("{lock_msgs} lock messages"),
        );
    }
    Ok(())
}

fn crash_once(
    spec: &ScenarioSpec,
    persistence: Persistence,
    point: CrashPoint,
) -> Result<(bool, bool, usize, bool), ScenarioError> {
    let cfg = GridConfig {
        persistence,
        ..warm()
    };
    let sweeper = cfg.sweeper_interval_ms;
    let mut g = cluster(spec, cfg, spec.seed)?;
    g.create_object("video", "v", json!({"revision": 0}))
        .map_err(run_err)?;
    g.seed_blob("v", "mp4", b"old".to_vec()).map_err(run_err)?;
    g.inject_crash(point, 1);
    let _ = g.invoke_sync(
        CallerContext::External,
        "v",
        "rewrite",
        json!({"key": "mp4", "content": "new"}),
    );
    let t = g.now();
    g.run_until(t + 2_500);
    g.run_until_quiescent(600_000);
    let t = g.now();
    g.run_until(t + sweeper + 500);
    let view = g.read_object("v").map_err(run_err)?;
    let blob = view.blobs.get("mp4").cloned().unwrap_or_default();
    let old = view.structured == json!({"revision": 0}) && blob == b"old";
    let new = view.structured == json!({"revision": 1}) && blob == b"new";
    Ok((old, new, g.blob_store().len(), g.orphan_blobs().is_empty()))
}

/// Every crash point of the two-phase update, under both persistence modes.
pub(super) fn failsafe(
    spec: &ScenarioSpec,
    report: &mut MetricsReport,
) -> Result<(), ScenarioError> {
    let mut mixed = Vec::new();
    let mut orphans = Vec::new();
    let mut outcomes = Vec::new();
    for persistence in [Persistence::WriteThrough, Persistence::WriteBehind] {
        for point in CrashPoint::ALL {
            let (old, new, stored, clean) = crash_once(spec, persistence, point)?;
            let label = format!("{persistence:?}/{point:?}");
            if !(old || new) {
                mixed.push(label.clone());
            }
            if !clean || stored != 1 {
                orphans.push(format!("{label}: {stored} blobs"));
            }
            outcomes.push(json!({
                "persistence": format!("{persistence:?}"),
                "point": format!("{point:?}"),
                "state": if new { "new" } else if old { "old" } else { "mixed" },
            }));
        }
    }
    report.value("outcomes", &outcomes);
    if spec.wants("all-or-nothing") {
        report.check(
            "all-or-nothing",
            mixed.is_empty(),
            format!("{} crash runs, mixed: {mixed:?}", outcomes.len()),
        );
    }
    if spec.wants("orphans-purged") {
        report.check(
            "orphans-purged",
            orphans.is_empty(),
            format!("leftovers: {orphans:?}"),
        );
    }
    Ok(())
}

fn compose_oracle(frames: u64, gallery: &Value) -> Result<Value, String> {
    let step =
        |f: fn(&HandlerInput<'_>, &mut dyn crate::faas::BlobGateway) -> Result<_, String>,
         state: &Value,
         args: Value|
         -> Result<Value, String> {
            let input = HandlerInput {
                object_id: "clip",
                function: "",
                structured: state,
                args: &args,
            };
            let out: crate::faas::HandlerOutput = f(&input, &mut NoBlobs)?;
            out.new_object
                .ok_or_else(|| "handler made no object".to_string())
        };
    let a = step(
        split_frames,
        &json!({"name": "clip", "frames": frames}),
        json!({}),
    )?;
    let b = step(detect_faces, &a, json!({}))?;
    step(recognize_faces, &b, json!({ "gallery": gallery }))
}

/// Macro functions: branch overlap, crash/resume and the composed oracle.
pub(super) fn dataflow(
    spec: &ScenarioSpec,
    report: &mut MetricsReport,
) -> Result<(), ScenarioError> {
    let frames = spec.param_u64("frames", 7);
    let gallery = spec
        .params
        .get("gallery")
        .cloned()
        .unwrap_or(json!(["ann", "bob"]));
    let fresh = || -> Result<GridCluster, ScenarioError> {
        let mut g = cluster(spec, GridConfig::default(), spec.seed)?;
        g.create_object("video", "clip", json!({"name": "clip", "frames": frames}))
            .map_err(run_err)?;
        Ok(g)
    };
    let args = json!({ "gallery": gallery });

    // Diamond: b and c depend only on a, d on both.
    let mut g = fresh()?;
    g.invoke_sync(CallerContext::External, "clip", "diamond", json!({}))
        .map_err(run_err)?;
    let trace = g.macro_trace().to_vec();
    let span = |s: &str| {
        trace
            .iter()
            .find(|e| e.step == s)
            .and_then(|e| e.completed_at.map(|c| (e.dispatched_at, c)))
    };
    let overlap = match (span("a"), span("b"), span("c"), span("d")) {
        (Some(a), Some(b), Some(c), Some(d)) => {
            b.0 == c.0 && b.0 < c.1 && c.0 < b.1 && a.1 <= b.0 && b.1 <= d.0 && c.1 <= d.0
        }
        _ => false,
    };
    report.value("diamond_trace", &trace);

    // Oracle: the pipeline against the handlers composed directly.
    let mut clean = fresh()?;
    let out = clean
        .invoke_sync(CallerContext::External, "clip", "faces", args.clone())
        .map_err(run_err)?;
    clean.run_until_quiescent(120_000);
    let made = out.as_str().unwrap_or_default().to_string();
    let got = clean.read_object(&made).map_err(run_err)?.structured;
    let oracle = compose_oracle(frames, &gallery).map_err(ScenarioError::Run)?;

    // Crash the orchestrator after the middle step and resume.
    let mut crashed = fresh()?;
    crashed.crash_orchestrator_after("detect");
    let req = crashed.submit_sync(CallerContext::External, "clip", "faces", args);
    let interrupted = crashed.run_until_done(req).is_err();
    let run = crashed
        .macro_run_of(req)
        .ok_or_else(|| run_err("macro did not start"))?;
    let t = crashed.now();
    crashed.run_until(t + 2_500);
    let resumed = crashed.resume_after_crash(run).map_err(run_err)?;
    let resumed_ok = match resumed {
        Some(r) => crashed.run_until_done(r).is_ok(),
        None => false,
    };
    crashed.run_until_quiescent(120_000);
    let same_inventory = crashed.inventory_json() == clean.inventory_json();

    if spec.wants("concurrent-branches") {
        report.check(
            "concurrent-branches",
            overlap,
            "b and c dispatched together and overlap",
        );
    }
    if spec.wants("oracle") {
        report.check("oracle", got == oracle, format!("macro output {made}"));
    }
    if spec.wants("resume-inventory") {
        report.check(
            "resume-inventory",
            interrupted && resumed_ok && same_inventory,
            format!(
                "interrupted {interrupted}, resumed {resumed_ok}, same inventory {same_inventory}"
            ),
        );
    }
    Ok(())
}
