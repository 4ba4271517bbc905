use std::collections::BTreeSet;

use super::load::{run_load, LoadPhase, PoolTarget};
use super::report::{MetricsReport, PhaseMetrics, StalenessPoint};
use super::{ScenarioError, ScenarioSpec};
use crate::consistency::{
    check, read_lags, CheckKind, ClientOps, ClientSpec, Command, GroupConfig, GroupRun, GroupSim,
    History, OpKind,
};
use crate::faas::{PoolConfig, CHATTY_MS};
use crate::package::Consistency;
use crate::sim::{ChaosEvent, DcId, Fault, Millis, NodeId, SimRng, Topology};

fn keys(n: u64) -> Vec<String> {
    (0..n).map(|i| format!("k{i}")).collect()
}

fn client(name: &str, node: NodeId, stop_ms: Millis, spec: &ScenarioSpec) -> ClientSpec {
    ClientSpec {
        name: name.into(),
        node,
        start_ms: spec.param_u64("clients_start_ms", 1_000),
        think_ms: spec.param_u64("think_ms", 20),
        ops: ClientOps::Random {
            stop_ms,
            write_ratio: spec.param_f64("write_ratio", 0.5),
            keys: keys(spec.param_u64("keys", 4)),
        },
    }
}

/// First node of every datacenter, in datacenter order.
fn one_per_dc(topo: &Topology) -> Vec<NodeId> {
    topo.dc_ids()
        .filter_map(|d| topo.nodes_in(d).next())
        .collect()
}

/// A node of `dc` other than the group member there, so clients go over the
/// local link like real callers.
fn client_node(topo: &Topology, dc: DcId) -> NodeId {
    let mut nodes = topo.nodes_in(dc);
    let first = nodes.next().expect("datacenter has nodes");
    nodes.next().unwrap_or(first)
}

fn faults(
    spec: &ScenarioSpec,
    topo: &Topology,
    seed: u64,
    horizon: Millis,
) -> Result<Vec<Fault>, ScenarioError> {
    match &spec.chaos {
        Some(c) => c
            .expand(topo, &SimRng::new(seed), horizon)
            .map_err(|e| ScenarioError::Chaos(e.to_string())),
        None => Ok(Vec::new()),
    }
}

/// Earliest partition start and the first heal after it.
fn partition_window(spec: &ScenarioSpec) -> Option<(Millis, Millis)> {
    let events = &spec.chaos.as_ref()?.events;
    let start = events
        .iter()
        .filter_map(|e| match e {
            ChaosEvent::PartitionStart { at_ms, .. } => Some(*at_ms),
            _ => None,
        })
        .min()?;
    let heal = events
        .iter()
        .filter_map(|e| match e {
            ChaosEvent::PartitionHeal { at_ms, .. } if *at_ms > start => Some(*at_ms),
            _ => None,
        })
        .max()?;
    Some((start, heal))
}

fn group_err(e: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Run(e.to_string())
}

fn ok_phase(seed: u64, name: &str, target: &str, h: &History, horizon: Millis) -> PhaseMetrics {
    let requests = h.ops.len() as u64;
    let errors = h.ops.iter().filter(|o| !o.ok).count() as u64;
    let timeouts = h
        .ops
        .iter()
        .filter(|o| !o.ok && o.error.as_deref() == Some("no quorum reachable"))
        .count() as u64;
    let lat = h
        .ops
        .iter()
        .filter(|o| o.ok)
        .map(|o| o.ack - o.invoke)
        .collect();
    let secs = horizon as f64 / 1000.0;
    // Closed-loop clients: offered is what they issued.
    PhaseMetrics::from_samples(
        seed,
        name,
        target,
        requests as f64 / secs,
        horizon,
        requests,
        errors,
        timeouts,
        lat,
    )
}

fn push_lags(report: &mut MetricsReport, group: &str, seed: u64, h: &History) {
    let step = report_stride(h.ops.len());
    for (i, (t, lag)) in read_lags(h).into_iter().enumerate() {
        if i % step == 0 || lag > 0 {
            report.staleness.push(StalenessPoint {
                group: group.into(),
                seed,
                time_ms: t,
                staleness_ms: lag,
            });
        }
    }
}

/// Keep the series readable for long runs: every read with a non-zero lag,
/// and a thinned sample of the rest.
fn report_stride(ops: usize) -> usize {
    (ops / 500).max(1)
}

/// Geo-distributed classes through an edge partition: a Strong group, an RYW
/// group and a rate-guaranteed RYW function served at the edge.
pub(super) fn partition(
    spec: &ScenarioSpec,
    report: &mut MetricsReport,
) -> Result<(), ScenarioError> {
    let topo = spec.topology()?;
    let horizon = spec.until_ms.unwrap_or(40_000);
    let (start, heal) =
        partition_window(spec).ok_or_else(|| ScenarioError::Invalid("needs a partition".into()))?;
    let members = one_per_dc(&topo);
    let edge = client_node(&topo, DcId(0));
    let cloud = client_node(&topo, DcId(1));
    let delta = spec.param_u64("delta_ms", 10_000);
    let interval = spec.param_u64("ryw_ae_interval_ms", 2_500);
    let bound = delta.div_ceil(interval) + 1;

    let mut strong_ok = Vec::new();
    let mut zero_commits = Vec::new();
    let mut ryw_ok = Vec::new();
    let mut converged = Vec::new();
    for seed in spec.seed_list() {
        let f = faults(spec, &topo, seed, horizon)?;
        let cfg = GroupConfig::new(Consistency::Strong, members.clone());
        let clients = vec![
            client("edge", edge, horizon, spec),
            client("cloud", cloud, horizon, spec),
        ];
        let strong = GroupSim::new(topo.clone(), cfg, clients, &f, seed)
            .map_err(group_err)?
            .run(horizon);
        let v = check(&strong.history, CheckKind::LinearizableLite);
        strong_ok.push((
            seed,
            v.passed && strong.audit.violations.is_empty(),
            v.counterexample,
        ));
        let edge_writes = |a, b| {
            strong
                .history
                .acked_in(a, b, |o| o.client == "edge" && o.op == OpKind::Write)
        };
        let (before, during, after) = (
            edge_writes(0, start),
            edge_writes(start, heal),
            edge_writes(heal, horizon),
        );
        zero_commits.push((seed, before, during, after));
        report
            .phases
            .push(ok_phase(seed, "strong", "Ledger", &strong.history, horizon));

        let mut cfg = GroupConfig::new(Consistency::ReadYourWrites, members.clone());
        cfg.ae_interval_ms = interval;
        let clients = vec![
            client("edge", edge, horizon, spec),
            client("cloud", cloud, horizon, spec),
        ];
        let ryw = GroupSim::new(topo.clone(), cfg, clients, &f, seed)
            .map_err(group_err)?
            .run(horizon);
        let v = check(&ryw.history, CheckKind::Ryw);
        ryw_ok.push((seed, v.passed, v.counterexample));
        converged.push((seed, ryw.stats.convergence_rounds.clone()));
        report
            .phases
            .push(ok_phase(seed, "ryw", "Session", &ryw.history, horizon));
        push_lags(report, "Session", seed, &ryw.history);
        report
            .histories
            .insert(format!("strong-{seed}"), strong.history);
        report.histories.insert(format!("ryw-{seed}"), ryw.history);
    }

    // The rate-guaranteed class is served from its edge replica; the
    // partition cuts it off from the clouds, not from its clients.
    let rate = spec
        .workload
        .iter()
        .find(|p| p.target == "Feed.post")
        .map_or(4_000.0, |p| p.rate_rps);
    let mut target = PoolTarget::new("Feed.post", CHATTY_MS as f64, PoolConfig::default());
    target.provision_rps = Some(rate);
    let load = run_load(
        &[target],
        &[LoadPhase {
            name: "feed".into(),
            target: 0,
            rate_rps: rate,
            start_ms: 0,
            duration_ms: horizon,
        }],
        spec.seed,
        1_000,
    );
    report.phases.extend(load.phases.iter().cloned());
    report.resources.container_seconds += load.container_seconds();
    let from = start + 1_000;
    let windows: Vec<(Millis, u64)> = load.windows[0]
        .range(from..heal)
        .filter(|(w, _)| *w + 1_000 <= heal)
        .map(|(w, c)| (*w, *c))
        .collect();
    let floor = windows.iter().map(|w| w.1).min().unwrap_or(0);
    report.value("feed_windows_during_partition", &windows);
    report.value("strong_edge_writes", &zero_commits);
    report.value("convergence_rounds", &converged);

    if spec.wants("strong-linearizable") {
        let bad: Vec<_> = strong_ok.iter().filter(|s| !s.1).collect();
        report.check(
            "strong-linearizable",
            bad.is_empty(),
            format!("failing: {bad:?}"),
        );
    }
    if spec.wants("strong-zero-commits-while-partitioned") {
        let ok = zero_commits
            .iter()
            .all(|&(_, b, d, a)| b > 0 && d == 0 && a > 0);
        report.check(
            "strong-zero-commits-while-partitioned",
            ok,
            format!("edge writes (before, during, after) per seed: {zero_commits:?}"),
        );
    }
    if spec.wants("ryw") {
        let bad: Vec<_> = ryw_ok.iter().filter(|s| !s.1).collect();
        report.check("ryw", bad.is_empty(), format!("failing: {bad:?}"));
    }
    if spec.wants("ryw-convergence") {
        let ok = converged
            .iter()
            .all(|(_, r)| !r.is_empty() && r.iter().all(|&x| x <= bound));
        report.check(
            "ryw-convergence",
            ok,
            format!("rounds {converged:?}, bound {bound}"),
        );
    }
    if spec.wants("feed-rate-holds") {
        let need = (0.99 * rate).ceil() as u64;
        report.check(
            "feed-rate-holds",
            !windows.is_empty() && floor >= need,
            format!(
                "min {floor} per second over {} windows, need {need}",
                windows.len()
            ),
        );
    }
    Ok(())
}

/// Bounded staleness through a long edge partition.
pub(super) fn staleness(
    spec: &ScenarioSpec,
    report: &mut MetricsReport,
) -> Result<(), ScenarioError> {
    let topo = spec.topology()?;
    let horizon = spec.until_ms.unwrap_or(60_000);
    let delta = spec.param_u64("delta_ms", 10_000);
    let (start, _) =
        partition_window(spec).ok_or_else(|| ScenarioError::Invalid("needs a partition".into()))?;
    let members = one_per_dc(&topo);
    let edge_member = members[0];
    let edge = client_node(&topo, DcId(0));
    let cloud = client_node(&topo, DcId(1));
    let mut worst = Vec::new();
    let mut blocks = Vec::new();
    let mut interval = 0;
    for seed in spec.seed_list() {
        let f = faults(spec, &topo, seed, horizon)?;
        let cfg = GroupConfig::new(
            Consistency::BoundedStaleness { delta_ms: delta },
            members.clone(),
        );
        interval = cfg.ae_interval_ms;
        let clients = vec![
            client("edge", edge, horizon, spec),
            client("cloud", cloud, horizon, spec),
        ];
        let run: GroupRun = GroupSim::new(topo.clone(), cfg, clients, &f, seed)
            .map_err(group_err)?
            .run(horizon);
        let v = check(&run.history, CheckKind::Staleness { delta_ms: delta });
        worst.push((seed, v.max_staleness_ms.unwrap_or(0), v.passed));
        let blocked_writes = run
            .history
            .ops
            .iter()
            .filter(|o| {
                o.client == "edge"
                    && o.op == OpKind::Write
                    && o.error.as_deref() == Some("staleness window exceeded")
            })
            .count();
        blocks.push((
            seed,
            run.stats.first_block.get(&edge_member).copied(),
            blocked_writes,
        ));
        report
            .phases
            .push(ok_phase(seed, "bounded", "group", &run.history, horizon));
        push_lags(report, "bounded", seed, &run.history);
        report
            .histories
            .insert(format!("bounded-{seed}"), run.history);
    }
    report.value("max_staleness_ms", &worst);
    report.value("first_block", &blocks);
    if spec.wants("staleness-below-delta") {
        let ok = worst.iter().all(|&(_, w, p)| p && w < delta);
        report.check(
            "staleness-below-delta",
            ok,
            format!("(seed, max ms, pass): {worst:?}, delta {delta}"),
        );
    }
    if spec.wants("blocks-after-delta") {
        let lo = start + delta - interval;
        let hi = start + delta + spec.param_u64("block_slack_ms", 20);
        let ok = blocks
            .iter()
            .all(|&(_, b, w)| b.is_some_and(|b| (lo..=hi).contains(&b)) && w > 0);
        report.check(
            "blocks-after-delta",
            ok,
            format!("(seed, first block, blocked writes): {blocks:?}, window [{lo}, {hi}]"),
        );
    }
    Ok(())
}

/// Strong groups with a leader killed mid-run, across seeds.
pub(super) fn strong(spec: &ScenarioSpec, report: &mut MetricsReport) -> Result<(), ScenarioError> {
    let topo = spec.topology()?;
    let horizon = spec.until_ms.unwrap_or(10_000);
    let members = one_per_dc(&topo);
    let kill_at = spec.param_u64("kill_at_ms", 3_000);
    let down = spec.param_u64("down_ms", 2_000);
    let mut results = Vec::new();
    for seed in spec.seed_list() {
        let f = faults(spec, &topo, seed, horizon)?;
        let cfg = GroupConfig::new(Consistency::Strong, members.clone());
        let clients: Vec<ClientSpec> = topo
            .dc_ids()
            .enumerate()
            .map(|(i, d)| {
                client(
                    &format!("c{i}"),
                    client_node(&topo, d),
                    horizon - 1_000,
                    spec,
                )
            })
            .collect();
        let mut sim = GroupSim::new(topo.clone(), cfg, clients, &f, seed).map_err(group_err)?;
        if kill_at > 0 {
            sim.kill_leader_at(kill_at, down);
        }
        let run = sim.run(horizon);
        let v = check(&run.history, CheckKind::LinearizableLite);
        let acked = run.history.ops.iter().filter(|o| o.ok).count();
        results.push((
            seed,
            v.passed && run.audit.violations.is_empty(),
            acked,
            v.counterexample,
        ));
        report
            .phases
            .push(ok_phase(seed, "strong", "group", &run.history, horizon));
        report
            .histories
            .insert(format!("strong-{seed}"), run.history);
    }
    report.value(
        "acked_ops",
        results.iter().map(|r| (r.0, r.2)).collect::<Vec<_>>(),
    );
    if spec.wants("linearizable") {
        let bad: Vec<_> = results.iter().filter(|r| !r.1 || r.2 == 0).collect();
        report.check(
            "linearizable",
            bad.is_empty(),
            format!("{} seeds, failing: {bad:?}", results.len()),
        );
    }
    Ok(())
}

/// Randomized leader-kill schedules; checks election and log safety.
pub(super) fn raft(spec: &ScenarioSpec, report: &mut MetricsReport) -> Result<(), ScenarioError> {
    let topo = spec.topology()?;
    let horizon = spec.until_ms.unwrap_or(12_000);
    let members = one_per_dc(&topo);
    let kills = spec.param_u64("kills", 3);
    let mut leaders_bad = Vec::new();
    let mut lost = Vec::new();
    let mut other = Vec::new();
    let mut elections = Vec::new();
    for seed in spec.seed_list() {
        let cfg = GroupConfig::new(Consistency::Strong, members.clone());
        let clients: Vec<ClientSpec> = topo
            .dc_ids()
            .enumerate()
            .map(|(i, d)| {
                client(
                    &format!("c{i}"),
                    client_node(&topo, d),
                    horizon - 2_000,
                    spec,
                )
            })
            .collect();
        let mut sim = GroupSim::new(topo.clone(), cfg, clients, &[], seed).map_err(group_err)?;
        let mut rng = SimRng::new(seed).fork("leader-kills");
        let mut at = 1_000;
        for _ in 0..kills {
            at += rng.range_inclusive(1_000, 3_000);
            let down = rng.range_inclusive(200, 2_500);
            sim.kill_leader_at(at, down);
        }
        let run = sim.run(horizon);
        elections.push((seed, run.audit.elections.len()));
        let (term_issues, rest): (Vec<String>, Vec<String>) = run
            .audit
            .violations
            .iter()
            .cloned()
            .partition(|v| v.contains("leaders"));
        if !term_issues.is_empty() {
            leaders_bad.push((seed, term_issues));
        }
        if !rest.is_empty() {
            other.push((seed, rest));
        }
        let committed: BTreeSet<(&str, String)> = run
            .audit
            .committed
            .values()
            .filter_map(|(_, c)| match c {
                Command::Put { key, value, .. } => Some((key.as_str(), value.to_string())),
                Command::Noop => None,
            })
            .collect();
        let missing = run
            .history
            .ops
            .iter()
            .filter(|o| {
                o.ok && o.op == OpKind::Write
                    && !committed.contains(&(o.key.as_str(), o.value.to_string()))
            })
            .count();
        if missing > 0 {
            lost.push((seed, missing));
        }
        report
            .phases
            .push(ok_phase(seed, "raft", "group", &run.history, horizon));
    }
    report.value("elections", &elections);
    if spec.wants("single-leader-per-term") {
        report.check(
            "single-leader-per-term",
            leaders_bad.is_empty(),
            format!("{leaders_bad:?}"),
        );
    }
    if spec.wants("no-committed-loss") {
        let ok = lost.is_empty() && other.is_empty();
        report.check(
            "no-committed-loss",
            ok,
            format!("acked writes missing from the log: {lost:?}; log violations: {other:?}"),
        );
    }
    Ok(())
}
