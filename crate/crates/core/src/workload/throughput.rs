use std::collections::BTreeMap;

use super::load::{refine_pods, run_load, LoadPhase, LoadResult, PoolTarget};
use super::report::MetricsReport;
use super::{ScenarioError, ScenarioSpec, WorkloadPhase};
use crate::faas::{HandlerRegistry, PoolConfig, CHATTY_MS};
use crate::package::ResolvedClassSet;
use crate::planner::{DeploymentPlan, Planner, PlannerConfig};
use crate::sim::Millis;

struct Bound {
    targets: Vec<PoolTarget>,
    /// Guaranteed rate per target, from the class SLA.
    rates: Vec<Option<f64>>,
    index: BTreeMap<String, usize>,
}

fn pool_cfg(spec: &ScenarioSpec) -> PoolConfig {
    let d = PoolConfig::default();
    PoolConfig {
        deadline_ms: spec.param_u64("deadline_ms", d.deadline_ms),
        cold_start_ms: spec.param_u64("cold_start_ms", d.cold_start_ms),
        max_containers: spec.param_u64("max_containers", d.max_containers as u64) as u32,
        ..d
    }
}

/// Shared-backend slowdown per extra container, known to both the load
/// model and the planner.
fn contention(spec: &ScenarioSpec) -> f64 {
    spec.param_f64("contention", 0.0)
}

fn bind(
    spec: &ScenarioSpec,
    classes: &ResolvedClassSet,
    targets: &[&str],
) -> Result<Bound, ScenarioError> {
    let handlers = HandlerRegistry::with_builtins();
    let cfg = pool_cfg(spec);
    let mut out = Bound {
        targets: Vec::new(),
        rates: Vec::new(),
        index: BTreeMap::new(),
    };
    for t in targets {
        if out.index.contains_key(*t) {
            continue;
        }
        let (class, function) = t
            .split_once('.')
            .ok_or_else(|| ScenarioError::Invalid(format!("target `{t}` is not Class.function")))?;
        let f = classes
            .class(class)
            .and_then(|c| c.function(function))
            .ok_or_else(|| ScenarioError::Invalid(format!("target `{t}` does not exist")))?;
        let service = f
            .handler
            .as_deref()
            .and_then(|h| handlers.get(h))
            .map_or(CHATTY_MS as f64, |h| h.service.nominal_ms());
        out.index.insert(t.to_string(), out.targets.len());
        let mut target = PoolTarget::new(t, service, cfg.clone());
        target.contention = contention(spec);
        out.targets.push(target);
        out.rates.push(f.sla.throughput_rps.map(f64::from));
    }
    Ok(out)
}

/// Phases sharing a name run together; names run one after another in order
/// of first appearance.
fn schedule(
    phases: &[WorkloadPhase],
    index: &BTreeMap<String, usize>,
    prefix: &str,
    offset: Millis,
) -> Vec<LoadPhase> {
    let mut order: Vec<&str> = Vec::new();
    for p in phases {
        if !order.contains(&p.phase.as_str()) {
            order.push(&p.phase);
        }
    }
    let mut start = offset;
    let mut out = Vec::new();
    for name in order {
        let group: Vec<&WorkloadPhase> = phases.iter().filter(|p| p.phase == name).collect();
        for p in &group {
            out.push(LoadPhase {
                name: format!("{prefix}{name}"),
                target: index[&p.target],
                rate_rps: p.rate_rps,
                start_ms: start,
                duration_ms: p.duration_ms,
            });
        }
        start += group.iter().map(|p| p.duration_ms).max().unwrap_or(0);
    }
    out
}

fn admit(
    spec: &ScenarioSpec,
    classes: &ResolvedClassSet,
) -> Result<Vec<DeploymentPlan>, ScenarioError> {
    let topo = spec.topology()?;
    let cfg = PlannerConfig {
        pool: pool_cfg(spec),
        contention: contention(spec),
        ..PlannerConfig::default()
    };
    let mut planner = Planner::new(topo, HandlerRegistry::with_builtins(), cfg);
    let plans = planner.admit_all(classes);
    if let Some(bad) = plans.iter().find(|p| !p.accepted) {
        let why = bad
            .rejection
            .as_ref()
            .map(|r| r.message.clone())
            .unwrap_or_default();
        return Err(ScenarioError::Admission(format!(
            "class {}: {why}",
            bad.class
        )));
    }
    Ok(plans)
}

fn targets_of(spec: &ScenarioSpec) -> Vec<&str> {
    spec.workload.iter().map(|p| p.target.as_str()).collect()
}

fn need_classes(spec: &ScenarioSpec) -> Result<ResolvedClassSet, ScenarioError> {
    spec.classes()?
        .ok_or_else(|| ScenarioError::Invalid("this driver needs a package".into()))
}

fn record(report: &mut MetricsReport, r: &LoadResult) {
    report.phases.extend(r.phases.iter().cloned());
    report.resources.container_seconds += r.container_seconds();
    let peak = r.pools.iter().map(|p| p.peak_containers).max().unwrap_or(0);
    report.resources.peak_containers = report.resources.peak_containers.max(peak);
}

/// Plain load run; rate-guaranteed functions get their warm floor.
pub(super) fn run_plain(
    spec: &ScenarioSpec,
    report: &mut MetricsReport,
) -> Result<(), ScenarioError> {
    if spec.workload.is_empty() {
        return Ok(());
    }
    let classes = need_classes(spec)?;
    admit(spec, &classes)?;
    let mut b = bind(spec, &classes, &targets_of(spec))?;
    for (t, r) in b.targets.iter_mut().zip(&b.rates) {
        t.provision_rps = *r;
    }
    let phases = schedule(&spec.workload, &b.index, "", 0);
    let r = run_load(&b.targets, &phases, spec.seed, 1000);
    record(report, &r);
    if spec.wants("no-timeouts") {
        let n = r.timeouts();
        report.check("no-timeouts", n == 0, format!("{n} timeouts"));
    }
    Ok(())
}

/// Rate guarantees against a purely reactive pool. The guaranteed run offers
/// each function its declared rate; the baseline starts cold at a tenth of
/// it and then bursts to the full rate.
pub(super) fn run(spec: &ScenarioSpec, report: &mut MetricsReport) -> Result<(), ScenarioError> {
    let classes = need_classes(spec)?;
    let plans = admit(spec, &classes)?;
    let prewarm: BTreeMap<String, u32> = plans
        .iter()
        .flat_map(|p| {
            p.prewarm
                .iter()
                .map(move |(f, c)| (format!("{}.{f}", p.class), *c))
        })
        .collect();
    report.value("prewarm", &prewarm);

    let mut b = bind(spec, &classes, &targets_of(spec))?;
    for (t, r) in b.targets.iter_mut().zip(&b.rates) {
        t.provision_rps = *r;
    }
    let guaranteed = run_load(
        &b.targets,
        &schedule(&spec.workload, &b.index, "guaranteed/", 0),
        spec.seed,
        1000,
    );
    record(report, &guaranteed);

    let factor = spec.param_f64("burst_factor", 10.0);
    let base_ms = spec.param_u64("base_ms", 60_000);
    let mut baseline_phases = Vec::new();
    for p in &spec.workload {
        baseline_phases.push(WorkloadPhase {
            phase: "base".into(),
            rate_rps: p.rate_rps / factor,
            duration_ms: base_ms,
            ..p.clone()
        });
    }
    for p in &spec.workload {
        baseline_phases.push(WorkloadPhase {
            phase: "burst".into(),
            ..p.clone()
        });
    }
    for t in b.targets.iter_mut() {
        t.provision_rps = None;
    }
    let baseline = run_load(
        &b.targets,
        &schedule(&baseline_phases, &b.index, "reactive/", 0),
        spec.seed,
        1000,
    );
    record(report, &baseline);

    let g = guaranteed.timeouts();
    let r = baseline.timeouts();
    report.value("guaranteed_timeouts", g);
    report.value("reactive_timeouts", r);
    if spec.wants("guaranteed-no-timeouts") {
        report.check(
            "guaranteed-no-timeouts",
            g == 0,
            format!("{g} timeouts at the declared rates"),
        );
    }
    if spec.wants("reactive-burst-times-out") {
        report.check(
            "reactive-burst-times-out",
            r > 0,
            format!("{r} timeouts under a {factor}x burst without a warm floor"),
        );
    }
    Ok(())
}

/// Manual pod-count refinement against the planner's one-shot sizing.
pub(super) fn run_refinement(
    spec: &ScenarioSpec,
    report: &mut MetricsReport,
) -> Result<(), ScenarioError> {
    let classes = need_classes(spec)?;
    let phase = spec
        .workload
        .first()
        .ok_or_else(|| ScenarioError::Invalid("refinement needs one workload phase".into()))?;
    let b = bind(spec, &classes, &[phase.target.as_str()])?;
    let rounds = spec.param_u64("max_rounds", 10) as usize;

    let (steps, converged) = refine_pods(&b.targets[0], phase.rate_rps, phase.duration_ms, rounds);
    let sizes: Vec<u32> = steps.iter().map(|s| s.0).collect();
    report.value("baseline_pods", &sizes);
    report.value("baseline_converged", converged);
    report.value(
        "baseline_observed_rps",
        steps.iter().map(|s| s.1).collect::<Vec<f64>>(),
    );
    // Load tests that led to a resize; the last test only confirms.
    let iterations = sizes.len().saturating_sub(1);
    report.value("baseline_iterations", iterations);

    let plans = admit(spec, &classes)?;
    let (class, function) = phase.target.split_once('.').expect("bound above");
    let pods = plans
        .iter()
        .find(|p| p.class == class)
        .and_then(|p| p.prewarm.get(function).copied())
        .unwrap_or(0);
    report.value("planned_pods", pods);
    let mut planned = b.targets[0].clone();
    planned.fixed_pods = Some(pods);
    let lp = LoadPhase {
        name: "planned".into(),
        target: 0,
        rate_rps: phase.rate_rps,
        start_ms: 0,
        duration_ms: phase.duration_ms,
    };
    let r = run_load(&[planned], &[lp], spec.seed, 1000);
    record(report, &r);
    let t = r.timeouts();
    if spec.wants("baseline-needs-three-rounds") {
        report.check(
            "baseline-needs-three-rounds",
            converged && iterations >= 3,
            format!("pods {sizes:?}"),
        );
    }
    if spec.wants("plan-one-step") {
        report.check(
            "plan-one-step",
            pods > 0 && t == 0,
            format!("{pods} pods, {t} timeouts"),
        );
    }
    Ok(())
}
