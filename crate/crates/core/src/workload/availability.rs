use std::collections::BTreeMap;

use super::report::{MetricsReport, PhaseMetrics};
use super::{ScenarioError, ScenarioSpec};
use crate::faas::HandlerRegistry;
use crate::planner::{Planner, PlannerConfig};
use crate::sim::{Fault, FaultKind, Millis, NodeId, SimRng};

/// Half-open down intervals of one node.
fn down_intervals(faults: &[Fault], node: NodeId, horizon: Millis) -> Vec<(Millis, Millis)> {
    let mut out = Vec::new();
    let mut down_since = None;
    for f in faults {
        match f.kind {
            FaultKind::Kill(n) if n == node && down_since.is_none() => down_since = Some(f.at),
            FaultKind::Restart(n) if n == node => {
                if let Some(s) = down_since.take() {
                    out.push((s, f.at.min(horizon)));
                }
            }
            _ => {}
        }
    }
    if let Some(s) = down_since {
        out.push((s, horizon));
    }
    out
}

fn intersect(a: &[(Millis, Millis)], b: &[(Millis, Millis)]) -> Vec<(Millis, Millis)> {
    let (mut i, mut j, mut out) = (0, 0, Vec::new());
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if lo < hi {
            out.push((lo, hi));
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

/// Requests at `floor(i × 1000 / rate)` for `i = 0..` that land in the gaps.
fn failed_requests(gaps: &[(Millis, Millis)], rate: f64, horizon: Millis) -> (u64, u64) {
    let total = (horizon as f64 * rate / 1000.0).ceil() as u64;
    let mut failed = 0;
    let mut g = 0;
    for i in 0..total {
        let t = (i as f64 * 1000.0 / rate) as Millis;
        while g < gaps.len() && gaps[g].1 <= t {
            g += 1;
        }
        if g < gaps.len() && gaps[g].0 <= t {
            failed += 1;
        }
    }
    (total, failed)
}

/// Times the serving replica changed because the previous one failed.
fn promotions(faults: &[Fault], replicas: &[NodeId]) -> u64 {
    let mut up: BTreeMap<NodeId, bool> = replicas.iter().map(|&n| (n, true)).collect();
    let primary = |up: &BTreeMap<NodeId, bool>| replicas.iter().copied().find(|n| up[n]);
    let mut current = primary(&up);
    let mut count = 0;
    for f in faults {
        match f.kind {
            FaultKind::Kill(n) if up.contains_key(&n) => {
                up.insert(n, false);
            }
            FaultKind::Restart(n) if up.contains_key(&n) => {
                up.insert(n, true);
            }
            _ => continue,
        }
        let next = primary(&up);
        if next != current {
            if current.is_some_and(|c| !up[&c]) && next.is_some() {
                count += 1;
            }
            current = next;
        }
    }
    count
}

/// Replicated classes under node failures. A request succeeds when any of
/// its class's replicas is up at arrival; ingress fails over instantly.
pub(super) fn run(spec: &ScenarioSpec, report: &mut MetricsReport) -> Result<(), ScenarioError> {
    let topo = spec.topology()?;
    let classes = spec
        .classes()?
        .ok_or_else(|| ScenarioError::Invalid("availability needs a package".into()))?;
    let chaos = spec
        .chaos
        .clone()
        .ok_or_else(|| ScenarioError::Invalid("availability needs a chaos schedule".into()))?;
    let horizon = spec.until_ms.unwrap_or(5_400_000);
    let rate = spec.workload.first().map_or(200.0, |p| p.rate_rps);

    let mut planner = Planner::new(
        topo.clone(),
        HandlerRegistry::with_builtins(),
        PlannerConfig::default(),
    );
    let mut plans = planner.admit_all(&classes);
    plans.sort_by(|a, b| {
        a.availability_target
            .partial_cmp(&b.availability_target)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
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
    let counts: Vec<u32> = plans.iter().map(|p| p.replica_count).collect();
    report.value("replica_counts", &counts);
    report.resources.replica_count = counts.iter().sum();

    let seeds = spec.seed_list();
    let mut passes: BTreeMap<String, usize> = BTreeMap::new();
    let mut ratios: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut promos: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for &seed in &seeds {
        let faults = chaos
            .expand(&topo, &SimRng::new(seed), horizon)
            .map_err(|e| ScenarioError::Chaos(e.to_string()))?;
        let down: BTreeMap<NodeId, Vec<(Millis, Millis)>> = topo
            .nodes()
            .map(|n| (n, down_intervals(&faults, n, horizon)))
            .collect();
        for plan in &plans {
            let nodes: Vec<NodeId> = plan
                .replicas
                .iter()
                .map(|r| topo.node_id(r).expect("planner places on known nodes"))
                .collect();
            let gaps = nodes[1..]
                .iter()
                .fold(down[&nodes[0]].clone(), |acc, n| intersect(&acc, &down[n]));
            let (total, failed) = failed_requests(&gaps, rate, horizon);
            let target = plan.availability_target.unwrap_or(1.0);
            let budget = 2.0 * (1.0 - target);
            let ratio = failed as f64 / total as f64;
            if ratio <= budget {
                *passes.entry(plan.class.clone()).or_insert(0) += 1;
            }
            ratios.entry(plan.class.clone()).or_default().push(ratio);
            promos
                .entry(plan.class.clone())
                .or_default()
                .push(promotions(&faults, &nodes));
            report.phases.push(PhaseMetrics::from_samples(
                seed,
                "steady",
                &plan.class,
                rate,
                horizon,
                total,
                failed,
                0,
                Vec::new(),
            ));
        }
    }
    report.value("failed_ratio", &ratios);
    report.value("promotions", &promos);
    if spec.wants("replica-counts") {
        let want = spec
            .params
            .get("expected_replicas")
            .and_then(|v| serde_json::from_value::<Vec<u32>>(v.clone()).ok());
        if let Some(want) = want {
            report.check(
                "replica-counts",
                counts == want,
                format!("{counts:?}, expected {want:?}"),
            );
        }
    }
    let quorum = spec.param_f64("seed_fraction", 0.95);
    for plan in &plans {
        let name = format!("within-budget:{}", plan.class);
        if !spec.wants(&name) && !spec.wants("within-budget") {
            continue;
        }
        let ok = passes.get(&plan.class).copied().unwrap_or(0);
        let frac = ok as f64 / seeds.len() as f64;
        let target = plan.availability_target.unwrap_or(1.0);
        let worst = ratios[&plan.class].iter().cloned().fold(0.0, f64::max);
        report.check(
            &name,
            frac >= quorum,
            format!(
                "{ok}/{} seeds within {:.6}, worst {:.7}, {} replicas",
                seeds.len(),
                2.0 * (1.0 - target),
                worst,
                plan.replica_count
            ),
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(at: Millis, kind: FaultKind) -> Fault {
        Fault { at, kind }
    }

    #[test]
    fn intervals_and_intersection() {
        let (a, b) = (NodeId(0), NodeId(1));
        let faults = vec![
            f(10, FaultKind::Kill(a)),
            f(15, FaultKind::Kill(b)),
            f(20, FaultKind::Restart(a)),
            f(30, FaultKind::Restart(b)),
            f(40, FaultKind::Kill(a)),
        ];
        let da = down_intervals(&faults, a, 100);
        assert_eq!(da, vec![(10, 20), (40, 100)]);
        let db = down_intervals(&faults, b, 100);
        assert_eq!(intersect(&da, &db), vec![(15, 20)]);
    }

    #[test]
    fn counting_requests_in_gaps() {
        // 1000 rps: one request per ms.
        assert_eq!(failed_requests(&[(15, 20)], 1000.0, 100), (100, 5));
        assert_eq!(failed_requests(&[], 200.0, 1000), (200, 0));
        // 200 rps: requests at 0, 5, 10, ...; gap [12, 21) holds 15 and 20.
        assert_eq!(failed_requests(&[(12, 21)], 200.0, 1000).1, 2);
    }

    #[test]
    fn promotion_on_primary_failure_only() {
        let (a, b) = (NodeId(0), NodeId(1));
        let faults = vec![
            f(5, FaultKind::Kill(b)),
            f(6, FaultKind::Restart(b)),
            f(10, FaultKind::Kill(a)),
            f(20, FaultKind::Restart(a)),
        ];
        // b's failure is invisible; a's promotes b, and a's return is a
        // switch back, not a promotion.
        assert_eq!(promotions(&faults, &[a, b]), 1);
    }
}
