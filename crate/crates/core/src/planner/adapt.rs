use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::DeploymentPlan;
use crate::package::Consistency;
use crate::sim::Millis;

/// Missed-heartbeat window after which a node counts as down.
pub const DETECTION_MS: Millis = 150;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FunctionSample {
    pub rate: f64,
    pub error_ratio: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MonitorSample {
    pub time: Millis,
    pub functions: BTreeMap<String, FunctionSample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub staleness_max_ms: Option<Millis>,
    /// Liveness as seen by the monitor, by node name.
    pub node_up: BTreeMap<String, bool>,
    /// Datacenters the ingress cannot reach.
    #[serde(default)]
    pub unreachable_dcs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum Action {
    PromoteBackup { from: String, to: String },
    ScalePrewarm { function: String, containers: u32 },
    Redirect { to_datacenter: String },
    RestoreRouting,
}

/// Corrective control loop for one deployed plan.
#[derive(Debug, Clone)]
pub struct Adapter {
    plan: DeploymentPlan,
    /// Datacenter of every replica host, in plan order.
    replica_dcs: BTreeMap<String, String>,
    primary: usize,
    over_budget: BTreeMap<String, u32>,
    redirected: bool,
    last_time: Option<Millis>,
    /// Error ratio tolerated before scaling.
    pub error_budget: f64,
    /// Consecutive samples over budget that trigger a scale step.
    pub sustain: u32,
}

impl Adapter {
    pub fn new(plan: DeploymentPlan) -> Self {
        let replica_dcs = plan
            .placements
            .iter()
            .flat_map(|p| {
                p.nodes
                    .iter()
                    .map(move |n| (n.clone(), p.datacenter.clone()))
            })
            .collect();
        Self {
            plan,
            replica_dcs,
            primary: 0,
            over_budget: BTreeMap::new(),
            redirected: false,
            last_time: None,
            error_budget: 0.01,
            sustain: 3,
        }
    }

    pub fn plan(&self) -> &DeploymentPlan {
        &self.plan
    }

    pub fn primary(&self) -> Option<&str> {
        self.plan.replicas.get(self.primary).map(String::as_str)
    }

    pub fn adapt(&mut self, s: &MonitorSample) -> Vec<Action> {
        if self.last_time.is_some_and(|t| s.time < t) {
            return Vec::new();
        }
        self.last_time = Some(s.time);
        let mut out = Vec::new();

        let up = |n: &str| s.node_up.get(n).copied().unwrap_or(true);
        if let Some(p) = self.primary().map(String::from) {
            if !up(&p) {
                let next = (1..self.plan.replicas.len())
                    .map(|k| (self.primary + k) % self.plan.replicas.len())
                    .find(|&i| up(&self.plan.replicas[i]));
                if let Some(i) = next {
                    self.primary = i;
                    out.push(Action::PromoteBackup {
                        from: p,
                        to: self.plan.replicas[i].clone(),
                    });
                }
            }
        }

        for (f, sample) in &s.functions {
            let Some(&floor) = self.plan.prewarm.get(f) else {
                continue;
            };
            let c = self.over_budget.entry(f.clone()).or_insert(0);
            if sample.error_ratio > self.error_budget {
                *c += 1;
            } else {
                *c = 0;
            }
            if *c >= self.sustain {
                *c = 0;
                self.plan.prewarm.insert(f.clone(), floor + 1);
                out.push(Action::ScalePrewarm {
                    function: f.clone(),
                    containers: floor + 1,
                });
            }
        }

        let primary_dc = self
            .primary()
            .and_then(|p| self.replica_dcs.get(p))
            .cloned();
        let cut_off = primary_dc
            .as_ref()
            .is_some_and(|d| s.unreachable_dcs.contains(d));
        if cut_off && !self.redirected && self.plan.consistency != Some(Consistency::Strong) {
            let target = self
                .plan
                .replicas
                .iter()
                .filter_map(|r| self.replica_dcs.get(r))
                .find(|d| !s.unreachable_dcs.contains(d));
            if let Some(d) = target {
                self.redirected = true;
                out.push(Action::Redirect {
                    to_datacenter: d.clone(),
                });
            }
        } else if self.redirected && s.unreachable_dcs.is_empty() {
            self.redirected = false;
            out.push(Action::RestoreRouting);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::Placement;

    fn plan(consistency: Option<Consistency>) -> DeploymentPlan {
        DeploymentPlan {
            package: "p".into(),
            class: "c".into(),
            template: "ltag".into(),
            accepted: true,
            rejection: None,
            replica_count: 3,
            stability: 0.9436,
            availability_target: Some(0.999),
            expected_availability: 0.9998,
            placements: vec![
                Placement {
                    datacenter: "cloud-1".into(),
                    nodes: vec!["a".into(), "c".into()],
                },
                Placement {
                    datacenter: "edge-1".into(),
                    nodes: vec!["b".into()],
                },
            ],
            replicas: vec!["a".into(), "b".into(), "c".into()],
            consistency,
            pinned_node: None,
            prewarm: BTreeMap::from([("f".to_string(), 2)]),
            vcpu: 2,
        }
    }

    fn sample(time: Millis) -> MonitorSample {
        MonitorSample {
            time,
            ..MonitorSample::default()
        }
    }

    #[test]
    fn healthy_stream_needs_nothing() {
        let mut a = Adapter::new(plan(None));
        for t in 0..10 {
            assert!(a.adapt(&sample(t * 1000)).is_empty());
        }
    }

    #[test]
    fn dead_primary_is_replaced() {
        let mut a = Adapter::new(plan(None));
        let mut s = sample(0);
        s.node_up.insert("a".into(), false);
        s.node_up.insert("b".into(), false);
        assert_eq!(
            a.adapt(&s),
            vec![Action::PromoteBackup {
                from: "a".into(),
                to: "c".into()
            }]
        );
        assert_eq!(a.primary(), Some("c"));
    }

    #[test]
    fn sustained_errors_scale_up_only() {
        let mut a = Adapter::new(plan(None));
        let mut s = sample(0);
        s.functions.insert(
            "f".into(),
            FunctionSample {
                error_ratio: 0.2,
                ..FunctionSample::default()
            },
        );
        let mut actions = Vec::new();
        for t in 0..6 {
            s.time = t;
            actions.extend(a.adapt(&s));
        }
        assert_eq!(actions.len(), 2);
        assert_eq!(a.plan().prewarm["f"], 4);
    }

    #[test]
    fn partition_redirects_unless_strong() {
        let mut s = sample(0);
        s.unreachable_dcs = vec!["cloud-1".into()];
        let mut a = Adapter::new(plan(Some(Consistency::ReadYourWrites)));
        assert_eq!(
            a.adapt(&s),
            vec![Action::Redirect {
                to_datacenter: "edge-1".into()
            }]
        );
        assert!(a.adapt(&sample(1)).contains(&Action::RestoreRouting));
        let mut strong = Adapter::new(plan(Some(Consistency::Strong)));
        assert!(strong.adapt(&s).is_empty());
    }
}
