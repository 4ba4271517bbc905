use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{availability_of, replicas_for, PlannerError};
use crate::faas::{warm_containers_under_contention, HandlerRegistry, PoolConfig, CHATTY_MS};
use crate::package::{Consistency, FunctionKind, Locality, ResolvedClass, ResolvedClassSet};
use crate::sim::Topology;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub pool: PoolConfig,
    /// Place several replicas in one datacenter when there are fewer
    /// datacenters than replicas.
    pub allow_node_fallback: bool,
    /// Per-container slowdown of a shared backend, as profiled; 0 for none.
    pub contention: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            pool: PoolConfig::default(),
            allow_node_fallback: true,
            contention: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub datacenter: String,
    pub nodes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectionCode {
    InfeasibleTarget,
    InsufficientDatacenters,
    InsufficientNodes,
    UnknownDatacenter,
    CapacityExceeded,
}

/// Machine-readable reason plus the smallest change that would fix it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub code: RejectionCode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deficit: Option<f64>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub package: String,
    pub class: String,
    pub template: String,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection: Option<Rejection>,
    pub replica_count: u32,
    /// Host stability used for the replica count.
    pub stability: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub availability_target: Option<f64>,
    pub expected_availability: f64,
    pub placements: Vec<Placement>,
    /// Replica hosts in promotion order; the first is the primary.
    pub replicas: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency: Option<Consistency>,
    /// Node that runs every function when locality is `Local`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pinned_node: Option<String>,
    /// Warm containers per rate-guaranteed function.
    pub prewarm: BTreeMap<String, u32>,
    pub vcpu: u64,
}

impl DeploymentPlan {
    fn new(class: &ResolvedClass, template: &str) -> Self {
        Self {
            package: class.package.clone(),
            class: class.name.clone(),
            template: template.to_string(),
            accepted: false,
            rejection: None,
            replica_count: 1,
            stability: 0.0,
            availability_target: class.sla.availability,
            expected_availability: 0.0,
            placements: Vec::new(),
            replicas: Vec::new(),
            consistency: class.sla.consistency,
            pinned_node: None,
            prewarm: BTreeMap::new(),
            vcpu: 0,
        }
    }

    fn reject(mut self, code: RejectionCode, deficit: Option<f64>, message: String) -> Self {
        self.accepted = false;
        self.rejection = Some(Rejection {
            code,
            deficit,
            message,
        });
        self
    }

    pub fn primary(&self) -> Option<&str> {
        self.replicas.first().map(String::as_str)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("plan serializes")
    }
}

/// A class runtime template: decides whether it can host a class.
pub trait RuntimeTemplate: fmt::Debug {
    fn name(&self) -> &str;
    fn applies_to(&self, class: &ResolvedClass) -> bool;
}

/// The latency, throughput and availability template; hosts every class.
#[derive(Debug)]
struct Ltag;

impl RuntimeTemplate for Ltag {
    fn name(&self) -> &str {
        "ltag"
    }

    fn applies_to(&self, _: &ResolvedClass) -> bool {
        true
    }
}

/// Templates in priority order; the first that applies wins.
#[derive(Debug)]
pub struct TemplateRegistry {
    templates: Vec<Box<dyn RuntimeTemplate>>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        Self {
            templates: vec![Box::new(Ltag)],
        }
    }
}

impl TemplateRegistry {
    /// Adds a template ahead of the existing ones.
    pub fn register(&mut self, t: Box<dyn RuntimeTemplate>) {
        self.templates.insert(0, t);
    }

    pub fn select(&self, class: &ResolvedClass) -> &dyn RuntimeTemplate {
        self.templates
            .iter()
            .find(|t| t.applies_to(class))
            .map(|t| t.as_ref())
            .expect("the default template applies to every class")
    }
}

/// Turns class SLAs into deployment plans against one topology.
#[derive(Debug)]
pub struct Planner {
    topology: Topology,
    handlers: HandlerRegistry,
    cfg: PlannerConfig,
    templates: TemplateRegistry,
    cursor: usize,
    reserved_vcpu: u64,
}

impl Planner {
    pub fn new(topology: Topology, handlers: HandlerRegistry, cfg: PlannerConfig) -> Self {
        Self {
            topology,
            handlers,
            cfg,
            templates: TemplateRegistry::default(),
            cursor: 0,
            reserved_vcpu: 0,
        }
    }

    pub fn templates_mut(&mut self) -> &mut TemplateRegistry {
        &mut self.templates
    }

    pub fn reserved_vcpu(&self) -> u64 {
        self.reserved_vcpu
    }

    /// Datacenter order for a class: preferred ones first, the rest
    /// round-robin from the cursor.
    fn dc_order(&self, locality: Option<&Locality>) -> Result<Vec<usize>, PlannerError> {
        let dcs = self.topology.datacenters();
        let mut order = Vec::new();
        if let Some(Locality::Preferred(names)) = locality {
            for n in names {
                let i = dcs
                    .iter()
                    .position(|d| &d.name == n)
                    .ok_or_else(|| PlannerError::UnknownDatacenter(n.clone()))?;
                if !order.contains(&i) {
                    order.push(i);
                }
            }
        }
        for k in 0..dcs.len() {
            let i = (self.cursor + k) % dcs.len();
            if !order.contains(&i) {
                order.push(i);
            }
        }
        Ok(order)
    }

    fn stability(&self, order: &[usize]) -> f64 {
        let dcs = self.topology.datacenters();
        order.iter().map(|&i| dcs[i].stability).fold(1.0, f64::min)
    }

    /// Assigns `n` replicas to datacenters, one per datacenter before any
    /// datacenter gets a second. Returns placements and the replica hosts in
    /// promotion order.
    pub fn place(
        &mut self,
        locality: Option<&Locality>,
        n: u32,
    ) -> Result<(Vec<Placement>, Vec<String>), PlannerError> {
        let order = self.dc_order(locality)?;
        let k = order.len() as u32;
        if n > k && !self.cfg.allow_node_fallback {
            return Err(PlannerError::InsufficientDatacenters {
                needed: n,
                available: k,
            });
        }
        let dcs = self.topology.datacenters();
        let mut by_dc: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        let mut replicas = Vec::new();
        for i in 0..n {
            let dc = order[(i % k) as usize];
            let slot = (i / k) as usize;
            let nodes = &dcs[dc].nodes;
            let Some(node) = nodes.get(slot) else {
                return Err(PlannerError::InsufficientNodes {
                    dc: dcs[dc].name.clone(),
                    needed: slot as u32 + 1,
                    available: nodes.len() as u32,
                });
            };
            by_dc.entry(dc).or_default().push(node.id.clone());
            replicas.push(node.id.clone());
        }
        let placements = order
            .iter()
            .filter_map(|dc| {
                by_dc.remove(dc).map(|nodes| Placement {
                    datacenter: dcs[*dc].name.clone(),
                    nodes,
                })
            })
            .collect();
        if !matches!(locality, Some(Locality::Preferred(_))) {
            self.cursor = (self.cursor + 1) % dcs.len();
        }
        Ok((placements, replicas))
    }

    fn service_ms(&self, class: &ResolvedClass, function: &str) -> f64 {
        class
            .function(function)
            .and_then(|f| f.handler.as_deref())
            .and_then(|h| self.handlers.get(h))
            .map_or(CHATTY_MS as f64, |h| h.service.nominal_ms())
    }

    /// Builds a plan for one class. Accepted plans reserve their vcpus.
    pub fn admit(&mut self, class: &ResolvedClass) -> DeploymentPlan {
        let template = self.templates.select(class).name().to_string();
        let mut plan = DeploymentPlan::new(class, &template);
        let order = match self.dc_order(class.sla.locality.as_ref()) {
            Ok(o) => o,
            Err(e) => return plan.reject(RejectionCode::UnknownDatacenter, None, e.to_string()),
        };
        plan.stability = self.stability(&order);
        let mut n = match class.sla.availability {
            Some(a) => match replicas_for(a, plan.stability) {
                Ok(n) => n,
                Err(e) => return plan.reject(RejectionCode::InfeasibleTarget, None, e.to_string()),
            },
            None => 1,
        };
        if class.sla.consistency == Some(Consistency::Strong) {
            n = n.max(3);
        }
        plan.replica_count = n;
        plan.expected_availability = availability_of(n, plan.stability);
        let (placements, replicas) = match self.place(class.sla.locality.as_ref(), n) {
            Ok(p) => p,
            Err(e) => {
                let (code, deficit) = match &e {
                    PlannerError::InsufficientDatacenters { needed, available } => (
                        RejectionCode::InsufficientDatacenters,
                        Some((needed - available) as f64),
                    ),
                    PlannerError::InsufficientNodes {
                        needed, available, ..
                    } => (
                        RejectionCode::InsufficientNodes,
                        Some((needed - available) as f64),
                    ),
                    _ => (RejectionCode::UnknownDatacenter, None),
                };
                return plan.reject(code, deficit, e.to_string());
            }
        };
        plan.placements = placements;
        plan.replicas = replicas;
        if class.sla.locality == Some(Locality::Local) {
            plan.pinned_node = plan.replicas.first().cloned();
        }
        let pool = &self.cfg.pool;
        for f in &class.functions {
            if f.kind == FunctionKind::Builtin {
                continue;
            }
            if let Some(rate) = f.sla.throughput_rps {
                let c = warm_containers_under_contention(
                    rate as f64,
                    self.service_ms(class, &f.name),
                    pool.concurrency,
                    self.cfg.contention,
                    pool.max_containers,
                );
                plan.prewarm.insert(f.name.clone(), c);
            }
        }
        let per = pool.vcpu_per_container as u64;
        if let Some((f, &c)) = plan.prewarm.iter().find(|(_, &c)| c > pool.max_containers) {
            let deficit = (c - pool.max_containers) as u64 * per;
            let msg = format!(
                "`{f}` needs {c} containers, a pool holds {}",
                pool.max_containers
            );
            return plan.reject(RejectionCode::CapacityExceeded, Some(deficit as f64), msg);
        }
        plan.vcpu = plan.prewarm.values().map(|&c| c as u64 * per).sum();
        let available = self
            .topology
            .total_vcpu()
            .saturating_sub(self.reserved_vcpu);
        if plan.vcpu > available {
            let deficit = plan.vcpu - available;
            let msg = format!("needs {} vcpu, {available} available", plan.vcpu);
            return plan.reject(RejectionCode::CapacityExceeded, Some(deficit as f64), msg);
        }
        self.reserved_vcpu += plan.vcpu;
        plan.accepted = true;
        plan
    }

    pub fn admit_all(&mut self, set: &ResolvedClassSet) -> Vec<DeploymentPlan> {
        set.classes.values().map(|c| self.admit(c)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::package::{parse_package, resolve_inheritance};
    use crate::sim::{LinkEntry, TopologyFile};

    const IMAGE: &str = include_str!("../../packages/image.yaml");

    fn planner(topo: Topology) -> Planner {
        Planner::new(
            topo,
            HandlerRegistry::with_builtins(),
            PlannerConfig::default(),
        )
    }

    fn four_dcs() -> Topology {
        let mut file: TopologyFile = Topology::edge_two_clouds().file().clone();
        let mut extra = file.datacenters[2].clone();
        extra.name = "cloud-3".into();
        for n in extra.nodes.iter_mut() {
            n.id = n.id.replace("cloud-2", "cloud-3");
        }
        file.datacenters.push(extra);
        for other in ["edge-1", "cloud-1", "cloud-2"] {
            file.links.push(LinkEntry {
                a: other.into(),
                b: "cloud-3".into(),
                latency_ms: 10.0,
            });
        }
        Topology::from_file(file).unwrap()
    }

    #[test]
    fn image_class_is_accepted_with_three_replicas() {
        let set = resolve_inheritance(&parse_package(IMAGE).unwrap(), &[]).unwrap();
        let mut p = planner(Topology::edge_cloud());
        let plan = p.admit(set.class("Image").unwrap());
        assert!(plan.accepted, "{:?}", plan.rejection);
        assert_eq!(plan.replica_count, 3);
        assert_eq!(plan.template, "ltag");
        // resize: 100 rps × 25 ms = 2.5 slots, 10 per container.
        assert_eq!(plan.prewarm["resize"], 1);
        // detectObject: 100 rps × 500 ms = 50 slots.
        assert_eq!(plan.prewarm["detectObject"], 5);
        assert_eq!(plan.vcpu, 6);
    }

    #[test]
    fn preferred_datacenter_comes_first() {
        let mut p = planner(Topology::edge_two_clouds());
        let (placements, replicas) = p
            .place(Some(&Locality::Preferred(vec!["edge-1".into()])), 3)
            .unwrap();
        let dcs: Vec<_> = placements.iter().map(|p| p.datacenter.as_str()).collect();
        assert_eq!(dcs, ["edge-1", "cloud-1", "cloud-2"]);
        assert!(replicas[0].starts_with("edge-1"));
    }

    #[test]
    fn round_robin_across_classes() {
        let mut p = planner(four_dcs());
        let firsts: Vec<String> = (0..5)
            .map(|_| p.place(None, 1).unwrap().0[0].datacenter.clone())
            .collect();
        assert_eq!(
            firsts,
            ["edge-1", "cloud-1", "cloud-2", "cloud-3", "edge-1"]
        );
    }

    #[test]
    fn too_few_datacenters_without_fallback() {
        let mut p = Planner::new(
            Topology::edge_cloud(),
            HandlerRegistry::with_builtins(),
            PlannerConfig {
                allow_node_fallback: false,
                ..PlannerConfig::default()
            },
        );
        assert_eq!(
            p.place(None, 5),
            Err(PlannerError::InsufficientDatacenters {
                needed: 5,
                available: 2
            })
        );
    }

    #[test]
    fn strong_raises_to_three_and_capacity_rejects() {
        let yaml = r#"
name: p
classes:
  - name: s
    qos: { availability: 90, consistency: STRONG }
    functions:
      - function: work
  - name: hog
    functions:
      - function: work
        qos: { throughput: 20000 }
functions:
  - name: work
    type: TASK
    handler: compute_intensive
"#;
        let set = resolve_inheritance(&parse_package(yaml).unwrap(), &[]).unwrap();
        let mut p = planner(Topology::edge_cloud());
        let s = p.admit(set.class("s").unwrap());
        assert!(s.accepted);
        assert_eq!(s.replica_count, 3);
        let hog = p.admit(set.class("hog").unwrap());
        assert!(!hog.accepted);
        let r = hog.rejection.unwrap();
        assert_eq!(r.code, RejectionCode::CapacityExceeded);
        // 20000 rps × 500 ms / 10 = 1000 containers against a 64-container pool.
        assert_eq!(r.deficit, Some(936.0));
        assert_eq!(p.reserved_vcpu(), 0);
    }

    #[test]
    fn local_locality_pins_to_primary() {
        let yaml = "classes:\n  - name: c\n    qos: { locality: LOCAL, availability: 99 }\n";
        let set = resolve_inheritance(&parse_package(yaml).unwrap(), &[]).unwrap();
        let mut p = planner(Topology::edge_cloud());
        let plan = p.admit(set.class("c").unwrap());
        assert_eq!(plan.replica_count, 2);
        assert_eq!(plan.pinned_node.as_deref(), plan.primary());
    }
}
