//! Scenario runner: named experiment specs, drivers that execute them inside
//! the simulator, and the metrics reports they produce.

mod availability;
mod grid_runs;
mod groups;
pub mod load;
pub mod report;
mod throughput;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use load::{refine_pods, run_load, LoadPhase, LoadResult, PoolTarget};
pub use report::{
    quantile, CheckResult, Format, MetricsReport, PhaseMetrics, Resources, StalenessPoint,
    CHECK_COLUMNS, PHASE_COLUMNS,
};

use crate::consistency::{check, CheckKind, History, HistoryError, Verdict};
use crate::package::{parse_package, resolve_inheritance, ResolvedClassSet};
use crate::sim::{ChaosSchedule, Millis, Topology, TopologyFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Driver {
    /// Open-loop load against the package's pools, as listed in `workload`.
    Load,
    Availability,
    Throughput,
    ExactlyOnce,
    Locking,
    Failsafe,
    Partition,
    Staleness,
    Strong,
    Raft,
    Dataflow,
    Refinement,
}

impl Driver {
    pub fn name(self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Sync,
    Async,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadPhase {
    pub phase: String,
    /// `Class.function` of the package.
    pub target: String,
    pub rate_rps: f64,
    pub duration_ms: Millis,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub payload_bytes: u64,
}

/// Either the name of a preset (`edge_cloud`, `edge_two_clouds`) or a full
/// topology document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologyRef {
    Preset(String),
    Inline(TopologyFile),
}

impl TopologyRef {
    pub fn load(&self) -> Result<Topology, ScenarioError> {
        match self {
            TopologyRef::Preset(name) => preset_topology(name).ok_or_else(|| {
                ScenarioError::Topology(format!("unknown topology preset `{name}`"))
            }),
            TopologyRef::Inline(file) => Topology::from_file(file.clone())
                .map_err(|e| ScenarioError::Topology(e.to_string())),
        }
    }
}

pub fn preset_topology(name: &str) -> Option<Topology> {
    match name {
        "edge_cloud" => Some(Topology::edge_cloud()),
        "edge_two_clouds" => Some(Topology::edge_two_clouds()),
        _ => None,
    }
}

fn default_seed() -> u64 {
    1
}

fn default_seeds() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub driver: Driver,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<TopologyRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chaos: Option<ChaosSchedule>,
    /// Bundled package name, or the package YAML itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub package: Option<String>,
    #[serde(default)]
    pub workload: Vec<WorkloadPhase>,
    #[serde(default)]
    pub checks: Vec<String>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Ensemble size; seeds run are `seed, seed+1, ...`.
    #[serde(default = "default_seeds")]
    pub seeds: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub until_ms: Option<Millis>,
    /// Driver knobs; each driver documents its own keys and defaults.
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("topology: {0}")]
    Topology(String),
    #[error("chaos: {0}")]
    Chaos(String),
    #[error("package: {0}")]
    Package(String),
    #[error("admission: {0}")]
    Admission(String),
    #[error("run failed: {0}")]
    Run(String),
}

impl ScenarioError {
    /// The stage that failed, for exit messages.
    pub fn stage(&self) -> &'static str {
        match self {
            ScenarioError::Parse(_)
            | ScenarioError::UnknownScenario(_)
            | ScenarioError::Invalid(_) => "spec",
            ScenarioError::Topology(_) => "topology",
            ScenarioError::Chaos(_) => "chaos",
            ScenarioError::Package(_) => "package",
            ScenarioError::Admission(_) => "admission",
            ScenarioError::Run(_) => "run",
        }
    }
}

const BUNDLED: &[(&str, &str)] = &[
    (
        "availability",
        include_str!("../../scenarios/availability.json"),
    ),
    ("dataflow", include_str!("../../scenarios/dataflow.json")),
    (
        "exactly-once",
        include_str!("../../scenarios/exactly-once.json"),
    ),
    ("failsafe", include_str!("../../scenarios/failsafe.json")),
    ("locking", include_str!("../../scenarios/locking.json")),
    ("partition", include_str!("../../scenarios/partition.json")),
    ("raft", include_str!("../../scenarios/raft.json")),
    (
        "refinement",
        include_str!("../../scenarios/refinement.json"),
    ),
    ("staleness", include_str!("../../scenarios/staleness.json")),
    ("strong", include_str!("../../scenarios/strong.json")),
    (
        "throughput",
        include_str!("../../scenarios/throughput.json"),
    ),
];

const PACKAGES: &[(&str, &str)] = &[
    ("geo", include_str!("../../packages/geo.yaml")),
    ("image", include_str!("../../packages/image.yaml")),
    ("media", include_str!("../../packages/media.yaml")),
    ("synthetic", include_str!("../../packages/synthetic.yaml")),
    ("tiers", include_str!("../../packages/tiers.yaml")),
];

/// Names of the bundled scenarios, sorted.
pub fn list_scenarios() -> Vec<&'static str> {
    BUNDLED.iter().map(|(n, _)| *n).collect()
}

pub fn bundled_scenario(name: &str) -> Result<ScenarioSpec, ScenarioError> {
    let text = BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| ScenarioError::UnknownScenario(name.to_string()))?;
    ScenarioSpec::from_json(text)
}

/// YAML source of a bundled package.
pub fn bundled_package(name: &str) -> Option<&'static str> {
    PACKAGES.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

impl ScenarioSpec {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let spec: Self =
            serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.name.is_empty() {
            return Err(ScenarioError::Invalid("name is empty".into()));
        }
        if self.seeds == 0 {
            return Err(ScenarioError::Invalid("seeds must be at least 1".into()));
        }
        for p in &self.workload {
            if p.duration_ms == 0 {
                return Err(ScenarioError::Invalid(format!(
                    "phase `{}` has zero duration",
                    p.phase
                )));
            }
            if !(p.rate_rps.is_finite() && p.rate_rps >= 0.0) {
                return Err(ScenarioError::Invalid(format!(
                    "phase `{}` has rate {}",
                    p.phase, p.rate_rps
                )));
            }
        }
        Ok(())
    }

    pub fn topology(&self) -> Result<Topology, ScenarioError> {
        self.topology
            .clone()
            .unwrap_or(TopologyRef::Preset("edge_cloud".into()))
            .load()
    }

    pub fn classes(&self) -> Result<Option<ResolvedClassSet>, ScenarioError> {
        let Some(name) = &self.package else {
            return Ok(None);
        };
        // Multi-line values are the package itself.
        let text = match bundled_package(name) {
            Some(t) => t,
            None if name.contains('\n') => name.as_str(),
            None => return Err(ScenarioError::Package(format!("unknown package `{name}`"))),
        };
        let pkg = parse_package(text).map_err(|e| ScenarioError::Package(e.to_string()))?;
        let set =
            resolve_inheritance(&pkg, &[]).map_err(|e| ScenarioError::Package(e.to_string()))?;
        Ok(Some(set))
    }

    /// Seeds of the ensemble.
    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed + i).collect()
    }

    pub fn param_u64(&self, key: &str, default: u64) -> u64 {
        self.params
            .get(key)
            .and_then(Value::as_u64)
            .unwrap_or(default)
    }

    pub fn param_f64(&self, key: &str, default: f64) -> f64 {
        self.params
            .get(key)
            .and_then(Value::as_f64)
            .unwrap_or(default)
    }

    /// Should the named check be evaluated? An empty list means all.
    pub fn wants(&self, check: &str) -> bool {
        self.checks.is_empty() || self.checks.iter().any(|c| c == check)
    }
}

/// Overrides applied on top of a spec before running.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    /// Replaces the spec's seed and runs a single seed.
    pub seed: Option<u64>,
    pub until_ms: Option<Millis>,
    pub topology: Option<TopologyFile>,
    pub chaos: Option<ChaosSchedule>,
}

impl RunOptions {
    pub fn apply(&self, spec: &mut ScenarioSpec) {
        if let Some(s) = self.seed {
            spec.seed = s;
            spec.seeds = 1;
        }
        if let Some(u) = self.until_ms {
            spec.until_ms = Some(u);
        }
        if let Some(t) = &self.topology {
            spec.topology = Some(TopologyRef::Inline(t.clone()));
        }
        if let Some(c) = &self.chaos {
            spec.chaos = Some(c.clone());
        }
    }
}

/// Runs a scenario to completion. The report is a pure function of the spec.
pub fn run_scenario(spec: &ScenarioSpec) -> Result<MetricsReport, ScenarioError> {
    spec.validate()?;
    let mut report = MetricsReport::new(&spec.name, &spec.driver.name());
    report.seeds = spec.seed_list();
    match spec.driver {
        Driver::Load => throughput::run_plain(spec, &mut report)?,
        Driver::Availability => availability::run(spec, &mut report)?,
        Driver::Throughput => throughput::run(spec, &mut report)?,
        Driver::Refinement => throughput::run_refinement(spec, &mut report)?,
        Driver::ExactlyOnce => grid_runs::exactly_once(spec, &mut report)?,
        Driver::Locking => grid_runs::locking(spec, &mut report)?,
        Driver::Failsafe => grid_runs::failsafe(spec, &mut report)?,
        Driver::Dataflow => grid_runs::dataflow(spec, &mut report)?,
        Driver::Partition => groups::partition(spec, &mut report)?,
        Driver::Staleness => groups::staleness(spec, &mut report)?,
        Driver::Strong => groups::strong(spec, &mut report)?,
        Driver::Raft => groups::raft(spec, &mut report)?,
    }
    Ok(report)
}

/// Runs one check over a recorded history.
pub fn check_history(text: &str, kind: CheckKind) -> Result<Verdict, HistoryError> {
    let h = History::from_jsonl(text)?;
    Ok(check(&h, kind))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_bundled_scenario_parses() {
        let names = list_scenarios();
        assert_eq!(names.len(), 11);
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        for n in names {
            let s = bundled_scenario(n).unwrap();
            assert_eq!(s.name, n);
            s.topology().unwrap();
            s.classes().unwrap();
        }
    }

    #[test]
    fn every_bundled_package_resolves() {
        for (name, text) in PACKAGES {
            let pkg = parse_package(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            resolve_inheritance(&pkg, &[]).unwrap();
        }
    }

    #[test]
    fn zero_duration_phase_rejected() {
        let text = r#"{"name":"x","driver":"load","workload":[
            {"phase":"a","target":"C.f","rate_rps":1,"duration_ms":0}]}"#;
        assert!(matches!(
            ScenarioSpec::from_json(text),
            Err(ScenarioError::Invalid(_))
        ));
    }

    #[test]
    fn empty_workload_gives_empty_passing_report() {
        let spec =
            ScenarioSpec::from_json(r#"{"name":"idle","driver":"load","package":"synthetic"}"#)
                .unwrap();
        let r = run_scenario(&spec).unwrap();
        assert!(r.phases.is_empty());
        assert!(r.passed());
        assert_eq!(r.phases_csv(), PHASE_COLUMNS.join(",") + "\n");
    }

    #[test]
    fn unknown_names() {
        assert!(matches!(
            bundled_scenario("nope"),
            Err(ScenarioError::UnknownScenario(_))
        ));
        let spec =
            ScenarioSpec::from_json(r#"{"name":"x","driver":"load","topology":"mars"}"#).unwrap();
        assert_eq!(spec.topology().unwrap_err().stage(), "topology");
    }

    #[test]
    fn inline_package_yaml() {
        let mut spec = ScenarioSpec::from_json(r#"{"name":"x","driver":"load"}"#).unwrap();
        spec.package = Some(bundled_package("tiers").unwrap().to_string());
        let classes = spec.classes().unwrap().unwrap();
        assert!(classes.class("FourNines").is_some());
        spec.package = Some("nope".into());
        assert_eq!(spec.classes().unwrap_err().stage(), "package");
    }

    #[test]
    fn options_override_seed() {
        let mut spec = bundled_scenario("strong").unwrap();
        RunOptions {
            seed: Some(99),
            ..RunOptions::default()
        }
        .apply(&mut spec);
        assert_eq!(spec.seed_list(), vec![99]);
    }
}
