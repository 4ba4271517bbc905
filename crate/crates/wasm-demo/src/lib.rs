//! Browser bindings: replica sizing, deployment planning and history checks.
//! Results come back as JSON strings so the page stays plain JavaScript.

use oaas_core::consistency::CheckKind;
use oaas_core::faas::HandlerRegistry;
use oaas_core::package::{parse_package, resolve_inheritance};
use oaas_core::planner::{self, Planner, PlannerConfig};
use oaas_core::workload::{self, preset_topology};
use wasm_bindgen::prelude::*;

// The plain functions carry the logic; JsError only exists on wasm32, so the
// exported wrappers stay one line each and the tests run natively.

pub fn replicas(availability: f64, stability: f64) -> Result<u32, String> {
    planner::replicas_for(availability, stability).map_err(|e| e.to_string())
}

pub fn plan(yaml: &str, topology: &str) -> Result<String, String> {
    let topo = preset_topology(topology).ok_or(format!("unknown topology `{topology}`"))?;
    let pkg = parse_package(yaml).map_err(|e| e.to_string())?;
    let classes = resolve_inheritance(&pkg, &[]).map_err(|e| e.to_string())?;
    let mut planner = Planner::new(
        topo,
        HandlerRegistry::with_builtins(),
        PlannerConfig::default(),
    );
    let plans: Vec<_> = planner
        .admit_all(&classes)
        .iter()
        .map(|p| p.to_json())
        .collect();
    serde_json::to_string_pretty(&plans).map_err(|e| e.to_string())
}

pub fn check(jsonl: &str, kind: &str) -> Result<String, String> {
    let kind: CheckKind = kind
        .parse()
        .map_err(|e: oaas_core::consistency::HistoryError| e.to_string())?;
    let verdict = workload::check_history(jsonl, kind).map_err(|e| e.to_string())?;
    serde_json::to_string_pretty(&verdict).map_err(|e| e.to_string())
}

/// Replicas needed for `availability` on hosts up a `stability` fraction of
/// the time.
#[wasm_bindgen]
pub fn replicas_for(availability: f64, stability: f64) -> Result<u32, JsError> {
    replicas(availability, stability).map_err(|e| JsError::new(&e))
}

/// Admits every class of a YAML package on a preset topology; JSON array of
/// plans.
#[wasm_bindgen]
pub fn plan_package(yaml: &str, topology: &str) -> Result<String, JsError> {
    plan(yaml, topology).map_err(|e| JsError::new(&e))
}

/// Checks a JSON-lines history; `kind` as on the command line.
#[wasm_bindgen]
pub fn check_history(jsonl: &str, kind: &str) -> Result<String, JsError> {
    check(jsonl, kind).map_err(|e| JsError::new(&e))
}

/// A bundled package's YAML, to seed the editor.
#[wasm_bindgen]
pub fn sample_package(name: &str) -> Option<String> {
    workload::bundled_package(name).map(str::to_string)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replicas_match_the_planner() {
        assert_eq!(replicas(0.9999, 0.9436), Ok(4));
        assert!(replicas(1.0, 0.9436).is_err());
    }

    #[test]
    fn plans_a_bundled_package() {
        let yaml = sample_package("tiers").unwrap();
        let out: serde_json::Value =
            serde_json::from_str(&plan(&yaml, "edge_two_clouds").unwrap()).unwrap();
        assert_eq!(out.as_array().unwrap().len(), 4);
        assert!(plan(&yaml, "mars").unwrap_err().contains("mars"));
        assert!(plan("classes: [", "edge_cloud").is_err());
    }

    #[test]
    fn checks_a_history() {
        let h =
            r#"{"op":"write","key":"k","client":"a","invoke":0,"ack":5,"value":1,"version":[1]}"#;
        let v: serde_json::Value = serde_json::from_str(&check(h, "ryw").unwrap()).unwrap();
        assert_eq!(v["passed"], true);
        assert!(check(h, "serializable").is_err());
    }
}
