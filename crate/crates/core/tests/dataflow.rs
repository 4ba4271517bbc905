use oaas_core::dataflow::DataflowError;
use oaas_core::faas::{
    detect_faces, recognize_faces, split_frames, HandlerInput, HandlerRegistry, NoBlobs,
};
use oaas_core::grid::{GridCluster, GridConfig};
use oaas_core::package::{parse_package, resolve_inheritance, CallerContext};
use oaas_core::sim::Topology;
use serde_json::{json, Value};

const MEDIA: &str = include_str!("../packages/media.yaml");

fn cluster() -> GridCluster {
    let classes = resolve_inheritance(&parse_package(MEDIA).unwrap(), &[]).unwrap();
    let mut g = GridCluster::new(
        Topology::edge_cloud(),
        HandlerRegistry::with_builtins(),
        GridConfig::default(),
        42,
    );
    g.register_classes(&classes);
    g.create_object("video", "clip", json!({"name": "clip", "frames": 7}))
        .unwrap();
    g
}

fn apply(
    f: fn(
        &HandlerInput<'_>,
        &mut dyn oaas_core::faas::BlobGateway,
    ) -> Result<oaas_core::faas::HandlerOutput, String>,
    state: &Value,
    args: Value,
) -> Value {
    let input = HandlerInput {
        object_id: "clip",
        function: "",
        structured: state,
        args: &args,
    };
    f(&input, &mut NoBlobs).unwrap().new_object.unwrap()
}

#[test]
fn pipeline_matches_composed_handlers() {
    let mut g = cluster();
    let gallery = json!(["ann", "bob"]);
    let out = g
        .invoke_sync(
            CallerContext::External,
            "clip",
            "faces",
            json!({ "gallery": gallery }),
        )
        .unwrap();
    let id = out.as_str().unwrap().to_string();
    let frames = apply(
        split_frames,
        &json!({"name": "clip", "frames": 7}),
        json!({}),
    );
    let found = apply(detect_faces, &frames, json!({}));
    let labels = apply(recognize_faces, &found, json!({ "gallery": gallery }));
    assert_eq!(g.read_object(&id).unwrap().structured, labels);
    assert_eq!(g.durable(&id).unwrap().class, "labels");
}

#[test]
fn diamond_branches_overlap() {
    let mut g = cluster();
    g.invoke_sync(CallerContext::External, "clip", "diamond", json!({}))
        .unwrap();
    let t = g.macro_trace();
    let span = |s: &str| {
        let e = t.iter().find(|e| e.step == s).unwrap();
        (e.dispatched_at, e.completed_at.unwrap())
    };
    let (a, b, c, d) = (span("a"), span("b"), span("c"), span("d"));
    assert_eq!(b.0, c.0);
    assert!(b.0 < c.1 && c.0 < b.1);
    assert!(a.1 <= b.0 && b.1 <= d.0 && c.1 <= d.0);
    let orchestrators: std::collections::BTreeSet<_> = t.iter().map(|e| e.orchestrator).collect();
    assert_eq!(orchestrators.len(), 1);
}

#[test]
fn resume_after_crash_matches_clean_run() {
    let args = json!({"gallery": ["ann"]});
    let mut clean = cluster();
    clean
        .invoke_sync(CallerContext::External, "clip", "faces", args.clone())
        .unwrap();
    clean.run_until_quiescent(120_000);

    let mut g = cluster();
    g.crash_orchestrator_after("detect");
    let req = g.submit_sync(CallerContext::External, "clip", "faces", args);
    assert!(g.run_until_done(req).is_err());
    let run = g.macro_run_of(req).unwrap();
    assert!(g.checkpoint(run).unwrap().done.contains("detect"));
    let t = g.now();
    g.run_until(t + 2_500);
    let resumed = g.resume_after_crash(run).unwrap().unwrap();
    let out = g.run_until_done(resumed).unwrap();
    assert!(out.as_str().unwrap().ends_with(".recognize"));
    g.run_until_quiescent(120_000);
    assert_eq!(g.inventory_json(), clean.inventory_json());
    // Nothing left to resume.
    assert_eq!(g.resume_after_crash(run), Ok(None));
}

#[test]
fn mutable_runs_are_not_resumed() {
    let mut g = cluster();
    g.crash_orchestrator_after("t");
    let req = g.submit_sync(CallerContext::External, "clip", "relabel", json!({}));
    let _ = g.run_until_done(req);
    let run = g.macro_run_of(req).unwrap();
    let t = g.now();
    g.run_until(t + 2_500);
    assert_eq!(
        g.resume_after_crash(run),
        Err(DataflowError::NotIdempotent(run))
    );
}
