use oaas_core::faas::{json_update, HandlerInput, HandlerRegistry, NoBlobs, PoolConfig};
use oaas_core::grid::{CrashPoint, GridCluster, GridConfig, GridError, LockMode, Persistence};
use oaas_core::package::{parse_package, resolve_inheritance, CallerContext};
use oaas_core::sim::{FaultKind, Topology};
use serde_json::{json, Value};

const MEDIA: &str = include_str!("../packages/media.yaml");

fn cluster(cfg: GridConfig, seed: u64) -> GridCluster {
    let pkg = parse_package(MEDIA).unwrap();
    let classes = resolve_inheritance(&pkg, &[]).unwrap();
    let mut g = GridCluster::new(
        Topology::edge_cloud(),
        HandlerRegistry::with_builtins(),
        cfg,
        seed,
    );
    g.register_classes(&classes);
    g
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

fn ext() -> CallerContext {
    CallerContext::External
}

#[test]
fn builtin_new_creates_empty_record() {
    let mut g = cluster(GridConfig::default(), 1);
    let id = g.submit_new(ext(), "video", "v1", Value::Null);
    assert_eq!(g.run_until_done(id), Ok(json!("v1")));
    let view = g.read_object("v1").unwrap();
    assert_eq!(view.structured, json!({}));
    assert!(view.versions.is_empty());
    let again = g.submit_new(ext(), "video", "v1", Value::Null);
    assert_eq!(
        g.run_until_done(again),
        Err(GridError::AlreadyExists("v1".into()))
    );
}

#[test]
fn task_update_matches_direct_handler() {
    let mut g = cluster(warm(), 2);
    let before = json!({"title": "a", "tags": ["x"]});
    g.create_object("video", "v", before.clone()).unwrap();
    let args = json!({"set": {"k": "v"}, "append": {"tags": "y"}});
    g.invoke_sync(ext(), "v", "append", args.clone()).unwrap();
    let input = HandlerInput {
        object_id: "v",
        function: "append",
        structured: &before,
        args: &args,
    };
    let oracle = json_update(&input, &mut NoBlobs)
        .unwrap()
        .structured
        .unwrap();
    assert_eq!(g.read_object("v").unwrap().structured, oracle);
}

#[test]
fn syncs_apply_in_arrival_order() {
    let mut g = cluster(GridConfig::default(), 3);
    g.create_object("video", "v", json!({})).unwrap();
    let a = g.submit_at(
        1,
        ext(),
        "v",
        "append",
        json!({"append": {"seen": 1}}),
        None,
    );
    let b = g.submit_at(
        2,
        ext(),
        "v",
        "append",
        json!({"append": {"seen": 2}}),
        None,
    );
    g.run_until_done(a).unwrap();
    g.run_until_done(b).unwrap();
    assert_eq!(
        g.read_object("v").unwrap().structured["seen"],
        json!([1, 2])
    );
}

#[test]
fn access_and_lookup_errors() {
    let mut g = cluster(warm(), 4);
    g.create_object("video", "v", json!({})).unwrap();
    assert_eq!(
        g.invoke_sync(ext(), "v", "audit", json!({})),
        Err(GridError::AccessDenied {
            function: "audit".into()
        })
    );
    let own = CallerContext::Class {
        package: "media".into(),
        class: "video".into(),
    };
    assert!(g.invoke_sync(own, "v", "audit", json!({})).is_ok());
    assert!(matches!(
        g.invoke_sync(ext(), "v", "nope", json!({})),
        Err(GridError::NoSuchFunction { .. })
    ));
    assert!(matches!(
        g.invoke_async(&ext(), "p", 1, "v", "audit", json!({})),
        Err(GridError::AccessDenied { .. })
    ));
}

#[test]
fn failed_task_leaves_state_unchanged() {
    let mut g = cluster(warm(), 5);
    g.create_object("video", "v", json!({"revision": 0}))
        .unwrap();
    g.seed_blob("v", "mp4", b"old".to_vec()).unwrap();
    // blob_rewrite without `key` fails inside the handler.
    let r = g.invoke_sync(ext(), "v", "rewrite", json!({}));
    assert!(matches!(r, Err(GridError::EngineFailure(_))));
    let view = g.read_object("v").unwrap();
    assert_eq!(view.structured, json!({"revision": 0}));
    assert_eq!(view.blobs["mp4"], b"old");
}

#[test]
fn version_swap_then_purge() {
    let mut g = cluster(warm(), 6);
    g.create_object("video", "v", json!({"revision": 0}))
        .unwrap();
    let v1 = g.seed_blob("v", "mp4", b"old".to_vec()).unwrap();
    g.invoke_sync(
        ext(),
        "v",
        "rewrite",
        json!({"key": "mp4", "content": "new"}),
    )
    .unwrap();
    let view = g.read_object("v").unwrap();
    let v2 = view.versions["mp4"];
    assert_ne!(v1, v2);
    assert_eq!(view.blobs["mp4"], b"new");
    assert_eq!(view.structured["revision"], json!(1));
    // Write-behind: v1 goes once the record is flushed.
    let t = g.now();
    g.run_until(t + 200);
    let keys: Vec<_> = g.blob_store().keys().map(|k| k.version).collect();
    assert_eq!(keys, vec![v2]);
    assert_eq!(g.durable("v").unwrap().versions["mp4"], v2);
}

#[test]
fn duplicate_producer_sequence_is_queued_once() {
    let mut g = cluster(warm(), 7);
    g.create_object("video", "c", json!({})).unwrap();
    let a = g
        .invoke_async(&ext(), "p", 1, "c", "increment", json!({}))
        .unwrap();
    let b = g
        .invoke_async(&ext(), "p", 1, "c", "increment", json!({}))
        .unwrap();
    assert_eq!(a, b);
    assert_eq!(g.queue().len(), 1);
    g.run_until_quiescent(60_000);
    assert_eq!(g.read_object("c").unwrap().structured["count"], json!(1));
    assert_eq!(g.async_outcome(a).unwrap().result, Ok(json!(1)));
}

#[test]
fn increments_survive_owner_crashes() {
    let mut g = cluster(GridConfig::default(), 8);
    g.create_object("video", "c", json!({})).unwrap();
    let owner = g.route("c").unwrap();
    for i in 0..300u64 {
        g.run_until(i * 10);
        g.invoke_async(&ext(), "p", i, "c", "increment", json!({}))
            .unwrap();
        if i % 7 == 0 {
            // Producer retry after a lost acknowledgement.
            g.invoke_async(&ext(), "p", i, "c", "increment", json!({}))
                .unwrap();
        }
        if i == 120 || i == 250 {
            g.kill_node(owner);
            g.schedule_fault(i * 10 + 700, FaultKind::Restart(owner))
                .unwrap();
        }
    }
    g.run_until_quiescent(600_000);
    let t = g.now();
    g.run_until(t + 500);
    assert_eq!(g.read_object("c").unwrap().structured["count"], json!(300));
    assert_eq!(g.durable("c").unwrap().structured["count"], json!(300));
    assert!(g.stats().crashes >= 2);
}

#[test]
fn localized_locking_is_fifo_and_silent() {
    let cfg = GridConfig {
        wire_tap: true,
        ..warm()
    };
    let mut g = cluster(cfg, 9);
    g.create_object("video", "hot", json!({})).unwrap();
    g.create_object("video", "cold", json!({})).unwrap();
    let ids: Vec<_> = (0..100)
        .map(|i| {
            g.submit_at(
                10,
                ext(),
                "hot",
                "append",
                json!({"append": {"order": i}}),
                None,
            )
        })
        .collect();
    g.submit_at(
        10,
        ext(),
        "cold",
        "append",
        json!({"append": {"order": 0}}),
        None,
    );
    g.run_until_quiescent(60_000);
    assert_eq!(g.lock_trace("hot"), ids.as_slice());
    assert_eq!(g.arrival_trace("hot"), ids.as_slice());
    assert_eq!(g.lock_trace("cold").len(), 1);
    let order: Vec<i64> = g.read_object("hot").unwrap().structured["order"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_i64().unwrap())
        .collect();
    assert_eq!(order, (0..100).collect::<Vec<_>>());
    assert_eq!(
        g.network()
            .tap()
            .iter()
            .filter(|m| m.kind.starts_with("lock-"))
            .count(),
        0
    );
}

#[test]
fn cluster_wide_locking_needs_messages() {
    let cfg = GridConfig {
        wire_tap: true,
        lock_mode: LockMode::ClusterWide,
        ..warm()
    };
    let mut g = cluster(cfg, 9);
    g.create_object("video", "hot", json!({})).unwrap();
    for i in 0..10 {
        g.submit_at(
            10,
            ext(),
            "hot",
            "append",
            json!({"append": {"order": i}}),
            None,
        );
    }
    g.run_until_quiescent(60_000);
    assert_eq!(
        g.read_object("hot").unwrap().structured["order"]
            .as_array()
            .unwrap()
            .len(),
        10
    );
    assert_eq!(
        g.network()
            .tap()
            .iter()
            .filter(|m| m.kind.starts_with("lock-"))
            .count(),
        30
    );
}

fn crash_and_read(persistence: Persistence, point: CrashPoint) -> (Value, Vec<u8>, usize) {
    let cfg = GridConfig {
        persistence,
        ..warm()
    };
    let mut g = cluster(cfg, 10);
    g.create_object("video", "v", json!({"revision": 0}))
        .unwrap();
    g.seed_blob("v", "mp4", b"old".to_vec()).unwrap();
    g.inject_crash(point, 1);
    let _ = g.invoke_sync(
        ext(),
        "v",
        "rewrite",
        json!({"key": "mp4", "content": "new"}),
    );
    let t = g.now();
    g.run_until(t + 2_500);
    g.run_until_quiescent(600_000);
    let t = g.now();
    g.run_until(t + 10_500);
    let view = g.read_object("v").unwrap();
    assert!(g.orphan_blobs().is_empty(), "{point:?}: orphans left");
    (
        view.structured,
        view.blobs["mp4"].clone(),
        g.blob_store().len(),
    )
}

#[test]
fn every_crash_point_is_all_or_nothing() {
    for persistence in [Persistence::WriteThrough, Persistence::WriteBehind] {
        for point in CrashPoint::ALL {
            let (doc, blob, stored) = crash_and_read(persistence, point);
            let old = doc == json!({"revision": 0}) && blob == b"old";
            let new = doc == json!({"revision": 1}) && blob == b"new";
            assert!(
                old || new,
                "{persistence:?}/{point:?}: mixed state {doc} {blob:?}"
            );
            let durable_before_crash = matches!(point, CrashPoint::Persisted | CrashPoint::Purged)
                || (persistence == Persistence::WriteThrough && point == CrashPoint::Replied);
            assert_eq!(new, durable_before_crash, "{persistence:?}/{point:?}");
            assert_eq!(stored, 1, "{persistence:?}/{point:?}");
        }
    }
}

#[test]
fn inventory_dump_lists_objects_and_blobs() {
    let mut g = cluster(warm(), 11);
    g.create_object("video", "v", json!({})).unwrap();
    g.seed_blob("v", "mp4", b"abc".to_vec()).unwrap();
    let inv = g.inventory_json();
    assert_eq!(inv["objects"][0]["object_id"], json!("v"));
    assert_eq!(inv["blobs"][0]["bytes"], json!(3));
}
