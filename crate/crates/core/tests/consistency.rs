use oaas_core::consistency::{
    check, CheckKind, ClientOps, ClientSpec, GroupConfig, GroupSim, OpKind,
};
use oaas_core::package::Consistency;
use oaas_core::sim::{DcId, Fault, FaultKind, NodeId, Topology};
use serde_json::json;

fn keys() -> Vec<String> {
    (0..4).map(|i| format!("k{i}")).collect()
}

fn random_client(name: &str, node: u32, stop_ms: u64) -> ClientSpec {
    ClientSpec {
        name: name.into(),
        node: NodeId(node),
        start_ms: 1_000,
        think_ms: 20,
        ops: ClientOps::Random {
            stop_ms,
            write_ratio: 0.5,
            keys: keys(),
        },
    }
}

fn spread() -> Vec<NodeId> {
    vec![NodeId(0), NodeId(3), NodeId(6)]
}

fn partition_edge(from: u64, to: u64) -> Vec<Fault> {
    let mut f = Vec::new();
    for cloud in [1, 2] {
        f.push(Fault {
            at: from,
            kind: FaultKind::Partition(DcId(0), DcId(cloud)),
        });
        f.push(Fault {
            at: to,
            kind: FaultKind::Heal(DcId(0), DcId(cloud)),
        });
    }
    f.sort_by_key(|f| f.at);
    f
}

#[test]
fn strong_write_acks_after_one_round_trip() {
    let topo = Topology::edge_cloud();
    let cfg = GroupConfig::new(Consistency::Strong, vec![NodeId(3), NodeId(4), NodeId(5)]);
    let script = (0..5)
        .map(|i| (OpKind::Write, "x".to_string(), Some(json!(i))))
        .collect();
    let client = ClientSpec {
        name: "c".into(),
        node: NodeId(3),
        start_ms: 1_000,
        think_ms: 10,
        ops: ClientOps::Script(script),
    };
    let run = GroupSim::new(topo.clone(), cfg, vec![client], &[], 1)
        .unwrap()
        .run(5_000);
    assert_eq!(run.audit.elections.len(), 1);
    let leader = run.audit.elections[0].2;
    assert!(run.history.ops.iter().all(|o| o.ok));
    // Client to leader and back, plus leader to followers and back (1 ms each way).
    let expected = 2 * topo.delay(NodeId(3), leader) + 2;
    let last = run.history.ops.last().unwrap();
    assert_eq!(last.ack - last.invoke, expected);
    assert_eq!(last.version, Some(vec![6]));
}

#[test]
fn strong_histories_are_linearizable_under_leader_kills() {
    for seed in 0..3 {
        let topo = Topology::edge_two_clouds();
        let cfg = GroupConfig::new(Consistency::Strong, spread());
        let clients = vec![
            random_client("a", 1, 8_000),
            random_client("b", 4, 8_000),
            random_client("c", 7, 8_000),
        ];
        let mut sim = GroupSim::new(topo, cfg, clients, &[], seed).unwrap();
        sim.run_until(3_000);
        let leader = sim.leader().unwrap();
        let faults = [
            Fault {
                at: 3_000,
                kind: FaultKind::Kill(leader),
            },
            Fault {
                at: 5_000,
                kind: FaultKind::Restart(leader),
            },
        ];
        drop(sim);
        let cfg = GroupConfig::new(Consistency::Strong, spread());
        let clients = vec![
            random_client("a", 1, 8_000),
            random_client("b", 4, 8_000),
            random_client("c", 7, 8_000),
        ];
        let run = GroupSim::new(Topology::edge_two_clouds(), cfg, clients, &faults, seed)
            .unwrap()
            .run(10_000);
        assert!(
            run.audit.violations.is_empty(),
            "{:?}",
            run.audit.violations
        );
        let v = check(&run.history, CheckKind::LinearizableLite);
        assert!(v.passed, "seed {seed}: {:?}", v.counterexample);
        assert!(run.history.ops.iter().filter(|o| o.ok).count() > 200);
        // A later term took over after the kill.
        let after: Vec<_> = run.audit.elections.iter().filter(|e| e.0 > 3_000).collect();
        assert!(!after.is_empty());
        assert!(after[0].1 > run.audit.elections[0].1);
        assert!(after[0].0 - 3_000 <= 300 + 2 * 17 + 50);
    }
}

#[test]
fn strong_edge_clients_cannot_commit_while_partitioned() {
    let cfg = GroupConfig::new(Consistency::Strong, spread());
    let clients = vec![random_client("edge", 1, 20_000)];
    let run = GroupSim::new(
        Topology::edge_two_clouds(),
        cfg,
        clients,
        &partition_edge(5_000, 12_000),
        4,
    )
    .unwrap()
    .run(20_000);
    let writes = |from, to| run.history.acked_in(from, to, |o| o.op == OpKind::Write);
    assert!(writes(1_000, 5_000) > 0);
    assert_eq!(writes(5_000, 12_000), 0);
    assert!(writes(13_000, 20_000) > 0);
    assert!(run
        .history
        .ops
        .iter()
        .any(|o| o.error.as_deref() == Some("no quorum reachable")));
    assert!(check(&run.history, CheckKind::LinearizableLite).passed);
}

#[test]
fn bounded_staleness_stays_under_delta() {
    let delta = 2_000;
    let cfg = GroupConfig::new(Consistency::BoundedStaleness { delta_ms: delta }, spread());
    assert_eq!(cfg.ae_interval_ms, 500);
    let clients = vec![
        random_client("a", 0, 15_000),
        random_client("b", 4, 15_000),
        random_client("c", 8, 15_000),
    ];
    let run = GroupSim::new(Topology::edge_two_clouds(), cfg, clients, &[], 5)
        .unwrap()
        .run(16_000);
    let v = check(&run.history, CheckKind::Staleness { delta_ms: delta });
    assert!(v.passed, "{:?}", v.counterexample);
    assert!(v.max_staleness_ms.unwrap() > 0);
    assert!(run.stats.first_block.is_empty());
}

#[test]
fn bounded_staleness_blocks_after_isolation() {
    let delta = 10_000;
    let cfg = GroupConfig::new(Consistency::BoundedStaleness { delta_ms: delta }, spread());
    let interval = cfg.ae_interval_ms;
    let clients = vec![
        random_client("edge", 1, 60_000),
        random_client("cloud", 4, 60_000),
    ];
    let (start, end) = (15_000, 45_000);
    let run = GroupSim::new(
        Topology::edge_two_clouds(),
        cfg,
        clients,
        &partition_edge(start, end),
        6,
    )
    .unwrap()
    .run(60_000);
    let edge_block = run.stats.first_block[&NodeId(0)];
    assert!(edge_block >= start + delta - interval, "{edge_block}");
    assert!(edge_block <= start + delta + 20, "{edge_block}");
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
    assert!(blocked_writes > 0);
    let v = check(&run.history, CheckKind::Staleness { delta_ms: delta });
    assert!(v.passed, "{:?}", v.counterexample);
    assert!(
        run.history
            .acked_in(end + 2 * interval, 60_000, |o| o.client == "edge")
            > 0
    );
}

#[test]
fn ryw_holds_through_partition_and_converges() {
    let mut cfg = GroupConfig::new(Consistency::ReadYourWrites, spread());
    cfg.ae_interval_ms = 2_500;
    let script = vec![
        (OpKind::Write, "x".to_string(), Some(json!(1))),
        (OpKind::Read, "x".to_string(), None),
    ];
    let clients = vec![
        random_client("edge", 1, 40_000),
        random_client("cloud", 5, 40_000),
        ClientSpec {
            name: "probe".into(),
            node: NodeId(2),
            start_ms: 12_000,
            think_ms: 5,
            ops: ClientOps::Script(script),
        },
    ];
    let run = GroupSim::new(
        Topology::edge_two_clouds(),
        cfg,
        clients,
        &partition_edge(10_000, 25_000),
        7,
    )
    .unwrap()
    .run(40_000);
    let probe: Vec<_> = run
        .history
        .ops
        .iter()
        .filter(|o| o.client == "probe")
        .collect();
    assert_eq!(probe[1].value, json!(1));
    assert!(check(&run.history, CheckKind::Ryw).passed);
    assert_eq!(run.stats.convergence_rounds.len(), 1);
    // ceil(10 s / 2.5 s) + 1
    assert!(run.stats.convergence_rounds[0] <= 5);
}

#[test]
fn lww_replicas_end_identical_after_heal() {
    let mut cfg = GroupConfig::new(Consistency::ReadYourWrites, spread());
    cfg.ae_interval_ms = 250;
    let clients = vec![
        random_client("edge", 1, 8_000),
        random_client("cloud", 4, 8_000),
    ];
    let mut sim = GroupSim::new(
        Topology::edge_two_clouds(),
        cfg,
        clients,
        &partition_edge(2_000, 6_000),
        8,
    )
    .unwrap();
    sim.run_until(12_000);
    let a = sim.replica(NodeId(0)).unwrap().clone();
    for n in spread() {
        assert_eq!(sim.replica(n).unwrap(), &a);
    }
    // Each key holds the write with the largest stamp seen anywhere.
    for (k, reg) in a.map().iter() {
        let newest = sim
            .history()
            .ops
            .iter()
            .filter(|o| o.ok && o.op == OpKind::Write && &o.key == k)
            .max_by(|x, y| x.version.cmp(&y.version))
            .unwrap();
        assert_eq!(reg.value, newest.value);
    }
}

#[test]
fn runs_are_deterministic() {
    let mk = || {
        let cfg = GroupConfig::new(Consistency::Strong, spread());
        GroupSim::new(
            Topology::edge_two_clouds(),
            cfg,
            vec![random_client("a", 1, 5_000)],
            &[],
            9,
        )
        .unwrap()
        .run(6_000)
    };
    assert_eq!(mk().history.to_jsonl(), mk().history.to_jsonl());
}
