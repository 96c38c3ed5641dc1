mod common;

use common::{assert_passes, bundled, load, run_seed, SEEDS};
use homechain_sim::FlowKind;

#[test]
fn every_bundled_scenario_passes_for_every_seed() {
    let all = bundled();
    assert!(all.len() >= 20, "found {all:?}");
    for rel in &all {
        for seed in SEEDS {
            let w = assert_passes(rel, seed);
            assert!(
                w.report().rows.iter().all(|r| r.complete),
                "{rel} seed {seed} left a flow incomplete"
            );
        }
    }
}

#[test]
fn bundled_runs_are_byte_identical() {
    for rel in bundled() {
        let sc = load(&rel);
        let a = run_seed(&sc, 7);
        let b = run_seed(&sc, 7);
        assert_eq!(a.report().to_csv(), b.report().to_csv(), "{rel}");
        assert_eq!(a.report().to_jsonl(), b.report().to_jsonl(), "{rel}");
        assert_eq!(a.trace_jsonl(), b.trace_jsonl(), "{rel}");
    }
}

#[test]
fn cloud_store_cost_matches_legs() {
    let w = run_seed(&load("store-cloud.toml"), 1);
    let f = w.flows_of(FlowKind::StoreCloud).next().unwrap();
    // device 1 link, then store request, signed hash and reply at S = 2
    assert_eq!(f.packets, 1 + 3 * 2);
    assert_eq!(f.messages("signed_hash", None), 1);
}

#[test]
fn full_chain_access_returns_sealed_handle_after_guard() {
    let w = run_seed(&load("access-full-chain.toml"), 1);
    let f = w.flows_of(FlowKind::Access).next().unwrap();
    let guard = f.hops.iter().position(|h| h.msg == "guard").unwrap();
    let resp = f
        .hops
        .iter()
        .rposition(|h| h.msg == "access_response")
        .unwrap();
    assert!(guard < resp);
    assert_eq!(f.detail.as_deref(), Some("handle"));
}

#[test]
fn empty_workload_has_no_traffic() {
    let sc = homechain_sim::Scenario::from_toml(
        r#"
name = "idle"
[topology]
clusters = 3
"#,
    )
    .unwrap();
    let w = run_seed(&sc, 1);
    assert!(w.report().rows.is_empty());
    assert_eq!(w.total_links, 0);
}

#[test]
fn four_clusters_elect_four_heads() {
    let w = run_seed(&load("store-cloud.toml"), 3);
    assert_eq!(
        w.overlay
            .clusters()
            .iter()
            .filter(|c| c.head().is_some())
            .count(),
        4
    );
}

#[test]
fn zero_clusters_is_a_load_error() {
    let r = homechain_sim::Scenario::from_toml("name = \"x\"\n[topology]\nclusters = 0\n");
    assert!(r.is_err());
}
