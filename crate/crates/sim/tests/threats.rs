mod common;

use common::{assert_passes, load, run_seed, SEEDS};
use homechain_sim::trials::{hypergeometric_detection, CollusionBench, Evidence};
use homechain_sim::{FlowKind, FlowOutcome};

#[test]
fn dos_fixed_key_is_blocked_after_three_denials() {
    for seed in SEEDS {
        let w = assert_passes("dos-fixed-pk.toml", seed);
        let outcomes: Vec<_> = w
            .flows
            .iter()
            .filter(|f| f.kind == FlowKind::Access)
            .map(|f| f.outcome.clone())
            .collect();
        assert!(outcomes[..3]
            .iter()
            .all(|o| *o == Some(FlowOutcome::Denied)));
        assert!(outcomes[3..]
            .iter()
            .all(|o| matches!(o, Some(FlowOutcome::Rejected(r)) if r == "blocked")));
    }
}

#[test]
fn dos_rotating_keys_are_never_blocked() {
    for seed in SEEDS {
        let w = assert_passes("dos-rotating-pk.toml", seed);
        assert_eq!(w.counter("dropped_blocked"), 0);
        assert!(w
            .flows
            .iter()
            .all(|f| f.outcome == Some(FlowOutcome::Denied)));
    }
}

#[test]
fn modification_is_always_detected() {
    for seed in SEEDS {
        assert_passes("modification.toml", seed);
    }
}

#[test]
fn clean_breach_checks_never_report() {
    let mut sc = load("modification.toml");
    sc.adversary.clear();
    sc.asserts.clear();
    for seed in 0..1000 {
        let w = run_seed(&sc, seed);
        let f = w.flows_of(FlowKind::BreachCheck).next().unwrap();
        assert_eq!(f.detail.as_deref(), Some("breach=clean"), "seed {seed}");
        assert_eq!(w.counter("false_breach_reports"), 0, "seed {seed}");
        assert_eq!(f.messages("breach_report", None), 0, "seed {seed}");
    }
}

#[test]
fn dropping_head_is_replaced_and_flows_recover() {
    for seed in SEEDS {
        let w = assert_passes("dropping-ch.toml", seed);
        let e = w.elections.iter().find(|e| e.new_ch.is_some()).unwrap();
        let window = w.scenario.topology.ack_window;
        assert!(e.tick - e.unanswered_since <= window + 1);
        let after: Vec<_> = w
            .flows_of(FlowKind::Access)
            .filter(|f| f.start > e.tick)
            .collect();
        assert!(!after.is_empty());
        assert!(after.iter().all(|f| f.outcome == Some(FlowOutcome::Ok)));
    }
}

#[test]
fn collusion_with_a_fresh_head_is_always_caught() {
    for seed in SEEDS {
        assert_passes("mining-collusion.toml", seed);
    }
    let bench = CollusionBench::new(0.1);
    assert_eq!(bench.detection_rate(20, 1, Evidence::NONE, 1000, 3), 1.0);
}

#[test]
fn collusion_against_trusting_heads_follows_closed_form() {
    let bench = CollusionBench::new(0.1);
    let ev = Evidence { pos: 2, neg: 0 };
    let rate = bench.detection_rate(20, 1, ev, 10_000, 42);
    let expect = hypergeometric_detection(20, 1, 5);
    assert!((rate - expect).abs() <= 0.02, "rate {rate} vs {expect}");
}

#[test]
fn fake_provider_chain_is_refused() {
    for seed in SEEDS {
        let w = assert_passes("fake-sp-chain.toml", seed);
        assert_eq!(w.counter("fake_chain_rejected"), 1);
        assert_eq!(w.counter("fake_chain_no_handle"), 0);
    }
}

#[test]
fn rogue_device_is_refused() {
    for seed in SEEDS {
        assert_passes("rogue-device.toml", seed);
    }
}
