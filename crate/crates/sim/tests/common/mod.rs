#![allow(dead_code)]

use std::path::PathBuf;

use homechain_sim::{assertions::check_all, scaling, Scenario, World};

pub const SEEDS: [u64; 10] = [1, 2, 3, 5, 8, 13, 21, 34, 55, 89];

pub fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn load(rel: &str) -> Scenario {
    Scenario::load(&scenario_dir().join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

pub fn bundled() -> Vec<String> {
    let mut out = Vec::new();
    for dir in ["", "scaling"] {
        let d = scenario_dir().join(dir);
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.extension().is_some_and(|x| x == "toml") {
                out.push(
                    p.strip_prefix(scenario_dir())
                        .unwrap()
                        .to_string_lossy()
                        .into_owned(),
                );
            }
        }
    }
    out.sort();
    out
}

pub fn run_seed(sc: &Scenario, seed: u64) -> World {
    let mut sc = sc.clone();
    sc.seed = seed;
    scaling::run(&sc).unwrap()
}

/// Run with `seed` and panic with every failing assertion.
pub fn assert_passes(rel: &str, seed: u64) -> World {
    let w = run_seed(&load(rel), seed);
    let failed: Vec<String> = check_all(&w)
        .into_iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} [{}]", r.description, r.detail))
        .collect();
    assert!(failed.is_empty(), "{rel} seed {seed}: {failed:#?}");
    w
}
pub mod checklist;
