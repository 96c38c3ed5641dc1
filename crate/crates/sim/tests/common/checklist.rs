//! Behavioural checklist against a conventional proof-of-work chain.

use std::collections::BTreeMap;

use homechain_core::{BlockHeader, LocalChainError, TxId};
use homechain_sim::World;

use super::{load, run_seed, SEEDS};

type Check = Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn worlds() -> Vec<(String, World)> {
    let mut out = Vec::new();
    for rel in [
        "store-cloud.toml",
        "access-full-chain.toml",
        "shared-group.toml",
        "modification.toml",
    ] {
        for seed in SEEDS {
            out.push((format!("{rel} seed {seed}"), run_seed(&load(rel), seed)));
        }
    }
    out
}

pub fn no_puzzle() -> Check {
    for (name, w) in worlds() {
        let miners = w
            .homes
            .iter()
            .map(|h| &h.miner)
            .chain(w.groups.iter().map(|g| &g.miner));
        for m in miners {
            ensure(m.puzzle_iterations() == 0, || {
                format!("{name}: puzzle work recorded")
            })?;
        }
    }
    Ok(())
}

pub fn forking_allowed() -> Check {
    let mut w = run_seed(&load("scaling/memory.toml"), 1);
    let h = &mut w.homes[0];
    let main = h.miner.chain().main_chain();
    ensure(main.len() >= 2, || format!("only {} blocks", main.len()))?;
    let parent = main[0].id();
    let auth = h.miner.owner_auth(&h.owner.private);
    h.miner
        .fork_block(&auth, parent, Vec::new())
        .map_err(|e| e.to_string())?;
    ensure(!h.miner.chain().fork_points().is_empty(), || {
        "no fork point".into()
    })?;
    h.miner.chain().validate().map_err(|e| e.to_string())
}

pub fn per_device_chaining() -> Check {
    for (name, w) in worlds() {
        for h in &w.homes {
            for d in h.miner.devices() {
                h.miner
                    .verify_ledger(d)
                    .map_err(|e| format!("{name} {}: {e}", h.name))?;
            }
        }
    }
    Ok(())
}

pub fn overlay_mines_arbitrary_txs() -> Check {
    let w = run_seed(&load("modification.toml"), 1);
    let found = w
        .overlay
        .clusters()
        .iter()
        .filter_map(|c| c.head())
        .any(|h| {
            h.chain().blocks().iter().any(|b| {
                b.txs
                    .iter()
                    .any(|tx| tx.signer(0).is_some_and(|s| s != &b.miner))
            })
        });
    ensure(found, || {
        "no overlay block carries a foreign transaction".into()
    })
}

pub fn policy_headers() -> Check {
    for (name, w) in worlds() {
        for h in &w.homes {
            for b in h.miner.chain().all_blocks() {
                ensure(matches!(b.header, BlockHeader::Policy(_)), || {
                    format!("{name}: local block without policy")
                })?;
            }
        }
        for h in w.overlay.clusters().iter().filter_map(|c| c.head()) {
            for b in h.chain().blocks() {
                ensure(matches!(b.header, BlockHeader::TrustMultisig(_)), || {
                    format!("{name}: overlay block without multisig")
                })?;
            }
        }
    }
    Ok(())
}

pub fn stored_blocks() -> Check {
    let mut some_partial = false;
    for (name, w) in worlds() {
        for h in &w.homes {
            ensure(
                h.miner.chain().len() == h.miner.chain().all_blocks().len(),
                || format!("{name}: miner dropped blocks"),
            )?;
        }
        let lens: Vec<usize> = w
            .overlay
            .clusters()
            .iter()
            .filter_map(|c| c.head())
            .map(|h| h.memory_blocks())
            .collect();
        let max = lens.iter().copied().max().unwrap_or(0);
        some_partial |= max > 0 && lens.iter().any(|l| *l < max);
    }
    ensure(some_partial, || {
        "every head stores every overlay block".into()
    })
}

pub fn owner_control() -> Check {
    let mut w = run_seed(&load("store-cloud.toml"), 1);
    let intruder = w.keypair("intruder");
    let h = &mut w.homes[0];
    let d = h.devices[0].clone();
    let forged = h.miner.owner_auth(&intruder.private);
    ensure(
        h.miner.remove_device(&forged, &d) == Err(LocalChainError::NotOwner),
        || "forged removal accepted".into(),
    )?;
    let parent = h.miner.chain().main_chain()[0].id();
    ensure(
        h.miner.fork_block(&forged, parent, Vec::new()) == Err(LocalChainError::NotOwner),
        || "forged fork accepted".into(),
    )?;
    let auth = h.miner.owner_auth(&h.owner.private);
    h.miner
        .remove_device(&auth, &d)
        .map(|_| ())
        .map_err(|e| e.to_string())
}

fn once_each<'a>(blocks: impl Iterator<Item = &'a homechain_core::Block>) -> bool {
    let mut seen: BTreeMap<TxId, usize> = BTreeMap::new();
    for b in blocks {
        for tx in &b.txs {
            *seen.entry(tx.id()).or_default() += 1;
        }
    }
    seen.values().all(|n| *n == 1)
}

pub fn one_block_per_tx() -> Check {
    for (name, w) in worlds() {
        for h in &w.homes {
            ensure(once_each(h.miner.chain().main_chain().into_iter()), || {
                format!("{name}: local tx in two blocks")
            })?;
        }
        for h in w.overlay.clusters().iter().filter_map(|c| c.head()) {
            ensure(once_each(h.chain().blocks().iter()), || {
                format!("{name}: overlay tx in two blocks")
            })?;
        }
    }
    Ok(())
}

pub fn rows() -> Vec<(&'static str, Check)> {
    vec![
        ("row 2 per-device chaining", per_device_chaining()),
        (
            "row 3 overlay mines arbitrary transactions",
            overlay_mines_arbitrary_txs(),
        ),
        ("row 4 no proof of work", no_puzzle()),
        ("row 5 forking allowed", forking_allowed()),
        ("row 10 policy block headers", policy_headers()),
        (
            "row 11 miners keep all blocks, heads keep some",
            stored_blocks(),
        ),
        ("row 13 owner controls the chain", owner_control()),
        (
            "row 16 each transaction in one block per chain",
            one_block_per_tx(),
        ),
    ]
}
