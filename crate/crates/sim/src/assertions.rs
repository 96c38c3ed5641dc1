//! Evaluate a scenario's `[[assert]]` entries against a finished world.

use serde::Serialize;

use homechain_core::DeviceId;

use crate::metrics::{FlowKind, FlowRecord};
use crate::scenario::AssertSpec;
use crate::world::{Ctx, World};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AssertionResult {
    pub description: String,
    pub passed: bool,
    pub detail: String,
}

impl AssertionResult {
    fn new(description: String, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            description,
            passed,
            detail: detail.into(),
        }
    }
}

fn nth<'a>(world: &'a World, flow: &str, index: usize) -> Option<&'a FlowRecord> {
    let kind = FlowKind::parse(flow)?;
    world.flows_of(kind).nth(index)
}

pub fn check_all(world: &World) -> Vec<AssertionResult> {
    world
        .scenario
        .asserts
        .iter()
        .map(|a| check(world, a))
        .collect()
}

pub fn check(world: &World, a: &AssertSpec) -> AssertionResult {
    match a {
        AssertSpec::Outcome {
            flow,
            index,
            outcome,
            detail,
            after,
        } => {
            let desc = format!(
                "{flow}{} outcome {outcome}{}",
                index.map(|i| format!("[{i}]")).unwrap_or_default(),
                detail
                    .as_ref()
                    .map(|d| format!(" ({d})"))
                    .unwrap_or_default()
            );
            let kind = FlowKind::parse(flow).expect("validated flow kind");
            let flows: Vec<&FlowRecord> = world
                .flows_of(kind)
                .enumerate()
                .filter(|(i, _)| index.is_none_or(|x| x == *i))
                .map(|(_, f)| f)
                .filter(|f| after.is_none_or(|t| f.start >= t))
                .collect();
            if flows.is_empty() {
                return AssertionResult::new(desc, false, "no matching flow");
            }
            let bad: Vec<String> = flows
                .iter()
                .filter(|f| {
                    let o = f.outcome.as_ref().is_some_and(|o| o.matches(outcome)) && f.complete();
                    let d = detail
                        .as_ref()
                        .is_none_or(|d| f.detail.as_deref() == Some(d.as_str()));
                    !(o && d)
                })
                .map(|f| {
                    format!(
                        "flow {} got {}{}",
                        f.id,
                        f.outcome
                            .as_ref()
                            .map_or("incomplete".to_string(), |o| o.to_string()),
                        f.detail
                            .as_ref()
                            .map(|d| format!(" ({d})"))
                            .unwrap_or_default()
                    )
                })
                .collect();
            AssertionResult::new(
                desc,
                bad.is_empty(),
                if bad.is_empty() {
                    format!("{} flow(s)", flows.len())
                } else {
                    bad.join("; ")
                },
            )
        }
        AssertSpec::Messages {
            flow,
            index,
            message,
            to,
            equals,
        } => {
            let desc = format!(
                "{flow}[{index}] {message} messages{} == {equals}",
                to.as_ref().map(|t| format!(" to {t}")).unwrap_or_default()
            );
            let Some(f) = nth(world, flow, *index) else {
                return AssertionResult::new(desc, false, "no such flow");
            };
            let node = match to {
                Some(name) => match world.node_by_name(name) {
                    Some(n) => Some(n),
                    None => {
                        return AssertionResult::new(desc, false, format!("unknown node {name}"))
                    }
                },
                None => None,
            };
            let got = f.messages(message, node);
            AssertionResult::new(desc, got == *equals, format!("got {got}"))
        }
        AssertSpec::Packets {
            flow,
            index,
            equals,
        } => {
            let desc = format!("{flow}[{index}] packets == {equals}");
            match nth(world, flow, *index) {
                Some(f) => {
                    AssertionResult::new(desc, f.packets == *equals, format!("got {}", f.packets))
                }
                None => AssertionResult::new(desc, false, "no such flow"),
            }
        }
        AssertSpec::Blocked {
            cluster,
            requester,
            blocked,
        } => {
            let desc = format!("requester {requester} blocked at cluster {cluster} == {blocked}");
            let c = world.cluster(*cluster);
            let Some(ri) = world.requester_index(requester) else {
                return AssertionResult::new(desc, false, "unknown requester");
            };
            let got = world
                .overlay
                .head(c)
                .is_some_and(|h| h.is_blocked(world.requester_pk(ri)));
            AssertionResult::new(desc, got == *blocked, format!("got {got}"))
        }
        AssertSpec::StorageFlagged { storage, min_chs } => {
            let desc = format!("storage {storage} flagged by at least {min_chs} CH(s)");
            let Some(si) = world.storage_index(storage) else {
                return AssertionResult::new(desc, false, "unknown storage");
            };
            let pk = world.storages[si].store.public_key();
            let n = world
                .overlay
                .clusters()
                .iter()
                .filter(|c| c.head().is_some_and(|h| h.flagged_storages().contains(pk)))
                .count();
            AssertionResult::new(desc, n >= *min_chs, format!("flagged by {n}"))
        }
        AssertSpec::Reelected { cluster, within } => {
            let c = world.cluster(*cluster);
            let desc = format!(
                "cluster {} re-elected its CH{}",
                c.0,
                within
                    .map(|w| format!(" within {w} ticks"))
                    .unwrap_or_default()
            );
            match world
                .elections
                .iter()
                .find(|e| e.cluster == c && e.new_ch.is_some())
            {
                Some(e) => {
                    let took = e.tick - e.unanswered_since;
                    let ok = within.is_none_or(|w| took <= w);
                    AssertionResult::new(
                        desc,
                        ok,
                        format!("elected at tick {} after {took} ticks", e.tick),
                    )
                }
                None => AssertionResult::new(desc, false, "no election"),
            }
        }
        AssertSpec::Counter {
            name,
            equals,
            min,
            max,
        } => {
            let got = world.report().counters.get(name).copied().unwrap_or(0);
            let desc = format!(
                "counter {name}{}{}{}",
                equals.map(|v| format!(" == {v}")).unwrap_or_default(),
                min.map(|v| format!(" >= {v}")).unwrap_or_default(),
                max.map(|v| format!(" <= {v}")).unwrap_or_default()
            );
            let ok = equals.is_none_or(|v| got == v)
                && min.is_none_or(|v| got >= v)
                && max.is_none_or(|v| got <= v);
            AssertionResult::new(desc, ok, format!("got {got}"))
        }
        AssertSpec::HomeCluster { home, cluster } => {
            let c = world.cluster(*cluster);
            let desc = format!("home {home} in cluster {}", c.0);
            match world.home_index(home) {
                Some(hi) => {
                    let got = world.homes[hi].cluster;
                    AssertionResult::new(desc, got == c, format!("in cluster {}", got.0))
                }
                None => AssertionResult::new(desc, false, "unknown home"),
            }
        }
        AssertSpec::BlockDiscarded { index } => {
            let desc = format!("mining[{index}] block discarded by every honest CH");
            let Some(f) = world.flows_of(FlowKind::Mining).nth(*index) else {
                return AssertionResult::new(desc, false, "no such flow");
            };
            let Some(Ctx::Mining {
                block, colluders, ..
            }) = world.ctx.get(&f.id)
            else {
                return AssertionResult::new(desc, false, "no mining context");
            };
            let honest: Vec<_> = world
                .overlay
                .clusters()
                .iter()
                .filter(|c| !colluders.contains(&c.id))
                .filter_map(|c| c.head().map(|h| (c.id, h)))
                .collect();
            let holding: Vec<String> = honest
                .iter()
                .filter(|(_, h)| h.chain().contains(block))
                .map(|(c, _)| c.0.to_string())
                .collect();
            let discarded = honest.iter().filter(|(_, h)| h.is_discarded(block)).count();
            let ok = holding.is_empty() && discarded > 0;
            AssertionResult::new(
                desc,
                ok,
                format!(
                    "discarded by {discarded}, still held by [{}]",
                    holding.join(",")
                ),
            )
        }
        AssertSpec::SharedTable { group, entries } => {
            let desc = format!("shared table of {group} has {entries} entries");
            match world.groups.iter().find(|g| &g.name == group) {
                Some(g) => AssertionResult::new(
                    desc,
                    g.table.len() == *entries,
                    format!("got {}", g.table.len()),
                ),
                None => AssertionResult::new(desc, false, "unknown group"),
            }
        }
        AssertSpec::Unrecoverable { home, device } => {
            let desc = format!("{home}/{device} marked unrecoverable");
            match world.home_index(home) {
                Some(hi) => {
                    let got = world.homes[hi]
                        .unrecoverable
                        .contains(&DeviceId::new(device));
                    AssertionResult::new(desc, got, format!("got {got}"))
                }
                None => AssertionResult::new(desc, false, "unknown home"),
            }
        }
    }
}
