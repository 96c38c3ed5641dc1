//! Parameter sweeps and log-log slope fits.

use serde::Serialize;

use crate::error::SimError;
use crate::metrics::{FlowKind, MetricsReport};
use crate::scenario::{Scenario, SweepParam};
use crate::world::World;

/// Run a scenario to completion.
pub fn run(scenario: &Scenario) -> Result<World, SimError> {
    let mut w = World::new(scenario.clone())?;
    w.run();
    Ok(w)
}

/// Run one copy of `base` per value, for each seed, and concatenate the reports.
pub fn sweep(
    base: &Scenario,
    param: SweepParam,
    values: &[u64],
    seeds: &[u64],
) -> Result<MetricsReport, SimError> {
    let mut out = MetricsReport::default();
    for &v in values {
        for &seed in seeds {
            let mut sc = base.with_param(param, v)?;
            sc.seed = seed;
            out.append(run(&sc)?.report());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Metric {
    Packets,
    Delay,
    CompOps,
    MemBlocks,
    MemTxs,
}

impl Metric {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "packets" => Some(Metric::Packets),
            "delay" => Some(Metric::Delay),
            "comp_ops" => Some(Metric::CompOps),
            "mem_blocks" => Some(Metric::MemBlocks),
            "mem_txs" => Some(Metric::MemTxs),
            _ => None,
        }
    }
}

/// Mean of `metric` over complete, non-adversarial flows of `kind` in `report`
/// for each value of `param`.
pub fn series(
    report: &MetricsReport,
    param: SweepParam,
    kind: FlowKind,
    metric: Metric,
) -> Vec<(f64, f64)> {
    let mut acc: std::collections::BTreeMap<u64, (f64, u64)> = Default::default();
    for r in report
        .rows
        .iter()
        .filter(|r| r.complete && r.row.flow == kind.name())
    {
        let x = match param {
            SweepParam::N => r.row.n,
            SweepParam::S => r.row.s,
            SweepParam::B => r.row.b,
            SweepParam::T => r.row.t,
            SweepParam::BS => r.row.bs,
        };
        let y = match metric {
            Metric::Packets => r.row.packets,
            Metric::Delay => r.row.delay,
            Metric::CompOps => r.row.comp_ops,
            Metric::MemBlocks => r.row.mem_blocks,
            Metric::MemTxs => r.mem_txs,
        } as f64;
        let e = acc.entry(x).or_default();
        e.0 += y;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(x, (s, n))| (x as f64, s / n as f64))
        .collect()
}

/// Least-squares slope of ln(y) against ln(x). Points with a non-positive
/// coordinate are skipped; `None` if fewer than two remain.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

/// Flow kind a sweep is reported on: the first workload's flow.
pub fn primary_kind(sc: &Scenario) -> Option<FlowKind> {
    use crate::scenario::WorkloadSpec as W;
    sc.workload.first().map(|w| match w {
        W::Store { target, home, .. } => match target {
            homechain_core::StorageKind::Local => FlowKind::StoreLocal,
            homechain_core::StorageKind::Shared
                if sc
                    .topology
                    .shared_groups
                    .iter()
                    .any(|g| g.homes.contains(home)) =>
            {
                FlowKind::StoreOverlay
            }
            homechain_core::StorageKind::Shared => FlowKind::StoreShared,
            homechain_core::StorageKind::Cloud => FlowKind::StoreCloud,
        },
        W::Access { .. } => FlowKind::Access,
        W::Monitor { .. } => FlowKind::Monitor,
        W::BreachCheck { .. } => FlowKind::BreachCheck,
        W::Mine { .. } => FlowKind::Mining,
        W::Join { .. } => FlowKind::Join,
        W::DeviceMessage { .. } => FlowKind::DeviceMessage,
    })
}
