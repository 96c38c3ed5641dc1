//! Per-flow records, metrics rows and traces.

use std::collections::BTreeMap;
use std::fmt;

use homechain_core::NodeId;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    StoreLocal,
    StoreShared,
    StoreCloud,
    /// Shared store by a home of a shared overlay.
    StoreOverlay,
    Access,
    Monitor,
    BreachCheck,
    Mining,
    Join,
    Election,
    DeviceMessage,
    FakeChain,
}

impl FlowKind {
    pub const ALL: [FlowKind; 12] = [
        FlowKind::StoreLocal,
        FlowKind::StoreShared,
        FlowKind::StoreCloud,
        FlowKind::StoreOverlay,
        FlowKind::Access,
        FlowKind::Monitor,
        FlowKind::BreachCheck,
        FlowKind::Mining,
        FlowKind::Join,
        FlowKind::Election,
        FlowKind::DeviceMessage,
        FlowKind::FakeChain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FlowKind::StoreLocal => "store_local",
            FlowKind::StoreShared => "store_shared",
            FlowKind::StoreCloud => "store_cloud",
            FlowKind::StoreOverlay => "store_overlay",
            FlowKind::Access => "access",
            FlowKind::Monitor => "monitor",
            FlowKind::BreachCheck => "breach_check",
            FlowKind::Mining => "mining",
            FlowKind::Join => "join",
            FlowKind::Election => "election",
            FlowKind::DeviceMessage => "device_message",
            FlowKind::FakeChain => "fake_chain",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for FlowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowOutcome {
    Ok,
    Denied,
    Rejected(String),
}

impl fmt::Display for FlowOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlowOutcome::Ok => f.write_str("ok"),
            FlowOutcome::Denied => f.write_str("denied"),
            FlowOutcome::Rejected(r) => write!(f, "rejected({r})"),
        }
    }
}

impl FlowOutcome {
    /// Matches "ok", "denied", "rejected" (any reason) or "rejected(reason)".
    pub fn matches(&self, pattern: &str) -> bool {
        match self {
            FlowOutcome::Rejected(_) if pattern == "rejected" => true,
            other => other.to_string() == pattern,
        }
    }
}

/// One message delivery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hop {
    pub sent: u64,
    pub tick: u64,
    pub from: NodeId,
    pub to: NodeId,
    pub msg: &'static str,
    pub tag: u8,
    pub links: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowRecord {
    pub id: u32,
    pub kind: FlowKind,
    pub start: u64,
    /// Last delivery or completion tick.
    pub end: u64,
    pub packets: u64,
    pub comp_ops: u64,
    pub mem_blocks: u64,
    pub mem_txs: u64,
    pub outcome: Option<FlowOutcome>,
    pub detail: Option<String>,
    pub adversarial: bool,
    pub inflight: u32,
    pub hops: Vec<Hop>,
}

impl FlowRecord {
    pub fn new(id: u32, kind: FlowKind, start: u64, adversarial: bool) -> Self {
        Self {
            id,
            kind,
            start,
            end: start,
            packets: 0,
            comp_ops: 0,
            mem_blocks: 0,
            mem_txs: 0,
            outcome: None,
            detail: None,
            adversarial,
            inflight: 0,
            hops: Vec::new(),
        }
    }

    pub fn delay(&self) -> u64 {
        self.end - self.start
    }

    pub fn complete(&self) -> bool {
        self.outcome.is_some() && self.inflight == 0
    }

    /// Deliveries of `msg`, optionally only those to `to`.
    pub fn messages(&self, msg: &str, to: Option<NodeId>) -> u64 {
        self.hops
            .iter()
            .filter(|h| h.msg == msg && to.is_none_or(|t| t == h.to))
            .count() as u64
    }
}

/// One output row per flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub seed: u64,
    #[serde(rename = "N")]
    pub n: u64,
    #[serde(rename = "S")]
    pub s: u64,
    #[serde(rename = "B")]
    pub b: u64,
    #[serde(rename = "T")]
    pub t: u64,
    #[serde(rename = "BS")]
    pub bs: u64,
    pub flow: String,
    pub packets: u64,
    pub delay: u64,
    pub comp_ops: u64,
    pub mem_blocks: u64,
    pub outcome: String,
}

/// Structured form of a row with the fields the CSV leaves out.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StructuredRow {
    #[serde(flatten)]
    pub row: MetricsRow,
    pub flow_id: u32,
    pub start: u64,
    pub mem_txs: u64,
    pub detail: Option<String>,
    pub complete: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct MetricsReport {
    pub rows: Vec<StructuredRow>,
    pub counters: BTreeMap<String, u64>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(&r.row).expect("rows serialize");
        }
        if self.rows.is_empty() {
            w.write_record([
                "scenario",
                "seed",
                "N",
                "S",
                "B",
                "T",
                "BS",
                "flow",
                "packets",
                "delay",
                "comp_ops",
                "mem_blocks",
                "outcome",
            ])
            .expect("header writes");
        }
        String::from_utf8(w.into_inner().expect("flushes")).expect("utf8")
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r).expect("rows serialize"));
            out.push('\n');
        }
        let summary = serde_json::json!({ "counters": self.counters });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }

    pub fn append(&mut self, other: MetricsReport) {
        self.rows.extend(other.rows);
        for (k, v) in other.counters {
            *self.counters.entry(k).or_default() += v;
        }
    }
}

/// Trace line for one delivery.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceLine {
    pub flow: u32,
    pub kind: String,
    pub sent: u64,
    pub tick: u64,
    pub from: String,
    pub to: String,
    pub msg: String,
    pub tag: u8,
    pub links: u32,
}
