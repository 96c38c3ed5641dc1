//! Scenario files: topology, policies, workloads, adversaries and assertions.

use std::collections::BTreeSet;
use std::path::Path;

use homechain_core::{AccessScope, Action, PrivacyLevel, StorageKind};
use serde::{Deserialize, Serialize};

use crate::error::SimError;

fn one() -> u32 {
    1
}

fn one_u64() -> u64 {
    1
}

fn yes() -> bool {
    true
}

fn default_max_ticks() -> u64 {
    10_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_ticks")]
    pub max_ticks: u64,
    pub topology: TopologySpec,
    #[serde(default)]
    pub policy: Vec<PolicySpec>,
    #[serde(default)]
    pub workload: Vec<WorkloadSpec>,
    #[serde(default)]
    pub adversary: Vec<AdversarySpec>,
    #[serde(default, rename = "assert")]
    pub asserts: Vec<AssertSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CryptoChoice {
    #[default]
    Sim,
    Standard,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub clusters: u32,
    #[serde(default = "TopologySpec::d_relays")]
    pub relays_per_cluster: u32,
    /// Link traversals per overlay leg.
    #[serde(default = "one")]
    pub s: u32,
    /// Ticks per link traversal.
    #[serde(default = "one_u64")]
    pub link_delay: u64,
    /// Transactions per local block.
    #[serde(default = "TopologySpec::d_block")]
    pub block_size: usize,
    /// Transactions per overlay block.
    #[serde(default = "TopologySpec::d_block")]
    pub overlay_block_size: usize,
    #[serde(default = "yes")]
    pub auto_mine: bool,
    #[serde(default)]
    pub crypto: CryptoChoice,
    #[serde(default = "TopologySpec::d_ack")]
    pub ack_window: u64,
    /// Excess delay, in hops, that makes a home change cluster.
    #[serde(default = "TopologySpec::d_change")]
    pub change_threshold: u64,
    #[serde(default = "TopologySpec::d_fail")]
    pub failure_threshold: u32,
    #[serde(default = "TopologySpec::d_epoch")]
    pub epoch_ticks: u64,
    #[serde(default = "TopologySpec::d_fanout")]
    pub proof_fanout: usize,
    /// CHs a breach report is sent to.
    #[serde(default = "TopologySpec::d_fanout")]
    pub breach_fanout: usize,
    #[serde(default = "TopologySpec::d_bound")]
    pub forward_bound: usize,
    #[serde(default = "TopologySpec::d_window")]
    pub window_blocks: usize,
    #[serde(default = "TopologySpec::d_fmin")]
    pub f_min: f64,
    #[serde(default = "TopologySpec::d_w")]
    pub indirect_weight: f64,
    /// Per-cluster delay multiplier; missing entries are 1.
    #[serde(default)]
    pub delay_factors: Vec<u64>,
    #[serde(default)]
    pub homes: Vec<HomeSpec>,
    #[serde(default)]
    pub storages: Vec<StorageSpec>,
    #[serde(default)]
    pub requesters: Vec<RequesterSpec>,
    #[serde(default)]
    pub shared_groups: Vec<SharedGroupSpec>,
    /// Extra one-device homes added to every cluster.
    #[serde(default)]
    pub filler_homes: usize,
    /// Requesters every filler home grants windowed access.
    #[serde(default)]
    pub filler_grants: Vec<String>,
}

impl TopologySpec {
    fn d_relays() -> u32 {
        3
    }
    fn d_block() -> usize {
        5
    }
    fn d_ack() -> u64 {
        20
    }
    fn d_change() -> u64 {
        4
    }
    fn d_fail() -> u32 {
        3
    }
    fn d_epoch() -> u64 {
        100
    }
    fn d_fanout() -> usize {
        2
    }
    fn d_bound() -> usize {
        256
    }
    fn d_window() -> usize {
        1
    }
    fn d_fmin() -> f64 {
        0.1
    }
    fn d_w() -> f64 {
        0.5
    }

    pub fn delay_factor(&self, cluster: u32) -> u64 {
        self.delay_factors
            .get(cluster as usize)
            .copied()
            .unwrap_or(1)
            .max(1)
    }

    /// Resolve a possibly negative cluster index.
    pub fn cluster_index(&self, c: i64) -> Option<u32> {
        let n = self.clusters as i64;
        let i = if c < 0 { n + c } else { c };
        (0..n).contains(&i).then_some(i as u32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LedgerMode {
    /// One storage account per device.
    #[default]
    PerDevice,
    /// One storage account shared by all devices of the home.
    Common,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomeSpec {
    pub name: String,
    pub cluster: i64,
    pub devices: Vec<String>,
    /// Label of the miner key; defaults to the home name.
    #[serde(default)]
    pub key: Option<String>,
    #[serde(default)]
    pub owner_key: Option<String>,
    #[serde(default)]
    pub cloud: Option<String>,
    #[serde(default)]
    pub shared: Option<String>,
    #[serde(default)]
    pub ledger: LedgerMode,
    /// What each device may do on itself.
    #[serde(default = "HomeSpec::d_actions")]
    pub device_actions: Vec<Action>,
    #[serde(default)]
    pub offline: Vec<String>,
    /// Device pairs given a direct key.
    #[serde(default)]
    pub device_keys: Vec<[String; 2]>,
}

impl HomeSpec {
    fn d_actions() -> Vec<Action> {
        vec![
            Action::StoreLocal,
            Action::StoreShared,
            Action::StoreCloud,
            Action::DeviceToDevice,
        ]
    }

    pub fn miner_label(&self) -> String {
        self.key.clone().unwrap_or_else(|| self.name.clone())
    }

    pub fn owner_label(&self) -> String {
        self.owner_key
            .clone()
            .unwrap_or_else(|| format!("{}-owner", self.name))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageSpec {
    pub name: String,
    pub kind: StorageKind,
    #[serde(default)]
    pub cluster: i64,
    #[serde(default = "StorageSpec::d_capacity")]
    pub capacity: usize,
    #[serde(default)]
    pub key: Option<String>,
}

impl StorageSpec {
    fn d_capacity() -> usize {
        1024
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequesterSpec {
    pub name: String,
    pub cluster: i64,
    #[serde(default)]
    pub key: Option<String>,
    /// Act with the owner key of this home.
    #[serde(default)]
    pub owner_of: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharedGroupSpec {
    pub name: String,
    pub cluster: i64,
    pub homes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub home: String,
    pub device: String,
    /// Requester name.
    #[serde(default)]
    pub subject: Option<String>,
    /// Device of the same home.
    #[serde(default)]
    pub subject_device: Option<String>,
    pub actions: Vec<Action>,
    #[serde(default = "PolicySpec::d_level")]
    pub level: PrivacyLevel,
    #[serde(default)]
    pub transform: Option<String>,
    #[serde(default = "yes")]
    pub disclose_proof: bool,
    /// Tick at which the rule is installed; 0 means at setup.
    #[serde(default)]
    pub at: u64,
}

impl PolicySpec {
    fn d_level() -> PrivacyLevel {
        PrivacyLevel::Minimal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JoinSource {
    /// Every block of a home chain.
    #[default]
    Local,
    /// A subset of a CH's overlay view.
    Overlay,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "flow", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadSpec {
    Store {
        #[serde(default)]
        at: u64,
        home: String,
        device: String,
        target: StorageKind,
        #[serde(default)]
        data: Option<String>,
        #[serde(default = "one")]
        repeat: u32,
        #[serde(default = "one_u64")]
        every: u64,
        /// Repeat enough times to fill this many local blocks.
        #[serde(default)]
        repeat_blocks: Option<u32>,
    },
    Access {
        #[serde(default)]
        at: u64,
        requester: String,
        home: String,
        device: String,
        #[serde(default = "WorkloadSpec::d_scope")]
        scope: AccessScope,
        /// Storage whose chain is disclosed; defaults to cloud if the home has one.
        #[serde(default)]
        target: Option<StorageKind>,
        #[serde(default = "one")]
        repeat: u32,
        #[serde(default = "one_u64")]
        every: u64,
    },
    Monitor {
        #[serde(default)]
        at: u64,
        requester: String,
        home: String,
        device: String,
        /// Readings streamed after the first one.
        #[serde(default)]
        continuous: u64,
        #[serde(default = "one")]
        repeat: u32,
        #[serde(default = "one_u64")]
        every: u64,
    },
    BreachCheck {
        #[serde(default)]
        at: u64,
        home: String,
        device: String,
        #[serde(default = "one")]
        repeat: u32,
        #[serde(default = "one_u64")]
        every: u64,
    },
    Mine {
        #[serde(default)]
        at: u64,
        cluster: i64,
        txs: usize,
        #[serde(default = "one")]
        repeat: u32,
        #[serde(default = "one_u64")]
        every: u64,
    },
    Join {
        #[serde(default)]
        at: u64,
        home: String,
        blocks: usize,
        txs_per_block: usize,
        #[serde(default)]
        source: JoinSource,
    },
    DeviceMessage {
        #[serde(default)]
        at: u64,
        home: String,
        from: String,
        to: String,
    },
}

impl WorkloadSpec {
    fn d_scope() -> AccessScope {
        AccessScope::FullChain
    }

    pub fn at(&self) -> u64 {
        match self {
            WorkloadSpec::Store { at, .. }
            | WorkloadSpec::Access { at, .. }
            | WorkloadSpec::Monitor { at, .. }
            | WorkloadSpec::BreachCheck { at, .. }
            | WorkloadSpec::Mine { at, .. }
            | WorkloadSpec::Join { at, .. }
            | WorkloadSpec::DeviceMessage { at, .. } => *at,
        }
    }

    /// (repetitions, spacing)
    pub fn schedule(&self, block_size: usize) -> (u32, u64) {
        match self {
            WorkloadSpec::Store {
                repeat,
                every,
                repeat_blocks,
                ..
            } => match repeat_blocks {
                Some(b) => (b * block_size as u32, *every),
                None => (*repeat, *every),
            },
            WorkloadSpec::Access { repeat, every, .. }
            | WorkloadSpec::Monitor { repeat, every, .. }
            | WorkloadSpec::BreachCheck { repeat, every, .. }
            | WorkloadSpec::Mine { repeat, every, .. } => (*repeat, *every),
            WorkloadSpec::Join { .. } | WorkloadSpec::DeviceMessage { .. } => (1, 1),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdversarySpec {
    /// Unauthorized access requests sent at a fixed rate.
    DosFlood {
        #[serde(default)]
        at: u64,
        requester: String,
        home: String,
        device: String,
        count: u32,
        #[serde(default = "one_u64")]
        every: u64,
        /// Sign each request with a fresh key.
        #[serde(default)]
        rotate_pk: bool,
    },
    /// Cloud storage alters the newest data block of a device.
    Modification {
        at: u64,
        storage: String,
        home: String,
        device: String,
    },
    /// The CH of a cluster silently drops everything from `at` on.
    DroppingCh {
        #[serde(default)]
        at: u64,
        cluster: i64,
    },
    /// A miner CH and its cosigner publish a block with forged transactions.
    MiningCollusion {
        at: u64,
        miner_cluster: i64,
        txs: usize,
        bad: usize,
        /// Prior direct evidence every honest CH holds about the colluders.
        #[serde(default)]
        prior_pos: u64,
        #[serde(default)]
        prior_neg: u64,
        /// An honest CH that has no prior evidence.
        #[serde(default)]
        fresh_cluster: Option<i64>,
    },
    /// A requester that learned a chain handle tries to append to it.
    FakeSpChain {
        at: u64,
        requester: String,
        home: String,
        device: String,
    },
    /// A device that was never enrolled tries to store data.
    RogueDevice {
        at: u64,
        home: String,
        device: String,
        #[serde(default = "one")]
        attempts: u32,
    },
}

impl AdversarySpec {
    pub fn at(&self) -> u64 {
        match self {
            AdversarySpec::DosFlood { at, .. }
            | AdversarySpec::Modification { at, .. }
            | AdversarySpec::DroppingCh { at, .. }
            | AdversarySpec::MiningCollusion { at, .. }
            | AdversarySpec::FakeSpChain { at, .. }
            | AdversarySpec::RogueDevice { at, .. } => *at,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AssertSpec {
    /// Flows of a kind end with an outcome, optionally with a detail.
    Outcome {
        flow: String,
        /// Position among flows of this kind; all of them if absent.
        #[serde(default)]
        index: Option<usize>,
        outcome: String,
        #[serde(default)]
        detail: Option<String>,
        /// Only flows started at or after this tick.
        #[serde(default)]
        after: Option<u64>,
    },
    /// Exact message counts for one flow, by message name.
    Messages {
        flow: String,
        #[serde(default)]
        index: usize,
        message: String,
        #[serde(default)]
        to: Option<String>,
        equals: u64,
    },
    Packets {
        flow: String,
        #[serde(default)]
        index: usize,
        equals: u64,
    },
    Blocked {
        cluster: i64,
        requester: String,
        #[serde(default = "yes")]
        blocked: bool,
    },
    StorageFlagged {
        storage: String,
        #[serde(default = "one_usize")]
        min_chs: usize,
    },
    Reelected {
        cluster: i64,
        /// Ticks between the first unanswered request and the election.
        #[serde(default)]
        within: Option<u64>,
    },
    Counter {
        name: String,
        #[serde(default)]
        equals: Option<u64>,
        #[serde(default)]
        min: Option<u64>,
        #[serde(default)]
        max: Option<u64>,
    },
    /// A home sits in the given cluster at the end of the run.
    HomeCluster {
        home: String,
        cluster: i64,
    },
    /// Every CH discarded the given mining flow's block.
    BlockDiscarded {
        #[serde(default)]
        index: usize,
    },
    SharedTable {
        group: String,
        entries: usize,
    },
    Unrecoverable {
        home: String,
        device: String,
    },
}

fn one_usize() -> usize {
    1
}

/// Parameters a sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SweepParam {
    N,
    S,
    B,
    T,
    BS,
}

impl std::str::FromStr for SweepParam {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "N" => Ok(SweepParam::N),
            "S" => Ok(SweepParam::S),
            "B" => Ok(SweepParam::B),
            "T" => Ok(SweepParam::T),
            "BS" => Ok(SweepParam::BS),
            other => Err(SimError::Input(format!(
                "unknown sweep parameter {other:?}; expected one of N, S, B, T, BS"
            ))),
        }
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SweepParam::N => "N",
            SweepParam::S => "S",
            SweepParam::B => "B",
            SweepParam::T => "T",
            SweepParam::BS => "BS",
        };
        f.write_str(s)
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let sc: Scenario = toml::from_str(text).map_err(|e| {
            let at = e
                .span()
                .map(|sp| {
                    let line = text[..sp.start].matches('\n').count() + 1;
                    let col = sp.start - text[..sp.start].rfind('\n').map_or(0, |i| i + 1) + 1;
                    format!(" at line {line}, column {col}")
                })
                .unwrap_or_default();
            SimError::Input(format!("{}{at}", e.message()))
        })?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Input(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            SimError::Input(m) => SimError::Input(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// B: blocks of the first join or filling workload.
    pub fn b(&self) -> usize {
        self.workload
            .iter()
            .find_map(|w| match w {
                WorkloadSpec::Join { blocks, .. } => Some(*blocks),
                WorkloadSpec::Store {
                    repeat_blocks: Some(b),
                    ..
                } => Some(*b as usize),
                _ => None,
            })
            .unwrap_or(0)
    }

    /// T: transactions per overlay block, or per joined block.
    pub fn t(&self) -> usize {
        self.workload
            .iter()
            .find_map(|w| match w {
                WorkloadSpec::Mine { txs, .. } => Some(*txs),
                WorkloadSpec::Join { txs_per_block, .. } => Some(*txs_per_block),
                _ => None,
            })
            .unwrap_or(self.topology.overlay_block_size)
    }

    /// Copy with one sweep parameter set to `value`.
    pub fn with_param(&self, param: SweepParam, value: u64) -> Result<Self, SimError> {
        if value == 0 {
            return Err(SimError::Input(format!("{param} must be positive")));
        }
        let mut sc = self.clone();
        let v = value as usize;
        match param {
            SweepParam::N => sc.topology.clusters = value as u32,
            SweepParam::S => sc.topology.s = value as u32,
            SweepParam::BS => sc.topology.block_size = v,
            SweepParam::B => {
                for w in &mut sc.workload {
                    match w {
                        WorkloadSpec::Join { blocks, .. } => *blocks = v,
                        WorkloadSpec::Store {
                            repeat_blocks: Some(b),
                            ..
                        } => *b = value as u32,
                        _ => {}
                    }
                }
            }
            SweepParam::T => {
                for w in &mut sc.workload {
                    match w {
                        WorkloadSpec::Mine { txs, .. } => *txs = v,
                        WorkloadSpec::Join { txs_per_block, .. } => *txs_per_block = v,
                        _ => {}
                    }
                }
            }
        }
        sc.validate()?;
        Ok(sc)
    }

    /// Reference checks that the schema alone cannot express.
    pub fn validate(&self) -> Result<(), SimError> {
        let t = &self.topology;
        let bad = |m: String| Err(SimError::Input(m));
        if t.clusters == 0 {
            return bad("topology.clusters must be at least 1".into());
        }
        if t.relays_per_cluster == 0 {
            return bad("topology.relays_per_cluster must be at least 1".into());
        }
        if t.s == 0 || t.link_delay == 0 || t.block_size == 0 || t.overlay_block_size == 0 {
            return bad(
                "topology.s, link_delay, block_size and overlay_block_size must be positive".into(),
            );
        }
        if !(0.0..=1.0).contains(&t.f_min) || !(0.0..=1.0).contains(&t.indirect_weight) {
            return bad("topology.f_min and indirect_weight must lie in [0, 1]".into());
        }
        let max_factor = (0..t.clusters)
            .map(|c| t.delay_factor(c))
            .max()
            .unwrap_or(1);
        let rtt = 2 * t.s as u64 * t.link_delay * max_factor;
        if t.ack_window <= rtt {
            return bad(format!(
                "topology.ack_window {} must exceed the slowest request round trip of {rtt} ticks",
                t.ack_window
            ));
        }
        let cluster = |what: &str, c: i64| -> Result<u32, SimError> {
            t.cluster_index(c).ok_or_else(|| {
                SimError::Input(format!(
                    "{what}: cluster {c} out of range for {} clusters",
                    t.clusters
                ))
            })
        };
        let mut names = BTreeSet::new();
        let mut unique = |n: &str| -> Result<(), SimError> {
            if names.insert(n.to_string()) {
                Ok(())
            } else {
                Err(SimError::Input(format!("duplicate node name {n:?}")))
            }
        };
        for s in &t.storages {
            unique(&s.name)?;
            cluster(&format!("storage {}", s.name), s.cluster)?;
            if s.kind == StorageKind::Local {
                return bad(format!(
                    "storage {}: local storage is created per home",
                    s.name
                ));
            }
        }
        let storage_kind = |name: &str| t.storages.iter().find(|s| s.name == name).map(|s| s.kind);
        for h in &t.homes {
            unique(&h.name)?;
            cluster(&format!("home {}", h.name), h.cluster)?;
            let mut devs = BTreeSet::new();
            for d in &h.devices {
                if !devs.insert(d) {
                    return bad(format!("home {}: duplicate device {d:?}", h.name));
                }
            }
            for (field, want, v) in [
                ("cloud", StorageKind::Cloud, &h.cloud),
                ("shared", StorageKind::Shared, &h.shared),
            ] {
                if let Some(name) = v {
                    if storage_kind(name) != Some(want) {
                        return bad(format!(
                            "home {}: {field} {name:?} is not a {} storage",
                            h.name,
                            want.as_str()
                        ));
                    }
                }
            }
            for d in h.offline.iter().chain(h.device_keys.iter().flatten()) {
                if !devs.contains(d) {
                    return bad(format!("home {}: unknown device {d:?}", h.name));
                }
            }
        }
        for r in &t.requesters {
            unique(&r.name)?;
            cluster(&format!("requester {}", r.name), r.cluster)?;
            if let Some(h) = &r.owner_of {
                self.home(h)?;
            }
        }
        for r in &t.filler_grants {
            self.requester(r)?;
        }
        for g in &t.shared_groups {
            unique(&g.name)?;
            cluster(&format!("shared group {}", g.name), g.cluster)?;
            for h in &g.homes {
                let home = self.home(h)?;
                if home.shared.is_none() {
                    return bad(format!(
                        "shared group {}: home {h} has no shared storage",
                        g.name
                    ));
                }
            }
        }
        for p in &self.policy {
            let h = self.device(&p.home, &p.device)?;
            match (&p.subject, &p.subject_device) {
                (Some(r), None) => {
                    self.requester(r)?;
                }
                (None, Some(d)) => {
                    if !h.devices.contains(d) {
                        return bad(format!("policy: home {} has no device {d:?}", p.home));
                    }
                }
                _ => return bad("policy: give exactly one of subject and subject_device".into()),
            }
            if p.actions.is_empty() {
                return bad("policy: actions must not be empty".into());
            }
            if p.actions.contains(&Action::AccessFullChain) && p.level != PrivacyLevel::FullChain {
                return bad("policy: access_full_chain requires level = \"full_chain\"".into());
            }
            if let Some(tf) = &p.transform {
                if crate::transform::lookup(tf).is_none() {
                    return bad(format!("policy: unknown transform {tf:?}"));
                }
            }
        }
        for w in &self.workload {
            match w {
                WorkloadSpec::Store {
                    home,
                    device,
                    target,
                    ..
                } => {
                    let h = self.device(home, device)?;
                    match target {
                        StorageKind::Cloud if h.cloud.is_none() => {
                            return bad(format!("workload: home {home} has no cloud storage"))
                        }
                        StorageKind::Shared if h.shared.is_none() => {
                            return bad(format!("workload: home {home} has no shared storage"))
                        }
                        _ => {}
                    }
                }
                WorkloadSpec::Access {
                    requester,
                    home,
                    device,
                    target,
                    ..
                } => {
                    self.requester(requester)?;
                    let h = self.device(home, device)?;
                    match target {
                        Some(StorageKind::Cloud) if h.cloud.is_none() => {
                            return bad(format!("workload: home {home} has no cloud storage"))
                        }
                        Some(StorageKind::Shared) if h.shared.is_none() => {
                            return bad(format!("workload: home {home} has no shared storage"))
                        }
                        _ => {}
                    }
                }
                WorkloadSpec::Monitor {
                    requester,
                    home,
                    device,
                    ..
                } => {
                    self.requester(requester)?;
                    self.device(home, device)?;
                }
                WorkloadSpec::BreachCheck { home, device, .. } => {
                    if self.device(home, device)?.cloud.is_none() {
                        return bad(format!(
                            "workload: breach check needs cloud storage at home {home}"
                        ));
                    }
                }
                WorkloadSpec::Mine {
                    cluster: c, txs, ..
                } => {
                    cluster("mine workload", *c)?;
                    if *txs == 0 {
                        return bad("workload: mine needs at least one transaction".into());
                    }
                    if t.clusters < 2 {
                        return bad("workload: mining needs a cosigner cluster".into());
                    }
                }
                WorkloadSpec::Join {
                    home,
                    blocks,
                    txs_per_block,
                    ..
                } => {
                    self.home(home)?;
                    if *blocks == 0 || *txs_per_block == 0 {
                        return bad("workload: join needs positive blocks and txs_per_block".into());
                    }
                }
                WorkloadSpec::DeviceMessage { home, from, to, .. } => {
                    self.device(home, from)?;
                    self.device(home, to)?;
                }
            }
        }
        for a in &self.adversary {
            match a {
                AdversarySpec::DosFlood {
                    requester,
                    home,
                    device,
                    count,
                    ..
                } => {
                    self.requester(requester)?;
                    self.device(home, device)?;
                    if *count == 0 {
                        return bad("adversary: dos_flood count must be positive".into());
                    }
                }
                AdversarySpec::Modification {
                    storage,
                    home,
                    device,
                    ..
                } => {
                    let h = self.device(home, device)?;
                    if h.cloud.as_deref() != Some(storage.as_str()) {
                        return bad(format!(
                            "adversary: {storage} is not the cloud storage of {home}"
                        ));
                    }
                }
                AdversarySpec::DroppingCh { cluster: c, .. } => {
                    cluster("dropping_ch", *c)?;
                }
                AdversarySpec::MiningCollusion {
                    miner_cluster,
                    txs,
                    bad: b,
                    fresh_cluster,
                    ..
                } => {
                    let m = cluster("mining_collusion", *miner_cluster)?;
                    if t.clusters < 3 {
                        return bad(
                            "adversary: mining_collusion needs at least three clusters".into()
                        );
                    }
                    if *b > *txs || *txs == 0 {
                        return bad(
                            "adversary: mining_collusion needs 0 <= bad <= txs and txs > 0".into(),
                        );
                    }
                    if let Some(f) = fresh_cluster {
                        let f = cluster("mining_collusion fresh_cluster", *f)?;
                        let cos = (m + 1) % t.clusters;
                        if f == m || f == cos {
                            return bad("adversary: fresh_cluster must be an honest CH".into());
                        }
                    }
                }
                AdversarySpec::FakeSpChain {
                    requester,
                    home,
                    device,
                    ..
                } => {
                    self.requester(requester)?;
                    self.device(home, device)?;
                }
                AdversarySpec::RogueDevice { home, device, .. } => {
                    let h = self.home(home)?;
                    if h.devices.contains(device) {
                        return bad(format!(
                            "adversary: rogue device {device} is enrolled at {home}"
                        ));
                    }
                }
            }
        }
        for a in &self.asserts {
            match a {
                AssertSpec::Blocked {
                    cluster: c,
                    requester,
                    ..
                } => {
                    cluster("assert blocked", *c)?;
                    self.requester(requester)?;
                }
                AssertSpec::Reelected { cluster: c, .. } => {
                    cluster("assert reelected", *c)?;
                }
                AssertSpec::HomeCluster { home, cluster: c } => {
                    self.home(home)?;
                    cluster("assert home_cluster", *c)?;
                }
                AssertSpec::StorageFlagged { storage, .. } => {
                    if !t.storages.iter().any(|s| &s.name == storage) {
                        return bad(format!("assert: unknown storage {storage:?}"));
                    }
                }
                AssertSpec::SharedTable { group, .. } => {
                    if !t.shared_groups.iter().any(|g| &g.name == group) {
                        return bad(format!("assert: unknown shared group {group:?}"));
                    }
                }
                AssertSpec::Unrecoverable { home, device } => {
                    self.device(home, device)?;
                }
                AssertSpec::Outcome { flow, .. }
                | AssertSpec::Messages { flow, .. }
                | AssertSpec::Packets { flow, .. } => {
                    if crate::metrics::FlowKind::parse(flow).is_none() {
                        return bad(format!("assert: unknown flow kind {flow:?}"));
                    }
                }
                AssertSpec::Counter { .. } | AssertSpec::BlockDiscarded { .. } => {}
            }
        }
        Ok(())
    }

    /// Declared homes followed by the filler homes, with the filler policy.
    pub fn all_homes(&self) -> (Vec<HomeSpec>, Vec<PolicySpec>) {
        let t = &self.topology;
        let mut homes = t.homes.clone();
        let mut policy = self.policy.clone();
        for c in 0..t.clusters {
            for j in 0..t.filler_homes {
                let name = format!("filler-{c}-{j}");
                homes.push(HomeSpec {
                    name: name.clone(),
                    cluster: c as i64,
                    devices: vec!["d0".into()],
                    key: None,
                    owner_key: None,
                    cloud: None,
                    shared: None,
                    ledger: LedgerMode::PerDevice,
                    device_actions: HomeSpec::d_actions(),
                    offline: Vec::new(),
                    device_keys: Vec::new(),
                });
                for r in &t.filler_grants {
                    policy.push(PolicySpec {
                        home: name.clone(),
                        device: "d0".into(),
                        subject: Some(r.clone()),
                        subject_device: None,
                        actions: vec![Action::AccessWindow],
                        level: PrivacyLevel::Minimal,
                        transform: None,
                        disclose_proof: true,
                        at: 0,
                    });
                }
            }
        }
        (homes, policy)
    }

    pub fn home(&self, name: &str) -> Result<&HomeSpec, SimError> {
        self.topology
            .homes
            .iter()
            .find(|h| h.name == name)
            .ok_or_else(|| SimError::Input(format!("unknown home {name:?}")))
    }

    fn device(&self, home: &str, device: &str) -> Result<&HomeSpec, SimError> {
        let h = self.home(home)?;
        if h.devices.iter().any(|d| d == device) {
            Ok(h)
        } else {
            Err(SimError::Input(format!(
                "home {home} has no device {device:?}"
            )))
        }
    }

    fn requester(&self, name: &str) -> Result<&RequesterSpec, SimError> {
        self.topology
            .requesters
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| SimError::Input(format!("unknown requester {name:?}")))
    }
}
