//! Simulated world: actors, the event loop and per-flow accounting.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use homechain_core::overlay::SharedOverlayTable;
use homechain_core::{
    AccountId, Block, BlockId, BlockNumber, ClusterId, CryptoProvider, DataHash, DeviceId,
    IdRegistry, KeyPair, Member, Miner, MinerConfig, NodeId, OverlayNetwork, OverlayParams,
    PolicyRule, PrivacyLevel, PublicKey, Scheme, SimCrypto, StandardCrypto, StorageKind,
    StorageNode, Subject, Transaction, TrustParams, TxId,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::SimError;
use crate::metrics::{
    FlowKind, FlowOutcome, FlowRecord, Hop, MetricsReport, MetricsRow, StructuredRow, TraceLine,
};
use crate::net::{Envelope, Event, EventQueue, Msg, Timer};
use crate::scenario::{CryptoChoice, LedgerMode, PolicySpec, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NodeKind {
    Relay,
    Miner(usize),
    Device(usize),
    Storage(usize),
    Requester(usize),
    Group(usize),
    Joiner { home: usize, overlay: bool },
}

#[derive(Debug, Clone, Serialize)]
pub struct NodeInfo {
    pub name: String,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Account {
    pub id: AccountId,
    pub tip: (BlockNumber, DataHash),
}

/// Newest cloud store of a device and the storage's signed hash of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CloudRef {
    pub handle: (BlockNumber, DataHash),
    pub signed_hash: TxId,
}

pub struct Home {
    pub name: String,
    pub node: NodeId,
    pub cluster: ClusterId,
    pub miner: Miner,
    pub owner: KeyPair,
    pub devices: Vec<DeviceId>,
    pub device_nodes: BTreeMap<DeviceId, NodeId>,
    pub offline: BTreeSet<DeviceId>,
    pub storages: BTreeMap<StorageKind, usize>,
    pub ledger: LedgerMode,
    pub accounts: BTreeMap<(StorageKind, String), Account>,
    pub cloud_refs: BTreeMap<DeviceId, CloudRef>,
    pub unrecoverable: BTreeSet<DeviceId>,
    pub group: Option<usize>,
    /// Store flows waiting for an earlier store on the same account.
    pub store_queue: BTreeMap<(StorageKind, String), VecDeque<u32>>,
}

impl Home {
    pub fn account_key(&self, device: &DeviceId) -> String {
        match self.ledger {
            LedgerMode::PerDevice => device.to_string(),
            LedgerMode::Common => "*".to_string(),
        }
    }
}

pub struct StorageActor {
    pub name: String,
    pub node: NodeId,
    pub key: KeyPair,
    pub store: StorageNode,
    pub cluster: Option<ClusterId>,
    /// Blocks an adversary has altered, by account.
    pub tampered: BTreeSet<(AccountId, BlockNumber)>,
}

/// What a requester learned from a full-chain response.
#[derive(Debug, Clone, Copy)]
pub struct Leak {
    pub storage: usize,
    pub account: AccountId,
    pub handle: (BlockNumber, DataHash),
}

pub struct RequesterActor {
    pub name: String,
    pub node: NodeId,
    pub key: KeyPair,
    pub adversarial: bool,
    pub leaked: BTreeMap<(usize, DeviceId), Leak>,
}

pub struct Group {
    pub name: String,
    pub node: NodeId,
    pub miner: Miner,
    pub table: SharedOverlayTable,
}

#[derive(Debug, Clone, Serialize)]
pub struct Election {
    pub cluster: ClusterId,
    pub tick: u64,
    pub accused: NodeId,
    pub new_ch: Option<NodeId>,
    /// Send tick of the request that went unanswered.
    pub unanswered_since: u64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ClusterMove {
    pub home: usize,
    pub from: ClusterId,
    pub to: ClusterId,
    pub tick: u64,
}

/// Per-flow state between messages.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Ctx {
    Store {
        home: usize,
        device: DeviceId,
        target: StorageKind,
        data: Vec<u8>,
    },
    Access {
        requester: usize,
        key: KeyPair,
        home: usize,
        device: DeviceId,
        target: StorageKind,
        monitor: bool,
        readings: u64,
        tx: Transaction,
        resolved: Option<Transaction>,
        transform: Option<String>,
        ingress: NodeId,
        acked: bool,
        attempt: u32,
        sent_at: u64,
        received: u64,
    },
    Breach {
        home: usize,
        device: DeviceId,
        reports: u32,
        flagged: u32,
        unverifiable: u32,
    },
    Mining {
        miner: ClusterId,
        block: BlockId,
        colluders: BTreeSet<ClusterId>,
        detected: bool,
    },
    Join {
        home: usize,
        joiner: NodeId,
        blocks: Vec<Block>,
        received: usize,
        busy_until: u64,
    },
    Election {
        cluster: ClusterId,
    },
    DeviceMessage {
        home: usize,
    },
    FakeChain {
        requester: usize,
    },
}

pub struct World {
    pub scenario: Scenario,
    pub provider: Arc<dyn CryptoProvider>,
    pub(crate) rng: ChaCha8Rng,
    pub now: u64,
    pub(crate) queue: EventQueue,
    pub nodes: Vec<NodeInfo>,
    pub overlay: OverlayNetwork,
    pub homes: Vec<Home>,
    pub storages: Vec<StorageActor>,
    pub requesters: Vec<RequesterActor>,
    pub groups: Vec<Group>,
    pub registry: IdRegistry,
    pub flows: Vec<FlowRecord>,
    pub ctx: BTreeMap<u32, Ctx>,
    pub counters: BTreeMap<String, u64>,
    pub elections: Vec<Election>,
    pub moves: Vec<ClusterMove>,
    /// (CH node, request id) -> CH the request came from.
    pub(crate) route_back: BTreeMap<(NodeId, TxId), NodeId>,
    /// Nodes that drop everything, from a tick on.
    pub dropping: BTreeMap<NodeId, u64>,
    /// Link traversals counted by the network, per flow.
    pub link_counts: BTreeMap<u32, u64>,
    pub total_links: u64,
}

impl World {
    pub fn new(scenario: Scenario) -> Result<Self, SimError> {
        scenario.validate()?;
        let provider: Arc<dyn CryptoProvider> = match scenario.topology.crypto {
            CryptoChoice::Sim => Arc::new(SimCrypto),
            CryptoChoice::Standard => Arc::new(StandardCrypto),
        };
        let t = &scenario.topology;
        let params = OverlayParams {
            failure_threshold: t.failure_threshold,
            epoch_ticks: t.epoch_ticks,
            forward_bound: t.forward_bound,
            proof_fanout: t.proof_fanout,
            block_size: t.overlay_block_size,
            trust: TrustParams {
                indirect_weight: t.indirect_weight,
                f_min: t.f_min,
            },
        };
        let mut w = World {
            rng: ChaCha8Rng::seed_from_u64(scenario.seed),
            provider,
            now: 0,
            queue: EventQueue::default(),
            nodes: Vec::new(),
            overlay: OverlayNetwork::new(params),
            homes: Vec::new(),
            storages: Vec::new(),
            requesters: Vec::new(),
            groups: Vec::new(),
            registry: IdRegistry::new(),
            flows: Vec::new(),
            ctx: BTreeMap::new(),
            counters: BTreeMap::new(),
            elections: Vec::new(),
            moves: Vec::new(),
            route_back: BTreeMap::new(),
            dropping: BTreeMap::new(),
            link_counts: BTreeMap::new(),
            total_links: 0,
            scenario,
        };
        w.build()?;
        Ok(w)
    }

    pub fn keypair(&self, label: &str) -> KeyPair {
        match self.provider.scheme() {
            Scheme::Sim => SimCrypto::keypair_from_label(label),
            _ => self.provider.keypair_from_seed(label.as_bytes()),
        }
    }

    fn add_node(&mut self, name: String, kind: NodeKind) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(NodeInfo { name, kind });
        id
    }

    pub(crate) fn add_runtime_node(&mut self, name: String, kind: NodeKind) -> NodeId {
        self.add_node(name, kind)
    }

    pub fn node_name(&self, n: NodeId) -> &str {
        &self.nodes[n.0 as usize].name
    }

    pub fn node_kind(&self, n: NodeId) -> NodeKind {
        self.nodes[n.0 as usize].kind
    }

    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| n.name == name)
            .map(|i| NodeId(i as u32))
    }

    pub fn home_index(&self, name: &str) -> Option<usize> {
        self.homes.iter().position(|h| h.name == name)
    }

    pub fn storage_index(&self, name: &str) -> Option<usize> {
        self.storages.iter().position(|s| s.name == name)
    }

    pub fn requester_index(&self, name: &str) -> Option<usize> {
        self.requesters.iter().position(|r| r.name == name)
    }

    pub fn cluster(&self, c: i64) -> ClusterId {
        ClusterId(
            self.scenario
                .topology
                .cluster_index(c)
                .expect("validated cluster"),
        )
    }

    fn setup_err(e: impl std::fmt::Display) -> SimError {
        SimError::Setup(e.to_string())
    }

    fn rule_from(&self, p: &PolicySpec) -> Result<PolicyRule, SimError> {
        let subject = match (&p.subject, &p.subject_device) {
            (Some(r), _) => {
                let i = self.requester_index(r).expect("validated requester");
                Subject::Key(self.requesters[i].key.public.clone())
            }
            (None, Some(d)) => Subject::Device(DeviceId::new(d)),
            (None, None) => unreachable!("validated subject"),
        };
        let mut rule = PolicyRule::new(
            subject,
            DeviceId::new(&p.device),
            p.actions.iter().copied(),
            p.level,
        )
        .map_err(Self::setup_err)?;
        if let Some(tf) = &p.transform {
            rule = rule.with_transform(tf);
        }
        if !p.disclose_proof {
            rule = rule.without_proof_disclosure();
        }
        Ok(rule)
    }

    fn build(&mut self) -> Result<(), SimError> {
        let sc = self.scenario.clone();
        let t = &sc.topology;
        for c in 0..t.clusters {
            let cid = self.overlay.add_cluster();
            for j in 0..t.relays_per_cluster {
                let name = format!("relay-{c}-{j}");
                let node = self.add_node(name.clone(), NodeKind::Relay);
                let score = self.rng.gen_range(1..=9);
                let key = self.keypair(&name);
                self.overlay
                    .add_member(cid, Member::relay(node, score, key))
                    .map_err(Self::setup_err)?;
            }
        }
        for s in &t.storages {
            let idx = self.storages.len();
            let node = self.add_node(s.name.clone(), NodeKind::Storage(idx));
            let key = self.keypair(s.key.as_deref().unwrap_or(&s.name));
            let cid = self.cluster(s.cluster);
            self.overlay
                .add_member(cid, Member::storage(node, key.clone()))
                .map_err(Self::setup_err)?;
            self.storages.push(StorageActor {
                name: s.name.clone(),
                node,
                store: StorageNode::new(self.provider.clone(), key.clone(), s.kind)
                    .with_capacity(s.capacity),
                key,
                cluster: Some(cid),
                tampered: BTreeSet::new(),
            });
        }
        for r in &t.requesters {
            let idx = self.requesters.len();
            let node = self.add_node(r.name.clone(), NodeKind::Requester(idx));
            let key = match &r.owner_of {
                Some(h) => self.keypair(&sc.home(h)?.owner_label()),
                None => self.keypair(r.key.as_deref().unwrap_or(&r.name)),
            };
            let cid = self.cluster(r.cluster);
            self.overlay
                .add_member(cid, Member::requester(node, key.clone()))
                .map_err(Self::setup_err)?;
            self.requesters.push(RequesterActor {
                name: r.name.clone(),
                node,
                key,
                adversarial: false,
                leaked: BTreeMap::new(),
            });
        }
        for a in &sc.adversary {
            use crate::scenario::AdversarySpec as A;
            if let A::DosFlood { requester, .. } | A::FakeSpChain { requester, .. } = a {
                let i = self
                    .requester_index(requester)
                    .expect("validated requester");
                self.requesters[i].adversarial = true;
            }
        }
        let (all_homes, all_policy) = sc.all_homes();
        for (hi, h) in all_homes.iter().enumerate() {
            let node = self.add_node(h.name.clone(), NodeKind::Miner(hi));
            let key = self.keypair(&h.miner_label());
            let owner = self.keypair(&h.owner_label());
            let mut miner = Miner::new(
                self.provider.clone(),
                key.clone(),
                owner.public.clone(),
                MinerConfig {
                    block_size: t.block_size,
                },
            );
            let devices: Vec<DeviceId> = h.devices.iter().map(DeviceId::new).collect();
            let mut device_nodes = BTreeMap::new();
            for d in &devices {
                let dn = self.add_node(format!("{}/{}", h.name, d), NodeKind::Device(hi));
                device_nodes.insert(d.clone(), dn);
            }
            for d in &devices {
                let mut rules = vec![PolicyRule::new(
                    Subject::Device(d.clone()),
                    d.clone(),
                    h.device_actions.iter().copied(),
                    PrivacyLevel::Minimal,
                )
                .map_err(Self::setup_err)?];
                for p in all_policy
                    .iter()
                    .filter(|p| p.home == h.name && p.device == d.as_str() && p.at == 0)
                {
                    rules.push(self.rule_from(p)?);
                }
                let auth = miner.owner_auth(&owner.private);
                miner
                    .add_device(&auth, d.clone(), rules)
                    .map_err(Self::setup_err)?;
            }
            for [a, b] in &h.device_keys {
                let auth = miner.owner_auth(&owner.private);
                miner
                    .grant_device_key(&auth, &DeviceId::new(a), &DeviceId::new(b))
                    .map_err(Self::setup_err)?;
            }
            let local_idx = self.storages.len();
            let local_name = format!("{}/local", h.name);
            let local_node = self.add_node(local_name.clone(), NodeKind::Storage(local_idx));
            let local_key = self.keypair(&local_name);
            self.storages.push(StorageActor {
                name: local_name,
                node: local_node,
                store: StorageNode::new(
                    self.provider.clone(),
                    local_key.clone(),
                    StorageKind::Local,
                ),
                key: local_key,
                cluster: None,
                tampered: BTreeSet::new(),
            });
            let mut storages = BTreeMap::from([(StorageKind::Local, local_idx)]);
            if let Some(c) = &h.cloud {
                storages.insert(
                    StorageKind::Cloud,
                    self.storage_index(c).expect("validated storage"),
                );
            }
            if let Some(s) = &h.shared {
                storages.insert(
                    StorageKind::Shared,
                    self.storage_index(s).expect("validated storage"),
                );
            }
            let keys: BTreeSet<String> = match h.ledger {
                LedgerMode::PerDevice => h.devices.iter().cloned().collect(),
                LedgerMode::Common => BTreeSet::from(["*".to_string()]),
            };
            let mut accounts = BTreeMap::new();
            for (kind, si) in &storages {
                for k in &keys {
                    let (id, bn, hash) = self.storages[*si]
                        .store
                        .bootstrap_account(key.public.clone(), &mut self.rng);
                    accounts.insert(
                        (*kind, k.clone()),
                        Account {
                            id,
                            tip: (bn, hash),
                        },
                    );
                }
            }
            let cid = self.cluster(h.cluster);
            let mut requesters = miner.authorized_pks();
            requesters.insert(owner.public.clone());
            self.overlay
                .add_member(
                    cid,
                    Member::home(node, key.clone(), key.public.clone(), requesters),
                )
                .map_err(Self::setup_err)?;
            self.homes.push(Home {
                name: h.name.clone(),
                node,
                cluster: cid,
                miner,
                owner,
                devices,
                device_nodes,
                offline: h.offline.iter().map(DeviceId::new).collect(),
                storages,
                ledger: h.ledger,
                accounts,
                cloud_refs: BTreeMap::new(),
                unrecoverable: BTreeSet::new(),
                group: None,
                store_queue: BTreeMap::new(),
            });
        }
        for g in &t.shared_groups {
            let gi = self.groups.len();
            let node = self.add_node(g.name.clone(), NodeKind::Group(gi));
            let key = self.keypair(&g.name);
            let owner = self.keypair(&format!("{}-owner", g.name));
            let mut miner = Miner::new(
                self.provider.clone(),
                key.clone(),
                owner.public.clone(),
                MinerConfig {
                    block_size: t.block_size,
                },
            );
            for h in &g.homes {
                let d = DeviceId::new(h);
                let rule = PolicyRule::new(
                    Subject::Device(d.clone()),
                    d.clone(),
                    [homechain_core::Action::StoreShared],
                    PrivacyLevel::Minimal,
                )
                .map_err(Self::setup_err)?;
                let auth = miner.owner_auth(&owner.private);
                miner
                    .add_device(&auth, d, vec![rule])
                    .map_err(Self::setup_err)?;
                let hi = self.home_index(h).expect("validated home");
                self.homes[hi].group = Some(gi);
            }
            let cid = self.cluster(g.cluster);
            self.overlay
                .add_member(cid, Member::requester(node, key))
                .map_err(Self::setup_err)?;
            self.groups.push(Group {
                name: g.name.clone(),
                node,
                miner,
                table: SharedOverlayTable::default(),
            });
        }
        for c in 0..t.clusters {
            self.overlay.elect(ClusterId(c)).map_err(Self::setup_err)?;
        }
        for (index, w) in sc.workload.iter().enumerate() {
            let (reps, every) = w.schedule(t.block_size);
            for rep in 0..reps {
                self.queue
                    .push(w.at() + rep as u64 * every, Event::Workload { index, rep });
            }
        }
        for (index, a) in sc.adversary.iter().enumerate() {
            let reps = match a {
                crate::scenario::AdversarySpec::DosFlood { count, .. } => *count,
                crate::scenario::AdversarySpec::RogueDevice { attempts, .. } => *attempts,
                _ => 1,
            };
            let every = match a {
                crate::scenario::AdversarySpec::DosFlood { every, .. } => *every,
                _ => 1,
            };
            for rep in 0..reps {
                self.queue
                    .push(a.at() + rep as u64 * every, Event::Adversary { index, rep });
            }
        }
        for (index, p) in sc.policy.iter().enumerate() {
            if p.at > 0 {
                self.queue.push(p.at, Event::Policy { index });
            }
        }
        Ok(())
    }

    /// Tell the home's CH which requesters the home accepts.
    pub(crate) fn redeclare(&mut self, hi: usize) {
        let h = &self.homes[hi];
        let mut requesters = h.miner.authorized_pks();
        requesters.insert(h.owner.public.clone());
        let _ = self
            .overlay
            .declare(h.node, Some(h.miner.public_key().clone()), requesters);
    }

    fn apply_policy(&mut self, index: usize) {
        let p = self.scenario.policy[index].clone();
        let Ok(rule) = self.rule_from(&p) else {
            self.bump("policy_errors");
            return;
        };
        let hi = self.home_index(&p.home).expect("validated home");
        let now = self.now;
        let h = &mut self.homes[hi];
        h.miner.set_time(now);
        let Ok(header) = h.miner.policy().merged(&[rule]) else {
            self.bump("policy_errors");
            return;
        };
        let auth = h.miner.owner_auth(&h.owner.private);
        if h.miner.update_policy(&auth, header.rules).is_err() {
            self.bump("policy_errors");
        }
        self.redeclare(hi);
    }

    pub fn bump(&mut self, name: &str) {
        *self.counters.entry(name.to_string()).or_default() += 1;
    }

    pub fn counter(&self, name: &str) -> u64 {
        self.counters.get(name).copied().unwrap_or(0)
    }

    pub(crate) fn new_flow(&mut self, kind: FlowKind, adversarial: bool, ctx: Ctx) -> u32 {
        let id = self.flows.len() as u32;
        self.flows
            .push(FlowRecord::new(id, kind, self.now, adversarial));
        self.ctx.insert(id, ctx);
        id
    }

    pub(crate) fn set_outcome(&mut self, flow: u32, outcome: FlowOutcome) {
        let f = &mut self.flows[flow as usize];
        f.outcome = Some(outcome);
        f.end = f.end.max(self.now);
    }

    pub(crate) fn set_detail(&mut self, flow: u32, detail: impl Into<String>) {
        self.flows[flow as usize].detail = Some(detail.into());
    }

    pub(crate) fn comp(&mut self, flow: u32, ops: u64) {
        self.flows[flow as usize].comp_ops += ops;
    }

    fn overlay_cluster(&self, n: NodeId) -> Option<ClusterId> {
        match self.node_kind(n) {
            NodeKind::Miner(h) => Some(self.homes[h].cluster),
            NodeKind::Device(_) | NodeKind::Joiner { .. } => None,
            _ => self.overlay.cluster_of(n),
        }
    }

    /// Link traversals between two nodes and whether the leg crosses the overlay.
    pub fn link_cost(&self, a: NodeId, b: NodeId) -> (u32, bool) {
        let s = self.scenario.topology.s;
        let in_home_storage = |x: NodeKind| match x {
            NodeKind::Storage(i) => self.storages[i].store.kind() != StorageKind::Cloud,
            _ => false,
        };
        match (self.node_kind(a), self.node_kind(b)) {
            (NodeKind::Device(_), _) | (_, NodeKind::Device(_)) => (1, false),
            (NodeKind::Joiner { overlay: false, .. }, _)
            | (_, NodeKind::Joiner { overlay: false, .. }) => (1, false),
            (NodeKind::Miner(_), x) | (x, NodeKind::Miner(_)) if in_home_storage(x) => (1, false),
            _ => (s, true),
        }
    }

    pub(crate) fn send(&mut self, flow: u32, from: NodeId, to: NodeId, msg: Msg) {
        let (links, overlay) = self.link_cost(from, to);
        let t = &self.scenario.topology;
        let factor = if overlay {
            [from, to]
                .iter()
                .filter_map(|n| self.overlay_cluster(*n))
                .map(|c| t.delay_factor(c.0))
                .max()
                .unwrap_or(1)
        } else {
            1
        };
        let arrive = self.now + links as u64 * t.link_delay * factor;
        self.flows[flow as usize].inflight += 1;
        self.queue.push(
            arrive,
            Event::Deliver(Box::new(Envelope {
                flow,
                from,
                to,
                links,
                sent: self.now,
                msg,
            })),
        );
    }

    pub(crate) fn timer(&mut self, at: u64, t: Timer) {
        self.queue.push(at, Event::Timer(t));
    }

    /// Run until the queue drains or `max_ticks` passes.
    pub fn run(&mut self) {
        while let Some(t) = self.queue.peek_tick() {
            if t > self.scenario.max_ticks {
                break;
            }
            let (t, ev) = self.queue.pop().expect("peeked");
            self.now = t;
            match ev {
                Event::Deliver(env) => self.deliver(*env),
                Event::Timer(tm) => self.on_timer(tm),
                Event::Workload { index, rep } => self.start_workload(index, rep),
                Event::Adversary { index, rep } => self.start_adversary(index, rep),
                Event::Policy { index } => self.apply_policy(index),
            }
        }
        for id in 0..self.flows.len() as u32 {
            self.snapshot_memory(id);
        }
    }

    fn deliver(&mut self, env: Envelope) {
        let flow = env.flow;
        {
            let f = &mut self.flows[flow as usize];
            f.inflight -= 1;
            f.packets += env.links as u64;
            f.end = f.end.max(self.now);
            f.hops.push(Hop {
                sent: env.sent,
                tick: self.now,
                from: env.from,
                to: env.to,
                msg: env.msg.name(),
                tag: env.msg.tag(),
                links: env.links,
            });
        }
        *self.link_counts.entry(flow).or_default() += env.links as u64;
        self.total_links += env.links as u64;
        if self
            .dropping
            .get(&env.to)
            .is_some_and(|since| self.now >= *since)
        {
            self.bump("dropped_by_ch");
            return;
        }
        self.dispatch(env);
        if self.flows[flow as usize].complete() {
            self.snapshot_memory(flow);
        }
    }

    pub(crate) fn snapshot_memory(&mut self, flow: u32) {
        let (blocks, txs) = match self.ctx.get(&flow) {
            Some(Ctx::Store { home, .. })
            | Some(Ctx::Access { home, .. })
            | Some(Ctx::Breach { home, .. })
            | Some(Ctx::DeviceMessage { home }) => {
                let c = self.homes[*home].miner.chain();
                (c.len(), c.tx_count())
            }
            Some(Ctx::Mining { miner, .. }) => self
                .overlay
                .head(*miner)
                .map_or((0, 0), |h| (h.memory_blocks(), h.chain().tx_count())),
            Some(Ctx::Election { cluster }) => self
                .overlay
                .head(*cluster)
                .map_or((0, 0), |h| (h.memory_blocks(), h.chain().tx_count())),
            Some(Ctx::Join {
                blocks, received, ..
            }) => {
                let txs = blocks.iter().take(*received).map(|b| b.txs.len()).sum();
                (*received, txs)
            }
            Some(Ctx::FakeChain { .. }) | None => (0, 0),
        };
        let f = &mut self.flows[flow as usize];
        f.mem_blocks = blocks as u64;
        f.mem_txs = txs as u64;
    }

    pub fn report(&self) -> MetricsReport {
        let sc = &self.scenario;
        let mut rows = Vec::new();
        let mut adversary_packets = 0;
        for f in &self.flows {
            if f.adversarial {
                adversary_packets += f.packets;
                continue;
            }
            let outcome = match &f.outcome {
                Some(o) if f.inflight == 0 => o.to_string(),
                _ => "incomplete".to_string(),
            };
            rows.push(StructuredRow {
                row: MetricsRow {
                    scenario: sc.name.clone(),
                    seed: sc.seed,
                    n: sc.topology.clusters as u64,
                    s: sc.topology.s as u64,
                    b: sc.b() as u64,
                    t: sc.t() as u64,
                    bs: sc.topology.block_size as u64,
                    flow: f.kind.name().to_string(),
                    packets: f.packets,
                    delay: f.delay(),
                    comp_ops: f.comp_ops,
                    mem_blocks: f.mem_blocks,
                    outcome,
                },
                flow_id: f.id,
                start: f.start,
                mem_txs: f.mem_txs,
                detail: f.detail.clone(),
                complete: f.complete(),
            });
        }
        let mut counters = self.counters.clone();
        counters.insert("adversary_packets".into(), adversary_packets);
        counters.insert("link_traversals".into(), self.total_links);
        counters.insert("elections".into(), self.elections.len() as u64);
        counters.insert("cluster_changes".into(), self.moves.len() as u64);
        MetricsReport { rows, counters }
    }

    pub fn trace(&self) -> Vec<TraceLine> {
        let mut lines: Vec<TraceLine> = self
            .flows
            .iter()
            .flat_map(|f| {
                f.hops.iter().map(move |h| TraceLine {
                    flow: f.id,
                    kind: f.kind.name().to_string(),
                    sent: h.sent,
                    tick: h.tick,
                    from: self.node_name(h.from).to_string(),
                    to: self.node_name(h.to).to_string(),
                    msg: h.msg.to_string(),
                    tag: h.tag,
                    links: h.links,
                })
            })
            .collect();
        lines.sort_by_key(|l| (l.tick, l.flow, l.sent));
        lines
    }

    pub fn trace_jsonl(&self) -> String {
        let mut out = String::new();
        for l in self.trace() {
            out.push_str(&serde_json::to_string(&l).expect("trace serializes"));
            out.push('\n');
        }
        out
    }

    pub fn flows_of(&self, kind: FlowKind) -> impl Iterator<Item = &FlowRecord> {
        self.flows.iter().filter(move |f| f.kind == kind)
    }

    pub fn requester_pk(&self, i: usize) -> &PublicKey {
        &self.requesters[i].key.public
    }
}
