//! Cluster-head overlay: membership, the three CH lists, multisig routing
//! around the CH ring, per-CH overlay chain views, PK blocking, alarms,
//! breach validation and re-election.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::index;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::block::Block;
use crate::crypto::{CryptoProvider, DataHash, KeyPair, PublicKey};
use crate::ids::{BlockId, BlockNumber, ClusterId, NodeId, TxId};
use crate::trust::{
    verify_block_sampled, Channel, Outcome, SampleOutcome, TrustParams, TrustTable,
};
use crate::tx::{validate_tx_signatures, SignedHashContext, Transaction, TxError, TxKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlayParams {
    /// Failed requests from one PK within an epoch before it is blocked.
    pub failure_threshold: u32,
    pub epoch_ticks: u64,
    pub forward_bound: usize,
    /// Number of random CHs that receive an access proof.
    pub proof_fanout: usize,
    /// Transactions per overlay block.
    pub block_size: usize,
    pub trust: TrustParams,
}

impl Default for OverlayParams {
    fn default() -> Self {
        Self {
            failure_threshold: 3,
            epoch_ticks: 100,
            forward_bound: 256,
            proof_fanout: 2,
            block_size: 5,
            trust: TrustParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OverlayError {
    #[error("unknown cluster {0}")]
    UnknownCluster(ClusterId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is already a member of a cluster")]
    AlreadyMember(NodeId),
    #[error("cluster {0} has no electable member left")]
    Unrecoverable(ClusterId),
    #[error("cluster {0} has no cluster head")]
    NoHead(ClusterId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemberRole {
    /// Overlay node eligible to serve as CH.
    Relay,
    /// A home miner.
    Home,
    /// A service provider or other requester.
    Requester,
    /// A storage node publishing signed hashes.
    Storage,
}

#[derive(Debug, Clone)]
pub struct Member {
    pub node: NodeId,
    pub role: MemberRole,
    /// Resource score used by CH election.
    pub score: u32,
    pub key: KeyPair,
    /// Homes declare their miner key as accessible.
    pub requestee: Option<PublicKey>,
    /// Homes declare the keys allowed to access them.
    pub requesters: BTreeSet<PublicKey>,
}

impl Member {
    pub fn relay(node: NodeId, score: u32, key: KeyPair) -> Self {
        Self {
            node,
            role: MemberRole::Relay,
            score,
            key,
            requestee: None,
            requesters: BTreeSet::new(),
        }
    }

    pub fn home(
        node: NodeId,
        key: KeyPair,
        miner: PublicKey,
        requesters: BTreeSet<PublicKey>,
    ) -> Self {
        Self {
            node,
            role: MemberRole::Home,
            score: 0,
            key,
            requestee: Some(miner),
            requesters,
        }
    }

    pub fn storage(node: NodeId, key: KeyPair) -> Self {
        Self {
            node,
            role: MemberRole::Storage,
            score: 0,
            key,
            requestee: None,
            requesters: BTreeSet::new(),
        }
    }

    pub fn requester(node: NodeId, key: KeyPair) -> Self {
        Self {
            node,
            role: MemberRole::Requester,
            score: 0,
            key,
            requestee: None,
            requesters: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Blocked,
    Duplicate,
    Malformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteDecision {
    /// A list matched: broadcast to this cluster. `forward` is set when the
    /// requestee is not local, so the multisig must also travel on.
    Broadcast {
        forward: bool,
    },
    /// No list matched: pass to the next CH on the ring.
    Forward,
    Dropped(DropReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DiscardReason {
    NotInvolved,
    /// Some transaction is already kept in another block.
    Redundant,
    Duplicate,
    /// The block was reported by an alarm.
    Alarmed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Kept,
    Discarded(DiscardReason),
    /// Verification failed; the caller should raise an alarm.
    Failed {
        bad: Vec<TxId>,
        multisig: Option<TxError>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReceipt {
    pub verdict: Verdict,
    /// Fraction of the body that was sampled.
    pub fraction: f64,
    /// Transactions whose signatures were checked.
    pub body_checks: usize,
    /// Signatures verified overall, header included.
    pub sig_checks: usize,
    /// This CH filled its own cosigner slot.
    pub cosigned: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlarmOutcome {
    Duplicate,
    /// The block is bad; it is discarded here.
    Confirmed,
    /// The block is valid; the accuser was penalized.
    FalseAlarm,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BreachVerdict {
    /// Storage identified by its key is flagged as malicious.
    Flagged(PublicKey),
    Rejected(&'static str),
    /// The store-time transaction is not held by this CH.
    Unverifiable,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChCounters {
    /// Delivered to this cluster only.
    pub broadcast: u64,
    /// Delivered to this cluster and passed on.
    pub broadcast_forwarded: u64,
    /// Passed on without local delivery.
    pub forwarded: u64,
    pub dropped_blocked: u64,
    pub dropped_duplicate: u64,
    pub dropped_malformed: u64,
    pub blocks_kept: u64,
    pub blocks_discarded: u64,
    pub blocks_failed: u64,
    pub sig_checks: u64,
}

impl ChCounters {
    /// Multisigs this CH has routed or dropped.
    pub fn routed(&self) -> u64 {
        self.broadcast
            + self.broadcast_forwarded
            + self.forwarded
            + self.dropped_blocked
            + self.dropped_duplicate
            + self.dropped_malformed
    }
}

/// A CH's private view of the overlay chain.
#[derive(Debug, Clone, Default)]
pub struct OverlayChain {
    blocks: Vec<Block>,
    ids: Vec<BlockId>,
    txs: BTreeMap<TxId, usize>,
}

impl OverlayChain {
    pub fn contains(&self, id: &BlockId) -> bool {
        self.ids.contains(id)
    }

    pub fn get(&self, id: &BlockId) -> Option<&Block> {
        self.ids
            .iter()
            .position(|b| b == id)
            .map(|i| &self.blocks[i])
    }

    pub fn block_ids(&self) -> &[BlockId] {
        &self.ids
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn tip(&self) -> Option<BlockId> {
        self.ids.last().copied()
    }

    pub fn holds_tx(&self, id: &TxId) -> bool {
        self.txs.contains_key(id)
    }

    pub fn tx(&self, id: &TxId) -> Option<&Transaction> {
        let &i = self.txs.get(id)?;
        self.blocks[i].txs.iter().find(|t| &t.id() == id)
    }

    pub fn tx_count(&self) -> usize {
        self.txs.len()
    }

    fn insert(&mut self, block: Block) {
        let idx = self.blocks.len();
        for id in block.tx_ids() {
            self.txs.insert(id, idx);
        }
        self.ids.push(block.id());
        self.blocks.push(block);
    }

    fn remove(&mut self, id: &BlockId) -> bool {
        let Some(pos) = self.ids.iter().position(|b| b == id) else {
            return false;
        };
        self.ids.remove(pos);
        self.blocks.remove(pos);
        self.txs = self
            .blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| b.tx_ids().into_iter().map(move |t| (t, i)))
            .collect();
        true
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct FailCount {
    epoch: u64,
    count: u32,
}

#[derive(Debug, Clone)]
pub struct ClusterHeadState {
    pub cluster: ClusterId,
    pub ch: NodeId,
    key: KeyPair,
    params: OverlayParams,
    pub requester_pks: BTreeSet<PublicKey>,
    pub requestee_pks: BTreeSet<PublicKey>,
    forward_list: VecDeque<(TxId, PublicKey)>,
    chain: OverlayChain,
    pending: Vec<Transaction>,
    failures: BTreeMap<PublicKey, FailCount>,
    blocked: BTreeSet<PublicKey>,
    pub trust: TrustTable,
    seen: BTreeSet<TxId>,
    involved: BTreeSet<TxId>,
    alarms: BTreeSet<BlockId>,
    discarded: BTreeSet<BlockId>,
    flagged_storages: BTreeSet<PublicKey>,
    pub counters: ChCounters,
}

impl ClusterHeadState {
    pub fn new(cluster: ClusterId, ch: NodeId, key: KeyPair, params: OverlayParams) -> Self {
        Self {
            cluster,
            ch,
            key,
            params,
            requester_pks: BTreeSet::new(),
            requestee_pks: BTreeSet::new(),
            forward_list: VecDeque::new(),
            chain: OverlayChain::default(),
            pending: Vec::new(),
            failures: BTreeMap::new(),
            blocked: BTreeSet::new(),
            trust: TrustTable::new(params.trust),
            seen: BTreeSet::new(),
            involved: BTreeSet::new(),
            alarms: BTreeSet::new(),
            discarded: BTreeSet::new(),
            flagged_storages: BTreeSet::new(),
            counters: ChCounters::default(),
        }
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.key.public
    }

    pub fn key(&self) -> &KeyPair {
        &self.key
    }

    pub fn chain(&self) -> &OverlayChain {
        &self.chain
    }

    pub fn pending(&self) -> &[Transaction] {
        &self.pending
    }

    pub fn forward_list(&self) -> &VecDeque<(TxId, PublicKey)> {
        &self.forward_list
    }

    pub fn blocked_pks(&self) -> &BTreeSet<PublicKey> {
        &self.blocked
    }

    pub fn is_blocked(&self, pk: &PublicKey) -> bool {
        self.blocked.contains(pk)
    }

    pub fn failure_count(&self, pk: &PublicKey) -> u32 {
        self.failures.get(pk).map_or(0, |f| f.count)
    }

    pub fn flagged_storages(&self) -> &BTreeSet<PublicKey> {
        &self.flagged_storages
    }

    pub fn is_discarded(&self, id: &BlockId) -> bool {
        self.discarded.contains(id)
    }

    /// Memory held by this CH, in blocks.
    pub fn memory_blocks(&self) -> usize {
        self.chain.len()
    }

    /// Whether this CH holds `id` in its chain or pending pool.
    pub fn holds_tx(&self, id: &TxId) -> bool {
        self.chain.holds_tx(id) || self.pending.iter().any(|t| &t.id() == id)
    }

    fn find_tx(&self, id: &TxId) -> Option<&Transaction> {
        self.chain
            .tx(id)
            .or_else(|| self.pending.iter().find(|t| &t.id() == id))
    }

    /// Decide what to do with a requester-signed multisig arriving here.
    pub fn route_multisig(&mut self, tx: &Transaction) -> RouteDecision {
        let (Some(requester), Some(requestee)) = (tx.requester().cloned(), tx.requestee().cloned())
        else {
            self.counters.dropped_malformed += 1;
            return RouteDecision::Dropped(DropReason::Malformed);
        };
        if tx.slots.len() != 2 {
            self.counters.dropped_malformed += 1;
            return RouteDecision::Dropped(DropReason::Malformed);
        }
        if self.blocked.contains(&requester) {
            self.counters.dropped_blocked += 1;
            return RouteDecision::Dropped(DropReason::Blocked);
        }
        let id = tx.id();
        if !self.seen.insert(id) {
            self.counters.dropped_duplicate += 1;
            return RouteDecision::Dropped(DropReason::Duplicate);
        }
        self.involved.insert(id);
        if self.requestee_pks.contains(&requestee) {
            self.counters.broadcast += 1;
            return RouteDecision::Broadcast { forward: false };
        }
        self.push_forward(id, requester.clone());
        if self.requester_pks.contains(&requester) {
            self.counters.broadcast_forwarded += 1;
            RouteDecision::Broadcast { forward: true }
        } else {
            self.counters.forwarded += 1;
            RouteDecision::Forward
        }
    }

    fn push_forward(&mut self, id: TxId, requester: PublicKey) {
        self.forward_list.push_back((id, requester));
        while self.forward_list.len() > self.params.forward_bound {
            self.forward_list.pop_front();
        }
    }

    /// Count a failed request from `requester`. Returns true if this call
    /// blocked the key. Counts reset at each epoch boundary; a block is
    /// permanent.
    pub fn register_access_failure(&mut self, requester: &PublicKey, now: u64) -> bool {
        if self.blocked.contains(requester) {
            return false;
        }
        let epoch = now / self.params.epoch_ticks.max(1);
        let entry = self.failures.entry(requester.clone()).or_default();
        if entry.epoch != epoch {
            *entry = FailCount { epoch, count: 0 };
        }
        entry.count += 1;
        if entry.count >= self.params.failure_threshold {
            self.blocked.insert(requester.clone());
            true
        } else {
            false
        }
    }

    /// A resolved multisig passed through this CH on its way back.
    pub fn note_resolution(&mut self, tx: &Transaction, now: u64) -> bool {
        self.involved.insert(tx.id());
        match (tx.output_bit, tx.requester()) {
            (Some(false), Some(r)) => {
                let r = r.clone();
                self.register_access_failure(&r, now)
            }
            _ => false,
        }
    }

    /// Queue a transaction sent to this CH for inclusion in its next block.
    pub fn accept_for_mining(&mut self, tx: Transaction) -> bool {
        let id = tx.id();
        if self.holds_tx(&id) {
            return false;
        }
        self.involved.insert(id);
        self.pending.push(tx);
        true
    }

    pub fn ready_to_mine(&self) -> bool {
        self.pending.len() >= self.params.block_size
    }

    /// Take up to one block's worth of pending transactions into a new block
    /// that `cosigner` must countersign.
    pub fn mine(
        &mut self,
        provider: &dyn CryptoProvider,
        cosigner: &PublicKey,
        now: u64,
    ) -> Option<Block> {
        if self.pending.is_empty() {
            return None;
        }
        let n = self.pending.len().min(self.params.block_size);
        let txs: Vec<Transaction> = self.pending.drain(..n).collect();
        Block::overlay(
            provider,
            self.chain.tip(),
            txs,
            &self.key.private,
            std::slice::from_ref(cosigner),
            now,
        )
        .ok()
    }

    /// Build a block from `txs` regardless of the pending pool.
    pub fn mine_with(
        &mut self,
        provider: &dyn CryptoProvider,
        txs: Vec<Transaction>,
        cosigner: &PublicKey,
        now: u64,
    ) -> Option<Block> {
        for t in &txs {
            self.involved.insert(t.id());
        }
        Block::overlay(
            provider,
            self.chain.tip(),
            txs,
            &self.key.private,
            std::slice::from_ref(cosigner),
            now,
        )
        .ok()
    }

    pub fn params(&self) -> &OverlayParams {
        &self.params
    }

    /// Store a fully cosigned block produced by this CH.
    pub fn keep_own_block(&mut self, block: Block) {
        if !self.chain.contains(&block.id()) {
            self.counters.blocks_kept += 1;
            self.chain.insert(block);
        }
    }

    fn involved_in(&self, block: &Block) -> bool {
        let me = &self.key.public;
        if &block.miner == me || block.cosigners().contains(me) {
            return true;
        }
        block.txs.iter().any(|tx| {
            self.involved.contains(&tx.id())
                || tx
                    .requester()
                    .is_some_and(|r| self.requester_pks.contains(r))
                || tx
                    .requestee()
                    .is_some_and(|e| self.requestee_pks.contains(e))
        })
    }

    fn record_block_evidence(&mut self, block: &Block, outcome: Outcome) {
        let me = self.key.public.clone();
        for pk in std::iter::once(block.miner.clone()).chain(block.cosigners()) {
            if pk != me {
                self.trust.update_evidence(&pk, outcome, Channel::Direct);
            }
        }
    }

    /// Handle an overlay block with its trust multisig.
    ///
    /// If this CH owns an empty cosigner slot it checks the miner's signature,
    /// verifies the body and countersigns. Otherwise it checks the complete
    /// multisig. The body is verified on a trust-scaled sample. A passing
    /// block is kept only if this CH took part in one of its transactions and
    /// none of them is already kept.
    pub fn receive_block(
        &mut self,
        provider: &dyn CryptoProvider,
        block: &mut Block,
        relayed_by: Option<&PublicKey>,
        rng: &mut dyn RngCore,
    ) -> BlockReceipt {
        let id = block.id();
        let receipt = |verdict, fraction, body_checks, sig_checks, cosigned| BlockReceipt {
            verdict,
            fraction,
            body_checks,
            sig_checks,
            cosigned,
        };
        if self.alarms.contains(&id) {
            return receipt(Verdict::Discarded(DiscardReason::Alarmed), 0.0, 0, 0, false);
        }
        if self.chain.contains(&id) || self.discarded.contains(&id) {
            return receipt(
                Verdict::Discarded(DiscardReason::Duplicate),
                0.0,
                0,
                0,
                false,
            );
        }
        let me = self.key.public.clone();
        let cosigner_slot = block.trust_multisig().and_then(|ms| {
            ms.slots
                .iter()
                .position(|s| s.signer == me && s.signature.is_none())
        });
        let mut sig_checks = 0usize;
        let header = match cosigner_slot {
            Some(_) => {
                sig_checks += 1;
                Self::check_miner_slot(provider, block)
            }
            None => {
                sig_checks += block.trust_multisig().map_or(0, |ms| ms.slots.len());
                block.validate_trust_multisig(provider)
            }
        };
        if let Err(e) = header {
            self.discarded.insert(id);
            self.counters.blocks_failed += 1;
            self.counters.sig_checks += sig_checks as u64;
            self.record_block_evidence(block, Outcome::Neg);
            return receipt(
                Verdict::Failed {
                    bad: Vec::new(),
                    multisig: Some(e),
                },
                0.0,
                0,
                sig_checks,
                false,
            );
        }
        let f = self
            .trust
            .verification_fraction(&block.miner, &block.cosigners());
        let outcome = verify_block_sampled(provider, block, f, rng);
        let body_checks = outcome.checked();
        sig_checks += Self::sampled_sigs(block, body_checks);
        self.counters.sig_checks += sig_checks as u64;
        if let SampleOutcome::Fail { bad, .. } = outcome {
            self.discarded.insert(id);
            self.counters.blocks_failed += 1;
            self.record_block_evidence(block, Outcome::Neg);
            return receipt(
                Verdict::Failed {
                    bad,
                    multisig: None,
                },
                f,
                body_checks,
                sig_checks,
                false,
            );
        }
        self.record_block_evidence(block, Outcome::Pos);
        if let Some(relay) = relayed_by {
            if relay != &block.miner && relay != &me {
                self.trust
                    .update_evidence(&block.miner, Outcome::Pos, Channel::Indirect);
            }
        }
        let cosigned = match cosigner_slot {
            Some(idx) => {
                let ms = block.trust_multisig_mut().expect("checked above");
                ms.sign_slot(provider, idx, &self.key.private).is_ok()
            }
            None => false,
        };
        let verdict = if block.tx_ids().iter().any(|t| self.chain.holds_tx(t)) {
            Verdict::Discarded(DiscardReason::Redundant)
        } else if self.involved_in(block) {
            Verdict::Kept
        } else {
            Verdict::Discarded(DiscardReason::NotInvolved)
        };
        match verdict {
            Verdict::Kept => {
                self.counters.blocks_kept += 1;
                for t in block.tx_ids() {
                    self.pending.retain(|p| p.id() != t);
                }
                self.chain.insert(block.clone());
            }
            _ => self.counters.blocks_discarded += 1,
        }
        receipt(verdict, f, body_checks, sig_checks, cosigned)
    }

    /// Signatures verified when checking the first `n` sampled transactions is
    /// not observable from outside; approximate by the block average.
    fn sampled_sigs(block: &Block, n: usize) -> usize {
        if block.txs.is_empty() {
            return 0;
        }
        let total: usize = block.txs.iter().map(|t| t.slots.len()).sum();
        (total * n).div_ceil(block.txs.len())
    }

    fn check_miner_slot(provider: &dyn CryptoProvider, block: &Block) -> Result<(), TxError> {
        let ms = block
            .trust_multisig()
            .ok_or(TxError::Malformed("block has no trust multisig"))?;
        ms.validate_shape()?;
        if ms.data_hash != Some(block.id().0) {
            return Err(TxError::Malformed(
                "trust multisig does not cover this block",
            ));
        }
        if ms.signer(0) != Some(&block.miner) {
            return Err(TxError::Malformed("first multisig slot is not the miner"));
        }
        let sig = ms.slots[0]
            .signature
            .as_ref()
            .ok_or(TxError::MissingSignature { slot: 0 })?;
        match provider.verify(&block.miner, &ms.signing_payload(0), sig) {
            Ok(true) => Ok(()),
            _ => Err(TxError::InvalidSignature { slot: 0 }),
        }
    }

    /// Full verification of every transaction; used before acting on alarms.
    fn fully_valid(provider: &dyn CryptoProvider, block: &Block) -> bool {
        block.validate_trust_multisig(provider).is_ok()
            && block
                .txs
                .iter()
                .all(|t| validate_tx_signatures(provider, t).is_ok())
    }

    /// Handle an alarm raised by `accuser` about `block`. The block is
    /// re-verified in full before anything is discarded.
    pub fn receive_alarm(
        &mut self,
        provider: &dyn CryptoProvider,
        block: &Block,
        accuser: &PublicKey,
    ) -> AlarmOutcome {
        let id = block.id();
        if !self.alarms.insert(id) {
            return AlarmOutcome::Duplicate;
        }
        let sigs: usize = block.txs.iter().map(|t| t.slots.len()).sum::<usize>()
            + block.trust_multisig().map_or(0, |m| m.slots.len());
        self.counters.sig_checks += sigs as u64;
        if Self::fully_valid(provider, block) {
            if accuser != &self.key.public {
                self.trust
                    .update_evidence(accuser, Outcome::Neg, Channel::Direct);
            }
            self.alarms.remove(&id);
            return AlarmOutcome::FalseAlarm;
        }
        let already = self.discarded.contains(&id);
        if self.chain.remove(&id) {
            self.counters.blocks_discarded += 1;
        }
        self.discarded.insert(id);
        if !already {
            self.record_block_evidence(block, Outcome::Neg);
        }
        AlarmOutcome::Confirmed
    }

    /// Validate a breach report against this CH's own records. The first
    /// reference must be a storage-signed store-time hash held here; the
    /// second, supplied in `evidence`, must be the same storage's signed hash
    /// of what it returned for that block.
    pub fn validate_breach(
        &mut self,
        provider: &dyn CryptoProvider,
        report: &Transaction,
        evidence: &[Transaction],
    ) -> BreachVerdict {
        if report.kind != TxKind::BreachReport || validate_tx_signatures(provider, report).is_err()
        {
            return BreachVerdict::Rejected("report is not a valid breach report");
        }
        let Some((stored_id, returned_id)) = report.payload_refs else {
            return BreachVerdict::Rejected("report has no references");
        };
        let Some(stored) = self.find_tx(&stored_id).cloned() else {
            return BreachVerdict::Unverifiable;
        };
        let Some(returned) = evidence
            .iter()
            .find(|t| t.id() == returned_id)
            .cloned()
            .or_else(|| self.find_tx(&returned_id).cloned())
        else {
            return BreachVerdict::Rejected("returned-data receipt missing");
        };
        for t in [&stored, &returned] {
            if validate_tx_signatures(provider, t).is_err() {
                return BreachVerdict::Rejected("referenced transaction has a bad signature");
            }
        }
        let (
            TxKind::SignedHash {
                context: SignedHashContext::StoredData { account: a1 },
            },
            TxKind::SignedHash {
                context:
                    SignedHashContext::RetrievedData {
                        account: a2,
                        requested,
                    },
            },
        ) = (&stored.kind, &returned.kind)
        else {
            return BreachVerdict::Rejected("references are not storage hash statements");
        };
        let storage = stored.slots[0].signer.clone();
        if a1 != a2 || returned.slots[0].signer != storage {
            return BreachVerdict::Rejected("references name different accounts or storages");
        }
        if Some(*requested) != stored.data_hash {
            return BreachVerdict::Rejected("receipt is for a different block");
        }
        if returned.data_hash == stored.data_hash {
            return BreachVerdict::Rejected("stored and returned hashes match");
        }
        self.flagged_storages.insert(storage.clone());
        BreachVerdict::Flagged(storage)
    }
}

#[derive(Debug, Clone)]
pub struct Cluster {
    pub id: ClusterId,
    members: BTreeMap<NodeId, Member>,
    head: Option<ClusterHeadState>,
    accused: BTreeSet<NodeId>,
    pub unrecoverable: bool,
    pub elections: u32,
}

impl Cluster {
    pub fn members(&self) -> impl Iterator<Item = &Member> {
        self.members.values()
    }

    pub fn member(&self, node: NodeId) -> Option<&Member> {
        self.members.get(&node)
    }

    pub fn head(&self) -> Option<&ClusterHeadState> {
        self.head.as_ref()
    }

    pub fn head_mut(&mut self) -> Option<&mut ClusterHeadState> {
        self.head.as_mut()
    }

    pub fn ch(&self) -> Option<NodeId> {
        self.head.as_ref().map(|h| h.ch)
    }

    pub fn accused(&self) -> &BTreeSet<NodeId> {
        &self.accused
    }

    fn rebuild_lists(&mut self) {
        let Some(head) = self.head.as_mut() else {
            return;
        };
        head.requestee_pks = self
            .members
            .values()
            .filter_map(|m| m.requestee.clone())
            .collect();
        head.requester_pks = self
            .members
            .values()
            .flat_map(|m| m.requesters.iter().cloned())
            .collect();
    }
}

/// Table of the last stored (block-number, hash) per home of a shared overlay.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedOverlayTable {
    pub entries: BTreeMap<String, (BlockNumber, DataHash)>,
}

impl SharedOverlayTable {
    pub fn update(&mut self, home: &str, bn: BlockNumber, hash: DataHash) {
        self.entries.insert(home.to_string(), (bn, hash));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// All clusters of the overlay, arranged in a ring by cluster id.
#[derive(Debug, Clone, Default)]
pub struct OverlayNetwork {
    pub params: OverlayParams,
    clusters: Vec<Cluster>,
    node_cluster: BTreeMap<NodeId, ClusterId>,
}

impl OverlayNetwork {
    pub fn new(params: OverlayParams) -> Self {
        Self {
            params,
            clusters: Vec::new(),
            node_cluster: BTreeMap::new(),
        }
    }

    pub fn add_cluster(&mut self) -> ClusterId {
        let id = ClusterId(self.clusters.len() as u32);
        self.clusters.push(Cluster {
            id,
            members: BTreeMap::new(),
            head: None,
            accused: BTreeSet::new(),
            unrecoverable: false,
            elections: 0,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn cluster(&self, id: ClusterId) -> Result<&Cluster, OverlayError> {
        self.clusters
            .get(id.0 as usize)
            .ok_or(OverlayError::UnknownCluster(id))
    }

    pub fn cluster_mut(&mut self, id: ClusterId) -> Result<&mut Cluster, OverlayError> {
        self.clusters
            .get_mut(id.0 as usize)
            .ok_or(OverlayError::UnknownCluster(id))
    }

    pub fn head(&self, id: ClusterId) -> Option<&ClusterHeadState> {
        self.clusters.get(id.0 as usize)?.head.as_ref()
    }

    pub fn head_mut(&mut self, id: ClusterId) -> Option<&mut ClusterHeadState> {
        self.clusters.get_mut(id.0 as usize)?.head.as_mut()
    }

    pub fn ch_of(&self, id: ClusterId) -> Option<NodeId> {
        self.head(id).map(|h| h.ch)
    }

    pub fn cluster_of(&self, node: NodeId) -> Option<ClusterId> {
        self.node_cluster.get(&node).copied()
    }

    /// Cluster whose CH is `node`, if any.
    pub fn cluster_headed_by(&self, node: NodeId) -> Option<ClusterId> {
        self.clusters
            .iter()
            .find(|c| c.ch() == Some(node))
            .map(|c| c.id)
    }

    /// Next cluster on the ring that has a CH.
    pub fn successor(&self, id: ClusterId) -> Option<ClusterId> {
        let n = self.clusters.len() as u32;
        (1..n)
            .map(|k| ClusterId((id.0 + k) % n))
            .find(|c| self.head(*c).is_some())
    }

    /// Previous cluster on the ring that has a CH.
    pub fn predecessor(&self, id: ClusterId) -> Option<ClusterId> {
        let n = self.clusters.len() as u32;
        (1..n)
            .map(|k| ClusterId((id.0 + n - k) % n))
            .find(|c| self.head(*c).is_some())
    }

    pub fn add_member(&mut self, cluster: ClusterId, member: Member) -> Result<(), OverlayError> {
        if self.node_cluster.contains_key(&member.node) {
            return Err(OverlayError::AlreadyMember(member.node));
        }
        let node = member.node;
        let c = self.cluster_mut(cluster)?;
        c.members.insert(node, member);
        c.rebuild_lists();
        self.node_cluster.insert(node, cluster);
        Ok(())
    }

    /// Replace what a member declares to its CH.
    pub fn declare(
        &mut self,
        node: NodeId,
        requestee: Option<PublicKey>,
        requesters: BTreeSet<PublicKey>,
    ) -> Result<(), OverlayError> {
        let cid = self
            .cluster_of(node)
            .ok_or(OverlayError::UnknownNode(node))?;
        let c = self.cluster_mut(cid)?;
        let m = c
            .members
            .get_mut(&node)
            .ok_or(OverlayError::UnknownNode(node))?;
        m.requestee = requestee;
        m.requesters = requesters;
        c.rebuild_lists();
        Ok(())
    }

    /// Choose a CH: the lowest node id among non-accused relay members whose
    /// score is at least the median score of those candidates. The new CH
    /// starts with a fresh view and lists rebuilt from member declarations.
    pub fn elect(&mut self, cluster: ClusterId) -> Result<NodeId, OverlayError> {
        let params = self.params;
        let c = self.cluster_mut(cluster)?;
        let mut candidates: Vec<&Member> = c
            .members
            .values()
            .filter(|m| m.role == MemberRole::Relay && !c.accused.contains(&m.node))
            .collect();
        if candidates.is_empty() || (c.head.is_some() && c.members.len() <= 1) {
            c.head = None;
            c.unrecoverable = true;
            return Err(OverlayError::Unrecoverable(cluster));
        }
        let mut scores: Vec<u32> = candidates.iter().map(|m| m.score).collect();
        scores.sort_unstable();
        let median = scores[(scores.len() - 1) / 2];
        candidates.retain(|m| m.score >= median);
        let chosen = candidates
            .iter()
            .min_by_key(|m| m.node)
            .expect("median member exists");
        let (node, key) = (chosen.node, chosen.key.clone());
        c.head = Some(ClusterHeadState::new(cluster, node, key, params));
        c.elections += 1;
        c.rebuild_lists();
        Ok(node)
    }

    /// Members report `accused` as unresponsive. If it is the CH, a new one is
    /// elected and returned.
    pub fn accuse(
        &mut self,
        cluster: ClusterId,
        accused: NodeId,
    ) -> Result<Option<NodeId>, OverlayError> {
        let c = self.cluster_mut(cluster)?;
        c.accused.insert(accused);
        if c.ch() == Some(accused) {
            self.elect(cluster).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Move `node` to `new_cluster` in one step.
    pub fn change_cluster(
        &mut self,
        node: NodeId,
        new_cluster: ClusterId,
    ) -> Result<(), OverlayError> {
        self.cluster(new_cluster)?;
        let old = self
            .cluster_of(node)
            .ok_or(OverlayError::UnknownNode(node))?;
        if old == new_cluster {
            return Ok(());
        }
        let oc = self.cluster_mut(old)?;
        let member = oc
            .members
            .remove(&node)
            .ok_or(OverlayError::UnknownNode(node))?;
        let was_head = oc.ch() == Some(node);
        oc.rebuild_lists();
        let nc = self.cluster_mut(new_cluster)?;
        nc.members.insert(node, member);
        nc.rebuild_lists();
        self.node_cluster.insert(node, new_cluster);
        if was_head {
            self.elect(old)?;
        }
        Ok(())
    }

    /// Members of `cluster` other than its CH.
    pub fn broadcast_targets(&self, cluster: ClusterId) -> Vec<NodeId> {
        let Ok(c) = self.cluster(cluster) else {
            return Vec::new();
        };
        let ch = c.ch();
        c.members
            .keys()
            .copied()
            .filter(|n| Some(*n) != ch)
            .collect()
    }

    /// Cluster whose requestee list contains `pk`.
    pub fn requestee_cluster(&self, pk: &PublicKey) -> Option<ClusterId> {
        self.clusters
            .iter()
            .find(|c| {
                c.head
                    .as_ref()
                    .is_some_and(|h| h.requestee_pks.contains(pk))
            })
            .map(|c| c.id)
    }

    /// Pick the CHs that store an access proof. Empty when disclosure is off.
    pub fn proof_targets(&self, rng: &mut dyn RngCore, disclose: bool) -> Vec<ClusterId> {
        if !disclose {
            return Vec::new();
        }
        let live: Vec<ClusterId> = self
            .clusters
            .iter()
            .filter(|c| c.head.is_some())
            .map(|c| c.id)
            .collect();
        let r = self.params.proof_fanout.min(live.len());
        let mut picks: Vec<ClusterId> = index::sample(rng, live.len(), r)
            .into_iter()
            .map(|i| live[i])
            .collect();
        picks.sort();
        picks
    }

    /// Clusters whose CH holds `tx` in its chain.
    pub fn holders(&self, tx: &TxId) -> Vec<ClusterId> {
        self.clusters
            .iter()
            .filter(|c| c.head.as_ref().is_some_and(|h| h.chain.holds_tx(tx)))
            .map(|c| c.id)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::SimCrypto;
    use crate::ids::{AccessScope, DeviceId};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kp(l: &str) -> KeyPair {
        SimCrypto::keypair_from_label(l)
    }

    fn request(requester: &KeyPair, requestee: &PublicKey, ts: u64) -> Transaction {
        let mut tx = Transaction::new(
            TxKind::Access {
                scope: AccessScope::FullChain,
            },
            ts,
        )
        .with_device(DeviceId::new("thermostat"))
        .with_signer(requester.public.clone())
        .with_signer(requestee.clone());
        tx.sign_slot(&SimCrypto, 0, &requester.private).unwrap();
        tx
    }

    fn network(n: u32) -> OverlayNetwork {
        let mut net = OverlayNetwork::new(OverlayParams::default());
        for c in 0..n {
            let cid = net.add_cluster();
            for j in 0..3 {
                let node = NodeId(c * 10 + j);
                net.add_member(
                    cid,
                    Member::relay(node, 10 - j, kp(&format!("relay-{}", node.0))),
                )
                .unwrap();
            }
            net.elect(cid).unwrap();
        }
        net
    }

    #[test]
    fn election_picks_lowest_id_at_or_above_median() {
        let mut net = OverlayNetwork::new(OverlayParams::default());
        let c = net.add_cluster();
        for (id, score) in [(5, 1), (3, 2), (9, 7), (7, 9)] {
            net.add_member(c, Member::relay(NodeId(id), score, kp(&format!("r{id}"))))
                .unwrap();
        }
        // scores sorted 1,2,7,9 -> lower median 2 -> candidates 3,7,9
        assert_eq!(net.elect(c).unwrap(), NodeId(3));
        assert_eq!(net.accuse(c, NodeId(3)).unwrap(), Some(NodeId(7)));
        assert!(!net.cluster(c).unwrap().accused().is_empty());
        assert_ne!(net.ch_of(c), Some(NodeId(3)));
    }

    #[test]
    fn lone_member_cluster_is_unrecoverable() {
        let mut net = OverlayNetwork::new(OverlayParams::default());
        let c = net.add_cluster();
        net.add_member(c, Member::relay(NodeId(1), 1, kp("solo")))
            .unwrap();
        assert_eq!(net.elect(c).unwrap(), NodeId(1));
        assert_eq!(
            net.accuse(c, NodeId(1)),
            Err(OverlayError::Unrecoverable(c))
        );
        assert!(net.cluster(c).unwrap().unrecoverable);
    }

    #[test]
    fn routing_decisions() {
        let mut net = network(3);
        let home = kp("aheu1938k3");
        let sp = kp("76sj18394");
        net.add_member(
            ClusterId(2),
            Member::home(
                NodeId(100),
                kp("home-node"),
                home.public.clone(),
                BTreeSet::new(),
            ),
        )
        .unwrap();
        let tx = request(&sp, &home.public, 1);
        let h0 = net.head_mut(ClusterId(0)).unwrap();
        assert_eq!(h0.route_multisig(&tx), RouteDecision::Forward);
        assert_eq!(h0.forward_list().len(), 1);
        assert_eq!(
            h0.route_multisig(&tx),
            RouteDecision::Dropped(DropReason::Duplicate)
        );
        let h2 = net.head_mut(ClusterId(2)).unwrap();
        assert_eq!(
            h2.route_multisig(&tx),
            RouteDecision::Broadcast { forward: false }
        );
        assert_eq!(net.successor(ClusterId(2)), Some(ClusterId(0)));
        assert_eq!(net.predecessor(ClusterId(0)), Some(ClusterId(2)));
        assert_eq!(net.broadcast_targets(ClusterId(2)).len(), 3);
    }

    #[test]
    fn blocking_after_threshold() {
        let mut net = network(1);
        let h = net.head_mut(ClusterId(0)).unwrap();
        let bad = kp("attacker").public;
        assert!(!h.register_access_failure(&bad, 1));
        assert!(!h.register_access_failure(&bad, 2));
        assert!(h.register_access_failure(&bad, 3));
        let tx = request(&kp("attacker"), &kp("home").public, 4);
        assert_eq!(
            h.route_multisig(&tx),
            RouteDecision::Dropped(DropReason::Blocked)
        );
        assert_eq!(h.counters.dropped_blocked, 1);
    }

    #[test]
    fn failure_counts_reset_per_epoch() {
        let mut net = network(1);
        let h = net.head_mut(ClusterId(0)).unwrap();
        let pk = kp("slow").public;
        assert!(!h.register_access_failure(&pk, 10));
        assert!(!h.register_access_failure(&pk, 20));
        assert!(!h.register_access_failure(&pk, 110));
        assert_eq!(h.failure_count(&pk), 1);
    }

    #[test]
    fn change_cluster_moves_requestee() {
        let mut net = network(2);
        let home = kp("home");
        net.add_member(
            ClusterId(0),
            Member::home(NodeId(50), kp("n50"), home.public.clone(), BTreeSet::new()),
        )
        .unwrap();
        assert_eq!(net.requestee_cluster(&home.public), Some(ClusterId(0)));
        net.change_cluster(NodeId(50), ClusterId(1)).unwrap();
        assert_eq!(net.requestee_cluster(&home.public), Some(ClusterId(1)));
        assert_eq!(net.cluster_of(NodeId(50)), Some(ClusterId(1)));
        assert!(net
            .cluster(ClusterId(0))
            .unwrap()
            .member(NodeId(50))
            .is_none());
        assert_eq!(
            net.change_cluster(NodeId(50), ClusterId(9)),
            Err(OverlayError::UnknownCluster(ClusterId(9)))
        );
    }

    #[test]
    fn proof_fanout() {
        let net = network(5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = net.proof_targets(&mut rng, true);
        assert_eq!(t.len(), 2);
        assert_ne!(t[0], t[1]);
        assert!(net.proof_targets(&mut rng, false).is_empty());
    }
}
