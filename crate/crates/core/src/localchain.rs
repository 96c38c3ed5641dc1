//! The home miner and its owner-managed local chain.
//!
//! Blocks are appended without any puzzle and without re-verification.
//! Transactions take effect as soon as they are accepted into the pending
//! pool; mining only batches them. Every block header carries the policy in
//! force once the block's transactions are applied.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::block::{Block, BlockHeader};
use crate::crypto::{
    derive_shared_key, CryptoProvider, DataHash, KeyPair, PrivateKey, PublicKey, SharedKey,
};
use crate::ids::{AccountId, BlockId, BlockNumber, DeviceId, StorageKind, TxId};
use crate::policy::{Action, Decision, PolicyError, PolicyHeader, PolicyRule, Subject};
use crate::tx::{validate_tx_signatures, Transaction, TxError, TxKind};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LocalChainError {
    #[error("caller is not authenticated as the owner")]
    NotOwner,
    #[error("device {0} already has a ledger")]
    DuplicateDevice(DeviceId),
    #[error("device {0} is unknown")]
    UnknownDevice(DeviceId),
    #[error("device {0} was removed and has no ledger")]
    NoLedger(DeviceId),
    #[error("device {0} has no starting transaction")]
    NoStartingTransaction(DeviceId),
    #[error("transaction does not extend the ledger of {device}")]
    BrokenChain {
        device: DeviceId,
        expected: Option<TxId>,
        found: Option<TxId>,
    },
    #[error("policy denies {action:?} on {device}")]
    PolicyViolation { device: DeviceId, action: Action },
    #[error("devices {0} and {1} share no key")]
    NoDeviceKey(DeviceId, DeviceId),
    #[error("block {0} is not in the chain")]
    UnknownBlock(BlockId),
    #[error("block {0} points to a missing predecessor")]
    BrokenBlockLink(BlockId),
    #[error("{0} transactions are owner operations")]
    OwnerOnlyKind(&'static str),
    #[error("request is not a two-party transaction")]
    NotARequest,
    #[error("request signature invalid: {0}")]
    BadRequest(TxError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tx(#[from] TxError),
    #[error("import failed at line {line}: {reason}")]
    Import { line: usize, reason: String },
}

impl LocalChainError {
    pub fn code(&self) -> &'static str {
        match self {
            LocalChainError::NotOwner => "not-owner",
            LocalChainError::DuplicateDevice(_) => "duplicate",
            LocalChainError::UnknownDevice(_) => "unknown-device",
            LocalChainError::NoLedger(_) => "no-ledger",
            LocalChainError::NoStartingTransaction(_) => "no-starting-transaction",
            LocalChainError::BrokenChain { .. } => "broken-chain",
            LocalChainError::PolicyViolation { .. } => "policy-violation",
            LocalChainError::NoDeviceKey(..) => "no-device-key",
            LocalChainError::UnknownBlock(_) => "unknown-block",
            LocalChainError::BrokenBlockLink(_) => "broken-block-link",
            LocalChainError::OwnerOnlyKind(_) => "owner-only",
            LocalChainError::NotARequest => "not-a-request",
            LocalChainError::BadRequest(_) => "bad-request",
            LocalChainError::Policy(_) => "invalid-policy",
            LocalChainError::Tx(_) => "invalid-tx",
            LocalChainError::Import { .. } => "import",
        }
    }
}

/// All blocks ever appended, including forks. The tip is the end of the
/// longest branch; on equal length the earlier tip is kept.
#[derive(Debug, Clone, Default)]
pub struct LocalChain {
    blocks: Vec<Block>,
    ids: Vec<BlockId>,
    heights: Vec<u64>,
    index: BTreeMap<BlockId, usize>,
    tip: Option<usize>,
}

impl LocalChain {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, block: Block) -> Result<BlockId, LocalChainError> {
        let id = block.id();
        let height = match block.prev {
            None => 1,
            Some(p) => {
                let &i = self
                    .index
                    .get(&p)
                    .ok_or(LocalChainError::BrokenBlockLink(id))?;
                self.heights[i] + 1
            }
        };
        if self.index.contains_key(&id) {
            return Ok(id);
        }
        let idx = self.blocks.len();
        self.blocks.push(block);
        self.ids.push(id);
        self.heights.push(height);
        self.index.insert(id, idx);
        if self.tip.is_none_or(|t| height > self.heights[t]) {
            self.tip = Some(idx);
        }
        Ok(id)
    }

    pub fn tip(&self) -> Option<BlockId> {
        self.tip.map(|i| self.ids[i])
    }

    pub fn tip_block(&self) -> Option<&Block> {
        self.tip.map(|i| &self.blocks[i])
    }

    pub fn get(&self, id: &BlockId) -> Option<&Block> {
        self.index.get(id).map(|&i| &self.blocks[i])
    }

    pub fn contains(&self, id: &BlockId) -> bool {
        self.index.contains_key(id)
    }

    /// Blocks on the branch ending at the tip, oldest first.
    pub fn main_chain(&self) -> Vec<&Block> {
        let mut out = Vec::new();
        let mut cur = self.tip;
        while let Some(i) = cur {
            out.push(&self.blocks[i]);
            cur = self.blocks[i].prev.map(|p| self.index[&p]);
        }
        out.reverse();
        out
    }

    /// Every stored block in insertion order, forks included.
    pub fn all_blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn tx_count(&self) -> usize {
        self.blocks.iter().map(|b| b.txs.len()).sum()
    }

    /// Number of children of each block; more than one means a fork.
    pub fn fork_points(&self) -> Vec<BlockId> {
        let mut children: BTreeMap<BlockId, usize> = BTreeMap::new();
        for b in &self.blocks {
            if let Some(p) = b.prev {
                *children.entry(p).or_default() += 1;
            }
        }
        children
            .into_iter()
            .filter(|(_, n)| *n > 1)
            .map(|(id, _)| id)
            .collect()
    }

    /// Recompute every block id and check that each predecessor exists.
    pub fn validate(&self) -> Result<(), LocalChainError> {
        for (b, id) in self.blocks.iter().zip(&self.ids) {
            if b.id() != *id {
                return Err(LocalChainError::BrokenBlockLink(*id));
            }
            if let Some(p) = b.prev {
                if !self.index.contains_key(&p) {
                    return Err(LocalChainError::BrokenBlockLink(*id));
                }
            }
        }
        Ok(())
    }

    /// One JSON object per line, in insertion order.
    pub fn export_jsonl(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            out.push_str(&serde_json::to_string(b).expect("blocks serialize"));
            out.push('\n');
        }
        out
    }

    pub fn import_jsonl(text: &str) -> Result<Self, LocalChainError> {
        let mut chain = Self::new();
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let block: Block = serde_json::from_str(line).map_err(|e| LocalChainError::Import {
                line: i + 1,
                reason: e.to_string(),
            })?;
            chain.append(block).map_err(|e| LocalChainError::Import {
                line: i + 1,
                reason: e.to_string(),
            })?;
        }
        Ok(chain)
    }
}

/// Where a device's data lives and how to extend it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageHandle {
    pub account: AccountId,
    pub kind: StorageKind,
    /// Block the next store chains from.
    pub tip: (BlockNumber, DataHash),
    /// Most recent block that holds device data.
    pub last_data: Option<(BlockNumber, DataHash)>,
}

/// Proof of possession of the owner key for one operation.
#[derive(Debug, Clone)]
pub struct OwnerAuth {
    signature: Vec<u8>,
}

impl OwnerAuth {
    pub fn sign(provider: &dyn CryptoProvider, owner: &PrivateKey, challenge: &[u8]) -> Self {
        let signature = provider
            .sign(owner, challenge)
            .map(|s| s.bytes)
            .unwrap_or_default();
        Self { signature }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MinerConfig {
    /// Pending transactions that trigger mining.
    pub block_size: usize,
}

impl Default for MinerConfig {
    fn default() -> Self {
        Self { block_size: 5 }
    }
}

#[derive(Debug, Clone)]
pub struct Miner {
    provider: Arc<dyn CryptoProvider>,
    key: KeyPair,
    owner: PublicKey,
    auth_counter: u64,
    cfg: MinerConfig,
    chain: LocalChain,
    policy: PolicyHeader,
    ledgers: BTreeMap<DeviceId, Vec<TxId>>,
    removed: BTreeSet<DeviceId>,
    txs: BTreeMap<TxId, Transaction>,
    pending: Vec<Transaction>,
    storage_handles: BTreeMap<DeviceId, StorageHandle>,
    device_keys: BTreeMap<(DeviceId, DeviceId), SharedKey>,
    puzzle_iterations: u64,
    now: u64,
}

impl Miner {
    pub fn new(
        provider: Arc<dyn CryptoProvider>,
        key: KeyPair,
        owner: PublicKey,
        cfg: MinerConfig,
    ) -> Self {
        Self {
            provider,
            key,
            owner,
            auth_counter: 0,
            cfg,
            chain: LocalChain::new(),
            policy: PolicyHeader::default(),
            ledgers: BTreeMap::new(),
            removed: BTreeSet::new(),
            txs: BTreeMap::new(),
            pending: Vec::new(),
            storage_handles: BTreeMap::new(),
            device_keys: BTreeMap::new(),
            puzzle_iterations: 0,
            now: 0,
        }
    }

    pub fn set_time(&mut self, now: u64) {
        self.now = now;
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.key.public
    }

    pub fn private_key(&self) -> &PrivateKey {
        &self.key.private
    }

    pub fn owner(&self) -> &PublicKey {
        &self.owner
    }

    pub fn config(&self) -> MinerConfig {
        self.cfg
    }

    pub fn provider(&self) -> &dyn CryptoProvider {
        self.provider.as_ref()
    }

    /// Bytes the owner must sign to authorize the next owner operation.
    pub fn challenge(&self) -> Vec<u8> {
        let mut c = b"homechain/owner-auth".to_vec();
        c.extend_from_slice(&self.key.public.bytes);
        c.extend_from_slice(&self.auth_counter.to_be_bytes());
        c
    }

    /// Sign the current challenge with `owner_key`.
    pub fn owner_auth(&self, owner_key: &PrivateKey) -> OwnerAuth {
        OwnerAuth::sign(self.provider.as_ref(), owner_key, &self.challenge())
    }

    fn authenticate(&mut self, auth: &OwnerAuth) -> Result<(), LocalChainError> {
        match self
            .provider
            .verify(&self.owner, &self.challenge(), &auth.signature)
        {
            Ok(true) => {
                self.auth_counter += 1;
                Ok(())
            }
            _ => Err(LocalChainError::NotOwner),
        }
    }

    fn signed(&self, tx: Transaction) -> Transaction {
        let mut tx = tx.with_signer(self.key.public.clone());
        let idx = tx.slots.len() - 1;
        tx.sign_slot(self.provider.as_ref(), idx, &self.key.private)
            .expect("miner owns its slot");
        tx
    }

    pub fn chain(&self) -> &LocalChain {
        &self.chain
    }

    /// Effective policy, including updates still in the pending pool.
    pub fn policy(&self) -> &PolicyHeader {
        &self.policy
    }

    pub fn pending(&self) -> &[Transaction] {
        &self.pending
    }

    pub fn tx(&self, id: &TxId) -> Option<&Transaction> {
        self.txs.get(id)
    }

    pub fn tx_count(&self) -> usize {
        self.txs.len()
    }

    pub fn ledger(&self, device: &DeviceId) -> Option<&[TxId]> {
        self.ledgers.get(device).map(Vec::as_slice)
    }

    pub fn devices(&self) -> impl Iterator<Item = &DeviceId> {
        self.ledgers.keys()
    }

    pub fn has_device(&self, device: &DeviceId) -> bool {
        self.ledgers.contains_key(device)
    }

    pub fn ledger_tip(&self, device: &DeviceId) -> Option<TxId> {
        self.ledgers.get(device).and_then(|l| l.last().copied())
    }

    /// Latest store transaction of `device`.
    pub fn latest_store(&self, device: &DeviceId) -> Option<&Transaction> {
        self.ledgers
            .get(device)?
            .iter()
            .rev()
            .filter_map(|id| self.txs.get(id))
            .find(|tx| matches!(tx.kind, TxKind::Store { .. }))
    }

    /// Keys granted any right by the owner.
    pub fn authorized_pks(&self) -> BTreeSet<PublicKey> {
        self.policy.granted_keys()
    }

    pub fn puzzle_iterations(&self) -> u64 {
        self.puzzle_iterations
    }

    pub fn storage_handle(&self, device: &DeviceId) -> Option<&StorageHandle> {
        self.storage_handles.get(device)
    }

    pub fn set_storage_handle(&mut self, device: DeviceId, handle: StorageHandle) {
        self.storage_handles.insert(device, handle);
    }

    pub fn check_policy(&self, subject: &Subject, device: &DeviceId, action: Action) -> Decision {
        self.policy.decide(&self.owner, subject, device, action)
    }

    fn require_ledger(&self, device: &DeviceId) -> Result<(), LocalChainError> {
        if self.ledgers.contains_key(device) {
            Ok(())
        } else if self.removed.contains(device) {
            Err(LocalChainError::NoLedger(device.clone()))
        } else {
            Err(LocalChainError::NoStartingTransaction(device.clone()))
        }
    }

    /// Gate for device-originated actions: the device must be enrolled and
    /// the policy must grant it `action` on itself.
    pub fn check_device_action(
        &self,
        device: &DeviceId,
        action: Action,
    ) -> Result<(), LocalChainError> {
        self.require_ledger(device)?;
        if self
            .check_policy(&Subject::Device(device.clone()), device, action)
            .is_allow()
        {
            Ok(())
        } else {
            Err(LocalChainError::PolicyViolation {
                device: device.clone(),
                action,
            })
        }
    }

    fn push(&mut self, tx: Transaction) -> TxId {
        let id = tx.id();
        if let Some(d) = &tx.device {
            if let Some(l) = self.ledgers.get_mut(d) {
                l.push(id);
            }
        }
        self.txs.insert(id, tx.clone());
        self.pending.push(tx);
        if self.pending.len() >= self.cfg.block_size {
            self.mine_block();
        }
        id
    }

    fn push_policy_update(&mut self, header: PolicyHeader) -> Transaction {
        if self
            .pending
            .iter()
            .any(|t| matches!(t.kind, TxKind::PolicyUpdate { .. }))
        {
            self.mine_block();
        }
        let tx = self.signed(Transaction::new(
            TxKind::PolicyUpdate {
                rules: header.rules.clone(),
            },
            self.now,
        ));
        self.policy = header;
        self.push(tx.clone());
        tx
    }

    /// Enroll `device` with a starting transaction and extend the policy.
    pub fn add_device(
        &mut self,
        auth: &OwnerAuth,
        device: DeviceId,
        rules: Vec<PolicyRule>,
    ) -> Result<Transaction, LocalChainError> {
        self.authenticate(auth)?;
        if self.ledgers.contains_key(&device) {
            return Err(LocalChainError::DuplicateDevice(device));
        }
        let header = if rules.is_empty() {
            None
        } else {
            Some(self.policy.merged(&rules)?)
        };
        self.removed.remove(&device);
        self.ledgers.insert(device.clone(), Vec::new());
        let genesis = self.signed(Transaction::new(TxKind::Genesis, self.now).with_device(device));
        self.push(genesis.clone());
        if let Some(h) = header {
            self.push_policy_update(h);
        }
        Ok(genesis)
    }

    /// Delete the ledger index of `device`. Mined blocks are untouched.
    pub fn remove_device(
        &mut self,
        auth: &OwnerAuth,
        device: &DeviceId,
    ) -> Result<Transaction, LocalChainError> {
        self.authenticate(auth)?;
        if !self.ledgers.contains_key(device) {
            return Err(LocalChainError::UnknownDevice(device.clone()));
        }
        let tx = self.signed(
            Transaction::new(TxKind::RemoveDevice, self.now)
                .with_device(device.clone())
                .with_prev(self.ledger_tip(device)),
        );
        self.push(tx.clone());
        self.ledgers.remove(device);
        self.removed.insert(device.clone());
        self.storage_handles.remove(device);
        self.device_keys
            .retain(|(a, b), _| a != device && b != device);
        Ok(tx)
    }

    /// Replace the rule set. The version advances even if the rules are unchanged.
    pub fn update_policy(
        &mut self,
        auth: &OwnerAuth,
        rules: Vec<PolicyRule>,
    ) -> Result<Transaction, LocalChainError> {
        self.authenticate(auth)?;
        let header = self.policy.replaced(rules)?;
        Ok(self.push_policy_update(header))
    }

    /// Accept a device or service transaction into the pending pool.
    pub fn append_tx(&mut self, tx: Transaction) -> Result<TxId, LocalChainError> {
        match &tx.kind {
            TxKind::Genesis | TxKind::PolicyUpdate { .. } | TxKind::RemoveDevice => {
                return Err(LocalChainError::OwnerOnlyKind(tx.kind.name()))
            }
            _ => {}
        }
        if let Some(device) = &tx.device {
            self.require_ledger(device)?;
            let expected = self.ledger_tip(device);
            if tx.prev_tx != expected {
                return Err(LocalChainError::BrokenChain {
                    device: device.clone(),
                    expected,
                    found: tx.prev_tx,
                });
            }
            if let TxKind::Store { target } = tx.kind {
                self.check_device_action(device, Action::store(target))?;
            }
        }
        Ok(self.push(tx))
    }

    /// Build a miner-signed store transaction extending `device`'s ledger.
    pub fn store_tx(
        &self,
        device: &DeviceId,
        target: StorageKind,
        bn: BlockNumber,
        hash: DataHash,
    ) -> Transaction {
        self.signed(
            Transaction::new(TxKind::Store { target }, self.now)
                .with_device(device.clone())
                .with_prev(self.ledger_tip(device))
                .with_block_number(bn)
                .with_data_hash(hash),
        )
    }

    /// Build and append a miner-signed transaction of `kind` about `device`.
    pub fn record(
        &mut self,
        kind: TxKind,
        device: Option<DeviceId>,
        data_hash: Option<DataHash>,
    ) -> Result<TxId, LocalChainError> {
        let mut tx = Transaction::new(kind, self.now);
        if let Some(d) = device {
            tx.prev_tx = self.ledger_tip(&d);
            tx.device = Some(d);
        }
        tx.data_hash = data_hash;
        let tx = self.signed(tx);
        self.append_tx(tx)
    }

    /// Resolve a two-party request signed by its requester: decide, set the
    /// output bit, chain it into the requested device's ledger, countersign
    /// and record it.
    pub fn resolve_request(
        &mut self,
        mut tx: Transaction,
    ) -> Result<(Transaction, Decision), LocalChainError> {
        let action = match &tx.kind {
            TxKind::Access { scope } => Action::access(*scope),
            TxKind::Monitor => Action::Monitor,
            _ => return Err(LocalChainError::NotARequest),
        };
        tx.validate_shape().map_err(LocalChainError::BadRequest)?;
        if tx.signer(1) != Some(&self.key.public) {
            return Err(LocalChainError::BadRequest(TxError::SignerMismatch));
        }
        let requester = tx.slots[0].signer.clone();
        let sig = tx.slots[0]
            .signature
            .clone()
            .ok_or(LocalChainError::BadRequest(TxError::MissingSignature {
                slot: 0,
            }))?;
        if !matches!(
            self.provider.verify(&requester, &tx.request_bytes(), &sig),
            Ok(true)
        ) {
            return Err(LocalChainError::BadRequest(TxError::InvalidSignature {
                slot: 0,
            }));
        }
        let device = tx
            .device
            .clone()
            .ok_or(LocalChainError::BadRequest(TxError::Malformed(
                "request names no device",
            )))?;
        self.require_ledger(&device)?;
        let decision = self.check_policy(&Subject::Key(requester), &device, action);
        tx.output_bit = Some(decision.is_allow());
        tx.prev_tx = self.ledger_tip(&device);
        tx.sign_slot(self.provider.as_ref(), 1, &self.key.private)?;
        self.push(tx.clone());
        Ok((tx, decision))
    }

    fn device_keypair(&self, device: &DeviceId) -> KeyPair {
        let mut seed = b"homechain/device".to_vec();
        seed.extend_from_slice(&self.key.public.bytes);
        seed.push(0);
        seed.extend_from_slice(device.as_str().as_bytes());
        self.provider.keypair_from_seed(&seed)
    }

    /// Give two enrolled devices a pairwise key so they may talk directly.
    pub fn grant_device_key(
        &mut self,
        auth: &OwnerAuth,
        a: &DeviceId,
        b: &DeviceId,
    ) -> Result<SharedKey, LocalChainError> {
        self.authenticate(auth)?;
        for d in [a, b] {
            if !self.ledgers.contains_key(d) {
                return Err(LocalChainError::UnknownDevice(d.clone()));
            }
        }
        let ka = self.device_keypair(a);
        let kb = self.device_keypair(b);
        let key = derive_shared_key(self.provider.as_ref(), &ka.private, &kb.public)
            .expect("device keys come from this provider");
        self.device_keys.insert((a.clone(), b.clone()), key.clone());
        self.device_keys.insert((b.clone(), a.clone()), key.clone());
        Ok(key)
    }

    pub fn device_key(&self, a: &DeviceId, b: &DeviceId) -> Option<&SharedKey> {
        self.device_keys.get(&(a.clone(), b.clone()))
    }

    /// Gate for a direct message between two devices.
    pub fn device_message(
        &self,
        from: &DeviceId,
        to: &DeviceId,
    ) -> Result<&SharedKey, LocalChainError> {
        self.require_ledger(from)?;
        self.require_ledger(to)?;
        self.device_key(from, to)
            .ok_or_else(|| LocalChainError::NoDeviceKey(from.clone(), to.clone()))
    }

    fn header_after(prev: Option<&Block>, txs: &[Transaction]) -> PolicyHeader {
        let base = prev.and_then(Block::policy).cloned().unwrap_or_default();
        match txs.iter().rev().find_map(|t| match &t.kind {
            TxKind::PolicyUpdate { rules } => Some(rules.clone()),
            _ => None,
        }) {
            Some(rules) => PolicyHeader {
                rules,
                version: base.version + 1,
            },
            None => base,
        }
    }

    /// Batch the pending pool into a block on the tip. `None` if nothing is pending.
    pub fn mine_block(&mut self) -> Option<Block> {
        if self.pending.is_empty() {
            return None;
        }
        let txs = std::mem::take(&mut self.pending);
        let header = Self::header_after(self.chain.tip_block(), &txs);
        let block = Block {
            prev: self.chain.tip(),
            header: BlockHeader::Policy(header),
            txs,
            miner: self.key.public.clone(),
        };
        self.chain.append(block.clone()).expect("tip exists");
        Some(block)
    }

    /// Mine whatever is pending regardless of block size.
    pub fn flush(&mut self) -> Option<Block> {
        self.mine_block()
    }

    /// Owner-created block on an arbitrary parent.
    pub fn fork_block(
        &mut self,
        auth: &OwnerAuth,
        parent: BlockId,
        txs: Vec<Transaction>,
    ) -> Result<BlockId, LocalChainError> {
        self.authenticate(auth)?;
        let parent_block = self
            .chain
            .get(&parent)
            .ok_or(LocalChainError::UnknownBlock(parent))?;
        let header = Self::header_after(Some(parent_block), &txs);
        self.chain.append(Block {
            prev: Some(parent),
            header: BlockHeader::Policy(header),
            txs,
            miner: self.key.public.clone(),
        })
    }

    /// Follow `prev_tx` links from the newest entry of `device`'s ledger back
    /// to its starting transaction. Returns the number of hops.
    pub fn verify_ledger(&self, device: &DeviceId) -> Result<usize, LocalChainError> {
        let ledger = self
            .ledgers
            .get(device)
            .ok_or_else(|| LocalChainError::UnknownDevice(device.clone()))?;
        let broken = |found| LocalChainError::BrokenChain {
            device: device.clone(),
            expected: None,
            found,
        };
        let mut hops = 0;
        let mut cur = *ledger.last().ok_or_else(|| broken(None))?;
        loop {
            let tx = self.txs.get(&cur).ok_or_else(|| broken(Some(cur)))?;
            match tx.prev_tx {
                None if tx.kind == TxKind::Genesis => return Ok(hops),
                None => return Err(broken(Some(cur))),
                Some(p) => {
                    cur = p;
                    hops += 1;
                }
            }
        }
    }

    /// Signature check of every transaction held locally.
    pub fn audit_signatures(&self) -> Result<(), TxError> {
        self.txs
            .values()
            .try_for_each(|tx| validate_tx_signatures(self.provider.as_ref(), tx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{hash_bytes, SimCrypto};
    use crate::ids::AccessScope;
    use crate::policy::PrivacyLevel;

    struct Home {
        miner: Miner,
        owner: KeyPair,
    }

    impl Home {
        fn new(block_size: usize) -> Self {
            let owner = SimCrypto::keypair_from_label("owner");
            let miner = Miner::new(
                Arc::new(SimCrypto),
                SimCrypto::keypair_from_label("aheu1938k3"),
                owner.public.clone(),
                MinerConfig { block_size },
            );
            Self { miner, owner }
        }

        fn auth(&self) -> OwnerAuth {
            self.miner.owner_auth(&self.owner.private)
        }

        fn add(&mut self, dev: &str, actions: &[Action]) {
            let d = DeviceId::new(dev);
            let rules = vec![PolicyRule::new(
                Subject::Device(d.clone()),
                d.clone(),
                actions.iter().copied(),
                PrivacyLevel::Minimal,
            )
            .unwrap()];
            let a = self.auth();
            self.miner.add_device(&a, d, rules).unwrap();
        }

        fn store(&mut self, dev: &str) -> Result<TxId, LocalChainError> {
            let d = DeviceId::new(dev);
            let tx = self.miner.store_tx(
                &d,
                StorageKind::Cloud,
                BlockNumber([1; 16]),
                hash_bytes(dev.as_bytes()),
            );
            self.miner.append_tx(tx)
        }
    }

    #[test]
    fn enrollment_and_duplicates() {
        let mut h = Home::new(100);
        h.add("thermostat", &[Action::StoreCloud]);
        assert!(h.store("thermostat").is_ok());
        let a = h.auth();
        assert_eq!(
            h.miner.add_device(&a, DeviceId::new("thermostat"), vec![]),
            Err(LocalChainError::DuplicateDevice(DeviceId::new(
                "thermostat"
            )))
        );
        assert_eq!(
            h.store("rogue").unwrap_err().code(),
            "no-starting-transaction"
        );
    }

    #[test]
    fn removal_blocks_new_txs_and_keeps_blocks() {
        let mut h = Home::new(2);
        h.add("cam", &[Action::StoreCloud]);
        h.store("cam").unwrap();
        let before: Vec<BlockId> = h.miner.chain().all_blocks().iter().map(Block::id).collect();
        let a = h.auth();
        h.miner.remove_device(&a, &DeviceId::new("cam")).unwrap();
        assert_eq!(h.store("cam").unwrap_err().code(), "no-ledger");
        let a = h.auth();
        assert_eq!(
            h.miner
                .remove_device(&a, &DeviceId::new("cam"))
                .unwrap_err()
                .code(),
            "unknown-device"
        );
        h.miner.flush();
        let after: Vec<BlockId> = h.miner.chain().all_blocks().iter().map(Block::id).collect();
        assert_eq!(&after[..before.len()], &before[..]);
        h.miner.chain().validate().unwrap();
    }

    #[test]
    fn broken_chain_and_policy_violation() {
        let mut h = Home::new(100);
        h.add("t", &[Action::StoreLocal]);
        let d = DeviceId::new("t");
        let mut tx = h.miner.store_tx(
            &d,
            StorageKind::Local,
            BlockNumber([0; 16]),
            hash_bytes(b"x"),
        );
        tx.prev_tx = None;
        assert_eq!(h.miner.append_tx(tx).unwrap_err().code(), "broken-chain");
        assert_eq!(h.store("t").unwrap_err().code(), "policy-violation");
    }

    #[test]
    fn non_owner_is_rejected() {
        let mut h = Home::new(100);
        let intruder = SimCrypto::keypair_from_label("intruder");
        let forged = h.miner.owner_auth(&intruder.private);
        assert_eq!(
            h.miner.add_device(&forged, DeviceId::new("x"), vec![]),
            Err(LocalChainError::NotOwner)
        );
        assert_eq!(
            h.miner.update_policy(&forged, vec![]).unwrap_err(),
            LocalChainError::NotOwner
        );
        // a used challenge cannot be replayed
        let a = h.auth();
        h.miner.add_device(&a, DeviceId::new("x"), vec![]).unwrap();
        assert_eq!(
            h.miner
                .add_device(&a, DeviceId::new("y"), vec![])
                .unwrap_err(),
            LocalChainError::NotOwner
        );
    }

    #[test]
    fn mining_batches_in_arrival_order_without_puzzles() {
        let mut h = Home::new(100);
        h.add("t", &[Action::StoreCloud]);
        h.miner.flush();
        let ids: Vec<TxId> = (0..3).map(|_| h.store("t").unwrap()).collect();
        let b = h.miner.mine_block().unwrap();
        assert_eq!(b.tx_ids(), ids);
        assert!(h.miner.mine_block().is_none());
        assert_eq!(h.miner.puzzle_iterations(), 0);
        let prev = h.miner.chain().get(&b.prev.unwrap()).unwrap();
        assert_eq!(b.policy(), prev.policy());
    }

    #[test]
    fn policy_update_versions() {
        let mut h = Home::new(100);
        h.add("t", &[Action::StoreCloud]);
        let a = h.auth();
        let rules = h.miner.policy().rules.clone();
        h.miner.update_policy(&a, rules.clone()).unwrap();
        let blocks = h.miner.chain().all_blocks().to_vec();
        assert_eq!(blocks.len(), 1, "second update forced a mine");
        assert_eq!(blocks[0].policy().unwrap().version, 1);
        h.miner.flush();
        let last = h.miner.chain().tip_block().unwrap();
        assert_eq!(last.policy().unwrap().version, 2);
        assert_eq!(last.policy().unwrap().rules, rules);
    }

    #[test]
    fn access_grant_and_revoke() {
        let mut h = Home::new(100);
        h.add("thermostat", &[Action::StoreCloud]);
        let sp = SimCrypto::keypair_from_label("76sj18394");
        let d = DeviceId::new("thermostat");
        let mut rules = h.miner.policy().rules.clone();
        rules.push(
            PolicyRule::new(
                Subject::Key(sp.public.clone()),
                d.clone(),
                [Action::AccessFullChain],
                PrivacyLevel::FullChain,
            )
            .unwrap(),
        );
        let a = h.auth();
        h.miner.update_policy(&a, rules.clone()).unwrap();

        let miner_pk = h.miner.public_key().clone();
        let request = |ts| {
            let mut tx = Transaction::new(
                TxKind::Access {
                    scope: AccessScope::FullChain,
                },
                ts,
            )
            .with_device(d.clone())
            .with_signer(sp.public.clone())
            .with_signer(miner_pk.clone());
            tx.sign_slot(&SimCrypto, 0, &sp.private).unwrap();
            tx
        };
        let req = request(1);
        let (tx, decision) = h.miner.resolve_request(req).unwrap();
        assert_eq!(decision.level(), Some(PrivacyLevel::FullChain));
        assert_eq!(tx.output_bit, Some(true));
        validate_tx_signatures(&SimCrypto, &tx).unwrap();
        assert_eq!(h.miner.ledger_tip(&d), Some(tx.id()));

        rules.pop();
        let a = h.auth();
        h.miner.update_policy(&a, rules).unwrap();
        let req = request(2);
        let (tx, decision) = h.miner.resolve_request(req).unwrap();
        assert_eq!(decision, Decision::Deny);
        assert_eq!(tx.output_bit, Some(false));
        assert_eq!(h.miner.verify_ledger(&d).unwrap(), 2);
    }

    #[test]
    fn device_keys() {
        let mut h = Home::new(100);
        for d in ["a", "b", "c"] {
            h.add(d, &[Action::DeviceToDevice]);
        }
        let (a, b, c) = (DeviceId::new("a"), DeviceId::new("b"), DeviceId::new("c"));
        assert_eq!(
            h.miner.device_message(&a, &b).unwrap_err().code(),
            "no-device-key"
        );
        let auth = h.auth();
        let k = h.miner.grant_device_key(&auth, &a, &b).unwrap();
        assert_eq!(h.miner.device_key(&b, &a), Some(&k));
        assert!(h.miner.device_message(&a, &b).is_ok());
        assert!(h.miner.device_message(&a, &c).is_err());
        let auth = h.auth();
        assert_eq!(
            h.miner
                .grant_device_key(&auth, &a, &DeviceId::new("zz"))
                .unwrap_err()
                .code(),
            "unknown-device"
        );
    }

    #[test]
    fn forks_keep_longest_branch() {
        let mut h = Home::new(1);
        h.add("t", &[Action::StoreCloud]);
        let blocks: Vec<BlockId> = h.miner.chain().all_blocks().iter().map(Block::id).collect();
        assert_eq!(blocks.len(), 2);
        let tip = h.miner.chain().tip().unwrap();
        let a = h.auth();
        let fork = h.miner.fork_block(&a, blocks[0], vec![]).unwrap();
        assert_eq!(h.miner.chain().tip(), Some(tip), "tie keeps current tip");
        assert_eq!(h.miner.chain().fork_points(), vec![blocks[0]]);
        let a = h.auth();
        let longer = h.miner.fork_block(&a, fork, vec![]).unwrap();
        assert_eq!(h.miner.chain().tip(), Some(longer));
    }

    #[test]
    fn export_import_round_trip() {
        let mut h = Home::new(2);
        h.add("t", &[Action::StoreCloud]);
        h.store("t").unwrap();
        h.store("t").unwrap();
        let text = h.miner.chain().export_jsonl();
        assert_eq!(text.lines().count(), h.miner.chain().len());
        let back = LocalChain::import_jsonl(&text).unwrap();
        assert_eq!(back.tip(), h.miner.chain().tip());
        assert!(matches!(
            LocalChain::import_jsonl("{not json"),
            Err(LocalChainError::Import { line: 1, .. })
        ));
    }
}
