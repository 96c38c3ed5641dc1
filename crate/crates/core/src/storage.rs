//! Storage tier: FIFO accounts of blocks, each authenticated by a secret
//! block-number and the hash of its data, with a single forward slot.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{
    encrypt_token, hash_bytes, CryptoProvider, DataHash, KeyPair, PublicKey, SharedKey,
};
use crate::ids::{AccountId, BlockNumber, RandomId, StorageKind};
use crate::serde_hex;
use crate::tx::{SignedHashContext, Transaction, TxKind};

pub const DEFAULT_CAPACITY: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StorageError {
    #[error("block-number and hash do not identify a stored block")]
    AuthFail,
    #[error("claimed hash does not match the received data")]
    HashMismatch,
    #[error("account is full")]
    NoCapacity,
    #[error("block is already chained to a successor")]
    AlreadyChained,
    #[error("unknown account {0:?}")]
    UnknownAccount(AccountId),
    #[error("{kind:?} storage requires a random id")]
    MissingRandomId { kind: StorageKind },
    #[error("{kind:?} storage requires the data hash to be sent")]
    MissingClaimedHash { kind: StorageKind },
    #[error("restore failed at line {line}: {reason}")]
    Restore { line: usize, reason: String },
}

impl StorageError {
    pub fn code(&self) -> &'static str {
        match self {
            StorageError::AuthFail => "auth-fail",
            StorageError::HashMismatch => "hash-mismatch",
            StorageError::NoCapacity => "no-capacity",
            StorageError::AlreadyChained => "already-chained",
            StorageError::UnknownAccount(_) => "unknown-account",
            StorageError::MissingRandomId { .. } => "missing-random-id",
            StorageError::MissingClaimedHash { .. } => "missing-hash",
            StorageError::Restore { .. } => "restore",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageBlock {
    pub block_number: BlockNumber,
    #[serde(with = "serde_hex::vec")]
    pub data: Vec<u8>,
    /// Hash recorded when the block was stored.
    pub data_hash: DataHash,
    pub next: Option<BlockNumber>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageAccount {
    pub account_id: AccountId,
    pub kind: StorageKind,
    pub owner: PublicKey,
    pub head: BlockNumber,
    blocks: Vec<StorageBlock>,
    #[serde(skip)]
    index: BTreeMap<BlockNumber, usize>,
}

impl StorageAccount {
    fn reindex(&mut self) {
        self.index = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (b.block_number, i))
            .collect();
    }

    /// Blocks in insertion order.
    pub fn blocks(&self) -> &[StorageBlock] {
        &self.blocks
    }

    pub fn get(&self, bn: &BlockNumber) -> Option<&StorageBlock> {
        self.index.get(bn).map(|&i| &self.blocks[i])
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    fn authenticate(&self, bn: &BlockNumber, hash: &DataHash) -> Result<usize, StorageError> {
        match self.index.get(bn) {
            Some(&i) if &self.blocks[i].data_hash == hash => Ok(i),
            _ => Err(StorageError::AuthFail),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StoreRequest<'a> {
    pub requester: Option<RandomId>,
    pub account: AccountId,
    pub prev_block_number: BlockNumber,
    pub prev_hash: DataHash,
    pub data: &'a [u8],
    pub claimed_hash: Option<DataHash>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreReceipt {
    /// `nonce || ciphertext` of the new block-number.
    pub encrypted_block_number: Vec<u8>,
    pub data_hash: DataHash,
    /// Hash publication toward the overlay; cloud only.
    pub signed_hash: Option<Transaction>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Retrieved {
    pub block_number: BlockNumber,
    pub data: Vec<u8>,
    /// Hash recorded at store time.
    pub stored_hash: DataHash,
    /// Hash of the bytes actually returned.
    pub computed_hash: DataHash,
}

impl Retrieved {
    pub fn intact(&self) -> bool {
        self.stored_hash == self.computed_hash
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GuardOutcome {
    /// A new empty block now occupies the forward slot.
    Guarded {
        encrypted_block_number: Vec<u8>,
        empty_hash: DataHash,
    },
    /// The slot was already taken; nothing to do.
    AlreadyChained,
}

/// One storage node holding any number of accounts of a single kind.
#[derive(Debug, Clone)]
pub struct StorageNode {
    provider: Arc<dyn CryptoProvider>,
    key: KeyPair,
    kind: StorageKind,
    capacity: usize,
    accounts: BTreeMap<AccountId, StorageAccount>,
    next_account: u64,
    signed_hashes: u64,
    successful_stores: u64,
}

impl StorageNode {
    pub fn new(provider: Arc<dyn CryptoProvider>, key: KeyPair, kind: StorageKind) -> Self {
        Self {
            provider,
            key,
            kind,
            capacity: DEFAULT_CAPACITY,
            accounts: BTreeMap::new(),
            next_account: 1,
            signed_hashes: 0,
            successful_stores: 0,
        }
    }

    pub fn with_capacity(mut self, capacity: usize) -> Self {
        self.capacity = capacity;
        self
    }

    pub fn kind(&self) -> StorageKind {
        self.kind
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.key.public
    }

    pub fn account(&self, id: AccountId) -> Option<&StorageAccount> {
        self.accounts.get(&id)
    }

    pub fn accounts(&self) -> impl Iterator<Item = &StorageAccount> {
        self.accounts.values()
    }

    pub fn signed_hash_count(&self) -> u64 {
        self.signed_hashes
    }

    pub fn successful_stores(&self) -> u64 {
        self.successful_stores
    }

    fn account_mut(&mut self, id: AccountId) -> Result<&mut StorageAccount, StorageError> {
        self.accounts
            .get_mut(&id)
            .ok_or(StorageError::UnknownAccount(id))
    }

    fn fresh_block_number(account: &StorageAccount, rng: &mut dyn RngCore) -> BlockNumber {
        loop {
            let bn = BlockNumber::random(rng);
            if !account.index.contains_key(&bn) {
                return bn;
            }
        }
    }

    /// Open an account with an empty head block. Returns the account, the
    /// head block-number and the hash of the empty head.
    pub fn bootstrap_account(
        &mut self,
        owner: PublicKey,
        rng: &mut dyn RngCore,
    ) -> (AccountId, BlockNumber, DataHash) {
        let id = AccountId(self.next_account);
        self.next_account += 1;
        let head = BlockNumber::random(rng);
        let empty = hash_bytes(&[]);
        let mut acct = StorageAccount {
            account_id: id,
            kind: self.kind,
            owner,
            head,
            blocks: vec![StorageBlock {
                block_number: head,
                data: Vec::new(),
                data_hash: empty,
                next: None,
            }],
            index: BTreeMap::new(),
        };
        acct.reindex();
        self.accounts.insert(id, acct);
        (id, head, empty)
    }

    fn sign_hash(&self, context: SignedHashContext, hash: DataHash, now: u64) -> Transaction {
        let mut tx = Transaction::new(TxKind::SignedHash { context }, now)
            .with_data_hash(hash)
            .with_signer(self.key.public.clone());
        tx.sign_slot(self.provider.as_ref(), 0, &self.key.private)
            .expect("storage owns its slot");
        tx
    }

    fn append_block(
        &mut self,
        account: AccountId,
        prev_index: usize,
        data: Vec<u8>,
        data_hash: DataHash,
        rng: &mut dyn RngCore,
    ) -> Result<BlockNumber, StorageError> {
        let acct = self.account_mut(account)?;
        let bn = Self::fresh_block_number(acct, rng);
        acct.blocks[prev_index].next = Some(bn);
        acct.index.insert(bn, acct.blocks.len());
        acct.blocks.push(StorageBlock {
            block_number: bn,
            data,
            data_hash,
            next: None,
        });
        Ok(bn)
    }

    /// Authenticate by the previous block, then append `data` after it.
    ///
    /// Checks run in order: required identifiers for this kind, block
    /// authentication, forward-slot availability, capacity, hash agreement.
    pub fn store(
        &mut self,
        req: StoreRequest<'_>,
        key: &SharedKey,
        now: u64,
        rng: &mut dyn RngCore,
    ) -> Result<StoreReceipt, StorageError> {
        let kind = self.kind;
        if kind != StorageKind::Local && req.requester.is_none() {
            return Err(StorageError::MissingRandomId { kind });
        }
        if kind == StorageKind::Cloud && req.claimed_hash.is_none() {
            return Err(StorageError::MissingClaimedHash { kind });
        }
        let capacity = self.capacity;
        let acct = self
            .accounts
            .get(&req.account)
            .ok_or(StorageError::UnknownAccount(req.account))?;
        let prev = acct.authenticate(&req.prev_block_number, &req.prev_hash)?;
        if acct.blocks[prev].next.is_some() {
            return Err(StorageError::AlreadyChained);
        }
        if acct.blocks.len() >= capacity {
            return Err(StorageError::NoCapacity);
        }
        let computed = hash_bytes(req.data);
        if let Some(claimed) = req.claimed_hash {
            if claimed != computed {
                return Err(StorageError::HashMismatch);
            }
        }
        let bn = self.append_block(req.account, prev, req.data.to_vec(), computed, rng)?;
        self.successful_stores += 1;
        let signed_hash = (kind == StorageKind::Cloud).then(|| {
            self.signed_hashes += 1;
            self.sign_hash(
                SignedHashContext::StoredData {
                    account: req.account,
                },
                computed,
                now,
            )
        });
        Ok(StoreReceipt {
            encrypted_block_number: encrypt_token(self.provider.as_ref(), key, &bn.0, rng),
            data_hash: computed,
            signed_hash,
        })
    }

    pub fn retrieve(
        &self,
        account: AccountId,
        bn: &BlockNumber,
        hash: &DataHash,
    ) -> Result<Retrieved, StorageError> {
        let acct = self
            .accounts
            .get(&account)
            .ok_or(StorageError::UnknownAccount(account))?;
        let i = acct.authenticate(bn, hash)?;
        Ok(Self::retrieved(&acct.blocks[i]))
    }

    fn retrieved(b: &StorageBlock) -> Retrieved {
        Retrieved {
            block_number: b.block_number,
            data: b.data.clone(),
            stored_hash: b.data_hash,
            computed_hash: hash_bytes(&b.data),
        }
    }

    /// The authenticated block and up to `window - 1` earlier data blocks,
    /// newest first. Empty blocks (head, guards) are skipped.
    pub fn retrieve_window(
        &self,
        account: AccountId,
        bn: &BlockNumber,
        hash: &DataHash,
        window: usize,
    ) -> Result<Vec<Retrieved>, StorageError> {
        let acct = self
            .accounts
            .get(&account)
            .ok_or(StorageError::UnknownAccount(account))?;
        let i = acct.authenticate(bn, hash)?;
        Ok(acct.blocks[..=i]
            .iter()
            .rev()
            .filter(|b| !b.data.is_empty())
            .take(window)
            .map(Self::retrieved)
            .collect())
    }

    /// Storage-signed statement of the hash of returned data.
    pub fn issue_receipt(&self, account: AccountId, returned: &Retrieved, now: u64) -> Transaction {
        self.sign_hash(
            SignedHashContext::RetrievedData {
                account,
                requested: returned.stored_hash,
            },
            returned.computed_hash,
            now,
        )
    }

    /// Occupy the forward slot of an authenticated block with an empty block
    /// so that a disclosed (block-number, hash) pair cannot be extended.
    pub fn pre_chain_guard(
        &mut self,
        account: AccountId,
        bn: &BlockNumber,
        hash: &DataHash,
        key: &SharedKey,
        rng: &mut dyn RngCore,
    ) -> Result<GuardOutcome, StorageError> {
        let acct = self
            .accounts
            .get(&account)
            .ok_or(StorageError::UnknownAccount(account))?;
        let i = acct.authenticate(bn, hash)?;
        if acct.blocks[i].next.is_some() {
            return Ok(GuardOutcome::AlreadyChained);
        }
        if acct.blocks.len() >= self.capacity {
            return Err(StorageError::NoCapacity);
        }
        let empty = hash_bytes(&[]);
        let new_bn = self.append_block(account, i, Vec::new(), empty, rng)?;
        Ok(GuardOutcome::Guarded {
            encrypted_block_number: encrypt_token(self.provider.as_ref(), key, &new_bn.0, rng),
            empty_hash: empty,
        })
    }

    /// Adversary hook: overwrite stored bytes, leaving the recorded hash as is.
    pub fn mutate_for_attack(&mut self, account: AccountId, bn: &BlockNumber, new_data: Vec<u8>) {
        if let Some(acct) = self.accounts.get_mut(&account) {
            if let Some(&i) = acct.index.get(bn) {
                acct.blocks[i].data = new_data;
            }
        }
    }

    /// Header line per account followed by one line per block.
    pub fn dump(&self) -> String {
        #[derive(Serialize)]
        struct Header<'a> {
            account_id: AccountId,
            kind: StorageKind,
            owner: &'a PublicKey,
            head: BlockNumber,
            blocks: usize,
        }
        let mut out = String::new();
        for a in self.accounts.values() {
            let h = Header {
                account_id: a.account_id,
                kind: a.kind,
                owner: &a.owner,
                head: a.head,
                blocks: a.blocks.len(),
            };
            out.push_str(&serde_json::to_string(&h).expect("serializes"));
            out.push('\n');
            for b in &a.blocks {
                out.push_str(&serde_json::to_string(b).expect("serializes"));
                out.push('\n');
            }
        }
        out
    }

    /// Replace all accounts with the contents of a [`dump`](Self::dump).
    pub fn restore(&mut self, text: &str) -> Result<(), StorageError> {
        #[derive(Deserialize)]
        struct Header {
            account_id: AccountId,
            kind: StorageKind,
            owner: PublicKey,
            head: BlockNumber,
            blocks: usize,
        }
        let err = |line: usize, reason: String| StorageError::Restore { line, reason };
        let mut accounts = BTreeMap::new();
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        while let Some((n, line)) = lines.next() {
            let h: Header = serde_json::from_str(line).map_err(|e| err(n + 1, e.to_string()))?;
            let mut blocks = Vec::with_capacity(h.blocks);
            for _ in 0..h.blocks {
                let (n, line) = lines
                    .next()
                    .ok_or_else(|| err(n + 1, "truncated account".into()))?;
                blocks.push(serde_json::from_str(line).map_err(|e| err(n + 1, e.to_string()))?);
            }
            let mut acct = StorageAccount {
                account_id: h.account_id,
                kind: h.kind,
                owner: h.owner,
                head: h.head,
                blocks,
                index: BTreeMap::new(),
            };
            acct.reindex();
            accounts.insert(acct.account_id, acct);
        }
        self.next_account = accounts.keys().last().map_or(1, |a| a.0 + 1);
        self.accounts = accounts;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{decrypt_token, derive_shared_key, SimCrypto};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        node: StorageNode,
        key: SharedKey,
        rng: ChaCha8Rng,
    }

    fn fixture(kind: StorageKind) -> Fixture {
        let p = SimCrypto;
        let sk = SimCrypto::keypair_from_label("cloud");
        let miner = SimCrypto::keypair_from_label("miner");
        let key = derive_shared_key(&p, &miner.private, &sk.public).unwrap();
        Fixture {
            node: StorageNode::new(Arc::new(SimCrypto), sk, kind),
            key,
            rng: ChaCha8Rng::seed_from_u64(1),
        }
    }

    impl Fixture {
        fn store(
            &mut self,
            acct: AccountId,
            prev: (BlockNumber, DataHash),
            data: &[u8],
        ) -> Result<(BlockNumber, DataHash, StoreReceipt), StorageError> {
            let req = StoreRequest {
                requester: Some(RandomId(7)),
                account: acct,
                prev_block_number: prev.0,
                prev_hash: prev.1,
                data,
                claimed_hash: Some(hash_bytes(data)),
            };
            let r = self.node.store(req, &self.key, 0, &mut self.rng)?;
            let bn = decrypt_token(&SimCrypto, &self.key, &r.encrypted_block_number).unwrap();
            Ok((BlockNumber(bn.try_into().unwrap()), r.data_hash, r))
        }
    }

    #[test]
    fn bootstrap_and_empty_retrieve() {
        let mut f = fixture(StorageKind::Cloud);
        let (a1, h1, e) = f
            .node
            .bootstrap_account(SimCrypto::keypair_from_label("o").public, &mut f.rng);
        let (a2, h2, _) = f
            .node
            .bootstrap_account(SimCrypto::keypair_from_label("o").public, &mut f.rng);
        assert_ne!(a1, a2);
        assert_ne!(h1, h2);
        let r = f.node.retrieve_window(a1, &h1, &e, 5).unwrap();
        assert!(r.is_empty());
        assert!(f.node.retrieve(a1, &h1, &e).unwrap().data.is_empty());
    }

    #[test]
    fn cloud_store_emits_one_signed_hash() {
        let mut f = fixture(StorageKind::Cloud);
        let (a, head, e) = f
            .node
            .bootstrap_account(SimCrypto::keypair_from_label("o").public, &mut f.rng);
        let (bn, h, r) = f.store(a, (head, e), b"21.5C").unwrap();
        let sh = r.signed_hash.unwrap();
        crate::tx::validate_tx_signatures(&SimCrypto, &sh).unwrap();
        assert_eq!(sh.data_hash, Some(hash_bytes(b"21.5C")));
        assert_eq!(f.node.retrieve(a, &bn, &h).unwrap().data, b"21.5C");
        assert_eq!(f.node.signed_hash_count(), 1);
    }

    #[test]
    fn store_rejections() {
        let mut f = fixture(StorageKind::Cloud);
        let (a, head, e) = f
            .node
            .bootstrap_account(SimCrypto::keypair_from_label("o").public, &mut f.rng);
        let bad = StoreRequest {
            requester: Some(RandomId(1)),
            account: a,
            prev_block_number: head,
            prev_hash: e,
            data: b"x",
            claimed_hash: Some(hash_bytes(b"y")),
        };
        assert_eq!(
            f.node.store(bad, &f.key, 0, &mut f.rng),
            Err(StorageError::HashMismatch)
        );
        let no_id = StoreRequest {
            requester: None,
            account: a,
            prev_block_number: head,
            prev_hash: e,
            data: b"x",
            claimed_hash: Some(hash_bytes(b"x")),
        };
        assert!(matches!(
            f.node.store(no_id, &f.key, 0, &mut f.rng),
            Err(StorageError::MissingRandomId { .. })
        ));
        f.store(a, (head, e), b"first").unwrap();
        assert_eq!(
            f.store(a, (head, e), b"second").unwrap_err(),
            StorageError::AlreadyChained
        );
        assert_eq!(
            f.store(a, (head, hash_bytes(b"nope")), b"z").unwrap_err(),
            StorageError::AuthFail
        );
    }

    #[test]
    fn capacity_is_enforced() {
        let mut f = fixture(StorageKind::Cloud);
        f.node = f.node.clone().with_capacity(2);
        let (a, head, e) = f
            .node
            .bootstrap_account(SimCrypto::keypair_from_label("o").public, &mut f.rng);
        let (bn, h, _) = f.store(a, (head, e), b"1").unwrap();
        assert_eq!(
            f.store(a, (bn, h), b"2").unwrap_err(),
            StorageError::NoCapacity
        );
    }

    #[test]
    fn local_and_shared_skip_identifiers_and_publication() {
        for kind in [StorageKind::Local, StorageKind::Shared] {
            let mut f = fixture(kind);
            let (a, head, e) = f
                .node
                .bootstrap_account(SimCrypto::keypair_from_label("o").public, &mut f.rng);
            let req = StoreRequest {
                requester: (kind == StorageKind::Shared).then_some(RandomId(3)),
                account: a,
                prev_block_number: head,
                prev_hash: e,
                data: b"d",
                claimed_hash: None,
            };
            let r = f.node.store(req, &f.key, 0, &mut f.rng).unwrap();
            assert!(r.signed_hash.is_none());
            assert_eq!(f.node.signed_hash_count(), 0);
        }
    }

    #[test]
    fn guard_blocks_leaked_handle_but_not_owner() {
        let mut f = fixture(StorageKind::Cloud);
        let (a, head, e) = f
            .node
            .bootstrap_account(SimCrypto::keypair_from_label("o").public, &mut f.rng);
        let (bn, h, _) = f.store(a, (head, e), b"reading").unwrap();
        let g = f
            .node
            .pre_chain_guard(a, &bn, &h, &f.key, &mut f.rng)
            .unwrap();
        let GuardOutcome::Guarded {
            encrypted_block_number,
            empty_hash,
        } = g
        else {
            panic!("expected a guard block")
        };
        assert_eq!(
            f.node
                .pre_chain_guard(a, &bn, &h, &f.key, &mut f.rng)
                .unwrap(),
            GuardOutcome::AlreadyChained
        );
        assert_eq!(
            f.store(a, (bn, h), b"fake").unwrap_err(),
            StorageError::AlreadyChained
        );
        let guard_bn = BlockNumber(
            decrypt_token(&SimCrypto, &f.key, &encrypted_block_number)
                .unwrap()
                .try_into()
                .unwrap(),
        );
        f.store(a, (guard_bn, empty_hash), b"next reading").unwrap();
    }

    #[test]
    fn mutation_is_visible_to_the_user() {
        let mut f = fixture(StorageKind::Cloud);
        let (a, head, e) = f
            .node
            .bootstrap_account(SimCrypto::keypair_from_label("o").public, &mut f.rng);
        let (bn, h, _) = f.store(a, (head, e), b"reading").unwrap();
        assert!(f.node.retrieve(a, &bn, &h).unwrap().intact());
        f.node.mutate_for_attack(a, &bn, b"tampered".to_vec());
        let r = f.node.retrieve(a, &bn, &h).unwrap();
        assert!(!r.intact());
        assert_eq!(r.stored_hash, h);
        let receipt = f.node.issue_receipt(a, &r, 9);
        assert_eq!(receipt.data_hash, Some(hash_bytes(b"tampered")));
    }

    #[test]
    fn dump_restore_round_trip() {
        let mut f = fixture(StorageKind::Cloud);
        let (a, head, e) = f
            .node
            .bootstrap_account(SimCrypto::keypair_from_label("o").public, &mut f.rng);
        let (bn, h, _) = f.store(a, (head, e), b"reading").unwrap();
        let text = f.node.dump();
        let mut other = fixture(StorageKind::Cloud).node;
        other.restore(&text).unwrap();
        assert_eq!(other.retrieve(a, &bn, &h).unwrap().data, b"reading");
        assert_eq!(other.dump(), text);
        assert!(other.restore("{\"bad\":1}").is_err());
    }
}
