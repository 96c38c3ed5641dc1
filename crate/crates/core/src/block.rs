//! Blocks shared by local, shared and overlay chains.

use serde::{Deserialize, Serialize};

use crate::codec::{self, Writer};
use crate::crypto::{hash_bytes, CryptoProvider, PrivateKey, PublicKey};
use crate::ids::{BlockId, TxId};
use crate::policy::PolicyHeader;
use crate::tx::{validate_tx_signatures, SignedHashContext, Transaction, TxError, TxKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockHeader {
    /// Local and shared chains carry the policy in force after this block.
    Policy(PolicyHeader),
    /// Overlay blocks carry a multisig of miner and cosigners over the block id.
    TrustMultisig(Box<Transaction>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub prev: Option<BlockId>,
    pub header: BlockHeader,
    pub txs: Vec<Transaction>,
    pub miner: PublicKey,
}

impl Block {
    /// Content address over prev, policy header (if any), miner and every
    /// transaction including its signatures. The trust multisig is excluded
    /// because it signs this value.
    pub fn content_id(
        prev: Option<BlockId>,
        policy: Option<&PolicyHeader>,
        miner: &PublicKey,
        txs: &[Transaction],
    ) -> BlockId {
        let mut w = Writer::new();
        w.opt_field(prev.as_ref().map(|p| &p.0 .0[..]));
        match policy {
            Some(h) => w.field(&[1]).field(&codec::policy_header(h)),
            None => w.field(&[2]).field(&[]),
        };
        w.field(&codec::public_key(miner)).u32(txs.len() as u32);
        for tx in txs {
            w.field(&tx.full_bytes());
        }
        BlockId(hash_bytes(&w.finish()))
    }

    pub fn id(&self) -> BlockId {
        Self::content_id(self.prev, self.policy(), &self.miner, &self.txs)
    }

    pub fn policy(&self) -> Option<&PolicyHeader> {
        match &self.header {
            BlockHeader::Policy(h) => Some(h),
            BlockHeader::TrustMultisig(_) => None,
        }
    }

    pub fn trust_multisig(&self) -> Option<&Transaction> {
        match &self.header {
            BlockHeader::TrustMultisig(tx) => Some(tx),
            BlockHeader::Policy(_) => None,
        }
    }

    pub fn trust_multisig_mut(&mut self) -> Option<&mut Transaction> {
        match &mut self.header {
            BlockHeader::TrustMultisig(tx) => Some(tx),
            BlockHeader::Policy(_) => None,
        }
    }

    pub fn tx_ids(&self) -> Vec<TxId> {
        self.txs.iter().map(Transaction::id).collect()
    }

    /// Byte size of the block's canonical encoding.
    pub fn encoded_len(&self) -> usize {
        let header = match &self.header {
            BlockHeader::Policy(h) => codec::policy_header(h).len(),
            BlockHeader::TrustMultisig(tx) => tx.full_bytes().len(),
        };
        header + self.txs.iter().map(|t| t.full_bytes().len()).sum::<usize>() + 64
    }

    /// Build an overlay block whose multisig is signed by the miner and has an
    /// empty slot for each cosigner.
    pub fn overlay(
        provider: &dyn CryptoProvider,
        prev: Option<BlockId>,
        txs: Vec<Transaction>,
        miner: &PrivateKey,
        cosigners: &[PublicKey],
        timestamp: u64,
    ) -> Result<Self, TxError> {
        let miner_pk = miner.public().clone();
        let id = Self::content_id(prev, None, &miner_pk, &txs);
        let mut ms = Transaction::new(
            TxKind::SignedHash {
                context: SignedHashContext::BlockContent,
            },
            timestamp,
        )
        .with_data_hash(id.0)
        .with_signer(miner_pk.clone());
        for c in cosigners {
            ms = ms.with_signer(c.clone());
        }
        ms.sign_slot(provider, 0, miner)?;
        Ok(Self {
            prev,
            header: BlockHeader::TrustMultisig(Box::new(ms)),
            txs,
            miner: miner_pk,
        })
    }

    /// Fill the cosigner slot owned by `key`.
    pub fn cosign(
        &mut self,
        provider: &dyn CryptoProvider,
        key: &PrivateKey,
    ) -> Result<(), TxError> {
        let ms = self
            .trust_multisig_mut()
            .ok_or(TxError::Malformed("block has no trust multisig"))?;
        ms.sign_as(provider, key)
    }

    /// Signers of the trust multisig other than the miner.
    pub fn cosigners(&self) -> Vec<PublicKey> {
        self.trust_multisig()
            .map(|ms| ms.slots.iter().skip(1).map(|s| s.signer.clone()).collect())
            .unwrap_or_default()
    }

    /// Verify the trust multisig: right kind, bound to this block's id, first
    /// slot owned by the miner, every slot signed.
    pub fn validate_trust_multisig(&self, provider: &dyn CryptoProvider) -> Result<(), TxError> {
        let ms = self
            .trust_multisig()
            .ok_or(TxError::Malformed("block has no trust multisig"))?;
        if ms.kind
            != (TxKind::SignedHash {
                context: SignedHashContext::BlockContent,
            })
        {
            return Err(TxError::Malformed("trust multisig has the wrong kind"));
        }
        if ms.data_hash != Some(self.id().0) {
            return Err(TxError::Malformed(
                "trust multisig does not cover this block",
            ));
        }
        if ms.signer(0) != Some(&self.miner) {
            return Err(TxError::Malformed("first multisig slot is not the miner"));
        }
        validate_tx_signatures(provider, ms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::SimCrypto;

    #[test]
    fn overlay_block_multisig_round_trip() {
        let p = SimCrypto;
        let miner = SimCrypto::keypair_from_label("ch-a");
        let co = SimCrypto::keypair_from_label("ch-b");
        let mut b = Block::overlay(
            &p,
            None,
            vec![],
            &miner.private,
            std::slice::from_ref(&co.public),
            4,
        )
        .unwrap();
        assert_eq!(
            b.validate_trust_multisig(&p),
            Err(TxError::MissingSignature { slot: 1 })
        );
        let id = b.id();
        b.cosign(&p, &co.private).unwrap();
        assert_eq!(b.id(), id, "cosigning does not change the content id");
        assert_eq!(b.validate_trust_multisig(&p), Ok(()));
        b.prev = Some(id);
        assert!(matches!(
            b.validate_trust_multisig(&p),
            Err(TxError::Malformed(_))
        ));
    }

    #[test]
    fn lone_miner_cannot_form_multisig() {
        let p = SimCrypto;
        let miner = SimCrypto::keypair_from_label("ch-a");
        let b = Block::overlay(&p, None, vec![], &miner.private, &[], 0).unwrap();
        assert!(matches!(
            b.validate_trust_multisig(&p),
            Err(TxError::WrongSlotCount { .. })
        ));
    }
}
