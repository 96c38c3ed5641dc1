//! Transactions and their signature rules.
//!
//! Two-party kinds ([`TxKind::Access`] and [`TxKind::Monitor`]) carry exactly
//! two slots: the requester signs the request payload (every field except
//! `prev_tx` and `output_bit`, which are unknown when the request is made),
//! then the requestee fills those fields and signs the whole body. Their
//! [`TxId`] is the digest of the request payload so that it stays stable while
//! the request is in flight. Every other kind is identified by, and signed
//! over, the whole body.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, Writer};
use crate::crypto::{hash_bytes, CryptoError, CryptoProvider, DataHash, PrivateKey, PublicKey};
use crate::ids::{AccessScope, AccountId, BlockNumber, DeviceId, StorageKind, TxId};
use crate::policy::PolicyRule;
use crate::serde_hex;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignedHashContext {
    /// Storage attests to the hash of data it accepted.
    StoredData { account: AccountId },
    /// Storage attests to the hash of data it returned for the block it
    /// authenticated by `requested`.
    RetrievedData {
        account: AccountId,
        requested: DataHash,
    },
    /// Trust multisig over an overlay block; `data_hash` is the block id.
    BlockContent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxKind {
    Genesis,
    Store { target: StorageKind },
    Access { scope: AccessScope },
    Monitor,
    PolicyUpdate { rules: Vec<PolicyRule> },
    RemoveDevice,
    BreachReport,
    SignedHash { context: SignedHashContext },
}

impl TxKind {
    pub fn name(&self) -> &'static str {
        match self {
            TxKind::Genesis => "genesis",
            TxKind::Store { .. } => "store",
            TxKind::Access { .. } => "access",
            TxKind::Monitor => "monitor",
            TxKind::PolicyUpdate { .. } => "policy_update",
            TxKind::RemoveDevice => "remove_device",
            TxKind::BreachReport => "breach_report",
            TxKind::SignedHash { .. } => "signed_hash",
        }
    }

    pub fn is_two_party(&self) -> bool {
        matches!(self, TxKind::Access { .. } | TxKind::Monitor)
    }

    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            TxKind::Genesis => {
                w.u8(0x01);
            }
            TxKind::Store { target } => {
                w.u8(0x02).u8(match target {
                    StorageKind::Local => 1,
                    StorageKind::Shared => 2,
                    StorageKind::Cloud => 3,
                });
            }
            TxKind::Access { scope } => {
                w.u8(0x03).u8(match scope {
                    AccessScope::Window => 1,
                    AccessScope::FullChain => 2,
                });
            }
            TxKind::Monitor => {
                w.u8(0x04);
            }
            TxKind::PolicyUpdate { rules } => {
                w.u8(0x05).raw(&codec::policy_rules(rules));
            }
            TxKind::RemoveDevice => {
                w.u8(0x06);
            }
            TxKind::BreachReport => {
                w.u8(0x07);
            }
            TxKind::SignedHash { context } => {
                w.u8(0x08);
                match context {
                    SignedHashContext::StoredData { account } => w.u8(1).u64(account.0),
                    SignedHashContext::RetrievedData { account, requested } => {
                        w.u8(2).u64(account.0).raw(&requested.0)
                    }
                    SignedHashContext::BlockContent => w.u8(3),
                };
            }
        }
        w.finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignatureSlot {
    pub signer: PublicKey,
    #[serde(with = "serde_hex::opt_vec")]
    pub signature: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TxError {
    #[error("signature slot {slot} is empty")]
    MissingSignature { slot: usize },
    #[error("signature slot {slot} does not verify")]
    InvalidSignature { slot: usize },
    #[error("expected {expected} signature slots, found {found}")]
    WrongSlotCount {
        expected: &'static str,
        found: usize,
    },
    #[error("malformed transaction: {0}")]
    Malformed(&'static str),
    #[error("key does not own any signature slot")]
    SignerMismatch,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

impl TxError {
    /// Short machine-readable reason code.
    pub fn code(&self) -> &'static str {
        match self {
            TxError::MissingSignature { .. } => "missing-signature",
            TxError::InvalidSignature { .. } => "invalid-signature",
            TxError::WrongSlotCount { .. } => "wrong-slot-count",
            TxError::Malformed(_) => "malformed",
            TxError::SignerMismatch => "signer-mismatch",
            TxError::Crypto(_) => "crypto",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub kind: TxKind,
    pub device: Option<DeviceId>,
    pub prev_tx: Option<TxId>,
    pub block_number: Option<BlockNumber>,
    pub data_hash: Option<DataHash>,
    pub timestamp: u64,
    pub output_bit: Option<bool>,
    pub payload_refs: Option<(TxId, TxId)>,
    pub slots: Vec<SignatureSlot>,
}

impl Transaction {
    pub fn new(kind: TxKind, timestamp: u64) -> Self {
        Self {
            kind,
            device: None,
            prev_tx: None,
            block_number: None,
            data_hash: None,
            timestamp,
            output_bit: None,
            payload_refs: None,
            slots: Vec::new(),
        }
    }

    pub fn with_device(mut self, device: DeviceId) -> Self {
        self.device = Some(device);
        self
    }

    pub fn with_prev(mut self, prev: Option<TxId>) -> Self {
        self.prev_tx = prev;
        self
    }

    pub fn with_block_number(mut self, bn: BlockNumber) -> Self {
        self.block_number = Some(bn);
        self
    }

    pub fn with_data_hash(mut self, h: DataHash) -> Self {
        self.data_hash = Some(h);
        self
    }

    pub fn with_refs(mut self, a: TxId, b: TxId) -> Self {
        self.payload_refs = Some((a, b));
        self
    }

    /// Add an empty signature slot for `signer`.
    pub fn with_signer(mut self, signer: PublicKey) -> Self {
        self.slots.push(SignatureSlot {
            signer,
            signature: None,
        });
        self
    }

    fn encode_fields(&self, request_only: bool) -> Vec<u8> {
        let mut w = Writer::new();
        let prev = if request_only { None } else { self.prev_tx };
        let output = if request_only { None } else { self.output_bit };
        let refs = self.payload_refs.map(|(a, b)| {
            let mut v = a.0 .0.to_vec();
            v.extend_from_slice(&b.0 .0);
            v
        });
        let mut signers = Writer::new();
        signers.u32(self.slots.len() as u32);
        for s in &self.slots {
            signers.field(&codec::public_key(&s.signer));
        }
        w.field(&self.kind.encode())
            .opt_field(self.device.as_ref().map(|d| d.as_str().as_bytes()))
            .opt_field(prev.as_ref().map(|p| &p.0 .0[..]))
            .opt_field(self.block_number.as_ref().map(|b| &b.0[..]))
            .opt_field(self.data_hash.as_ref().map(|h| &h.0[..]))
            .field(&self.timestamp.to_be_bytes())
            .opt_field(output.map(|b| [b as u8]).as_ref().map(|b| &b[..]))
            .opt_field(refs.as_deref())
            .field(&signers.finish());
        w.finish()
    }

    /// Canonical encoding of every field except signature bytes.
    pub fn body_bytes(&self) -> Vec<u8> {
        self.encode_fields(false)
    }

    /// What a requester signs on a two-party transaction.
    pub fn request_bytes(&self) -> Vec<u8> {
        self.encode_fields(true)
    }

    /// Body followed by every slot's signature bytes.
    pub fn full_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.field(&self.body_bytes()).u32(self.slots.len() as u32);
        for s in &self.slots {
            w.opt_field(s.signature.as_deref());
        }
        w.finish()
    }

    /// Message signed by slot `idx`.
    pub fn signing_payload(&self, idx: usize) -> Vec<u8> {
        if self.kind.is_two_party() && idx == 0 {
            self.request_bytes()
        } else {
            self.body_bytes()
        }
    }

    pub fn id(&self) -> TxId {
        if self.kind.is_two_party() {
            TxId(hash_bytes(&self.request_bytes()))
        } else {
            TxId(hash_bytes(&self.body_bytes()))
        }
    }

    pub fn requester(&self) -> Option<&PublicKey> {
        self.kind
            .is_two_party()
            .then(|| self.slots.first().map(|s| &s.signer))
            .flatten()
    }

    pub fn requestee(&self) -> Option<&PublicKey> {
        self.kind
            .is_two_party()
            .then(|| self.slots.get(1).map(|s| &s.signer))
            .flatten()
    }

    pub fn signer(&self, idx: usize) -> Option<&PublicKey> {
        self.slots.get(idx).map(|s| &s.signer)
    }

    /// Fill slot `idx` with a signature by `key`.
    pub fn sign_slot(
        &mut self,
        provider: &dyn CryptoProvider,
        idx: usize,
        key: &PrivateKey,
    ) -> Result<(), TxError> {
        let slot = self.slots.get(idx).ok_or(TxError::SignerMismatch)?;
        if &slot.signer != key.public() {
            return Err(TxError::SignerMismatch);
        }
        let sig = provider.sign(key, &self.signing_payload(idx))?;
        self.slots[idx].signature = Some(sig.bytes);
        Ok(())
    }

    /// Fill the first slot owned by `key`.
    pub fn sign_as(
        &mut self,
        provider: &dyn CryptoProvider,
        key: &PrivateKey,
    ) -> Result<(), TxError> {
        let idx = self
            .slots
            .iter()
            .position(|s| &s.signer == key.public())
            .ok_or(TxError::SignerMismatch)?;
        self.sign_slot(provider, idx, key)
    }

    /// Number of populated signatures, i.e. the verification work to check it.
    pub fn signature_count(&self) -> usize {
        self.slots.iter().filter(|s| s.signature.is_some()).count()
    }

    /// Per-kind structural rules.
    pub fn validate_shape(&self) -> Result<(), TxError> {
        let n = self.slots.len();
        match &self.kind {
            k if k.is_two_party() => {
                if n != 2 {
                    return Err(TxError::WrongSlotCount {
                        expected: "exactly 2",
                        found: n,
                    });
                }
            }
            TxKind::SignedHash {
                context: SignedHashContext::BlockContent,
            } => {
                if n < 2 {
                    return Err(TxError::WrongSlotCount {
                        expected: "miner plus at least one cosigner",
                        found: n,
                    });
                }
                if self.data_hash.is_none() {
                    return Err(TxError::Malformed("block multisig without block id"));
                }
            }
            _ => {
                if n == 0 {
                    return Err(TxError::WrongSlotCount {
                        expected: "at least 1",
                        found: 0,
                    });
                }
            }
        }
        match &self.kind {
            TxKind::Store { .. } if self.block_number.is_none() || self.data_hash.is_none() => Err(
                TxError::Malformed("store without block number and data hash"),
            ),
            TxKind::BreachReport if self.payload_refs.is_none() => Err(TxError::Malformed(
                "breach report without two payload references",
            )),
            TxKind::SignedHash { .. } if self.data_hash.is_none() => {
                Err(TxError::Malformed("signed hash without data hash"))
            }
            _ if self.payload_refs.is_some() && self.kind != TxKind::BreachReport => Err(
                TxError::Malformed("payload references outside a breach report"),
            ),
            _ => Ok(()),
        }
    }
}

/// Check shape and every signature slot of `tx`.
pub fn validate_tx_signatures(
    provider: &dyn CryptoProvider,
    tx: &Transaction,
) -> Result<(), TxError> {
    tx.validate_shape()?;
    for (idx, slot) in tx.slots.iter().enumerate() {
        let sig = slot
            .signature
            .as_ref()
            .ok_or(TxError::MissingSignature { slot: idx })?;
        match provider.verify(&slot.signer, &tx.signing_payload(idx), sig) {
            Ok(true) => {}
            Ok(false) | Err(CryptoError::MalformedSignature) => {
                return Err(TxError::InvalidSignature { slot: idx })
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{SimCrypto, StandardCrypto};

    fn multisig(p: &dyn CryptoProvider) -> (Transaction, PrivateKey, PrivateKey) {
        let sp = p.keypair_from_seed(b"76sj18394");
        let miner = p.keypair_from_seed(b"aheu1938k3");
        let mut tx = Transaction::new(
            TxKind::Access {
                scope: AccessScope::FullChain,
            },
            3,
        )
        .with_device(DeviceId::new("thermostat"))
        .with_signer(sp.public.clone())
        .with_signer(miner.public.clone());
        tx.sign_slot(p, 0, &sp.private).unwrap();
        (tx, sp.private, miner.private)
    }

    #[test]
    fn two_party_signing_flow() {
        for p in [&StandardCrypto as &dyn CryptoProvider, &SimCrypto] {
            let (mut tx, _, miner) = multisig(p);
            let id = tx.id();
            assert_eq!(
                validate_tx_signatures(p, &tx),
                Err(TxError::MissingSignature { slot: 1 })
            );
            tx.output_bit = Some(true);
            tx.prev_tx = Some(TxId(hash_bytes(b"genesis")));
            tx.sign_slot(p, 1, &miner).unwrap();
            assert_eq!(validate_tx_signatures(p, &tx), Ok(()));
            assert_eq!(tx.id(), id, "resolution keeps the request id");
            tx.output_bit = Some(false);
            assert_eq!(
                validate_tx_signatures(p, &tx),
                Err(TxError::InvalidSignature { slot: 1 })
            );
        }
    }

    #[test]
    fn slot_count_enforced() {
        let p = SimCrypto;
        let (mut tx, _, _) = multisig(&p);
        tx.slots.pop();
        assert!(matches!(
            validate_tx_signatures(&p, &tx),
            Err(TxError::WrongSlotCount { found: 1, .. })
        ));
    }

    #[test]
    fn wrong_key_cannot_sign_slot() {
        let p = SimCrypto;
        let (mut tx, sp, _) = multisig(&p);
        assert_eq!(tx.sign_slot(&p, 1, &sp), Err(TxError::SignerMismatch));
    }

    #[test]
    fn shape_rules() {
        let p = SimCrypto;
        let k = SimCrypto::keypair_from_label("m");
        let mut store = Transaction::new(
            TxKind::Store {
                target: StorageKind::Cloud,
            },
            0,
        )
        .with_signer(k.public.clone());
        store.sign_as(&p, &k.private).unwrap();
        assert_eq!(
            store.validate_shape(),
            Err(TxError::Malformed(
                "store without block number and data hash"
            ))
        );
        let breach = Transaction::new(TxKind::BreachReport, 0).with_signer(k.public.clone());
        assert!(matches!(
            breach.validate_shape(),
            Err(TxError::Malformed(_))
        ));
        let bare = Transaction::new(TxKind::Genesis, 0);
        assert!(matches!(
            bare.validate_shape(),
            Err(TxError::WrongSlotCount { .. })
        ));
    }

    #[test]
    fn error_codes_are_stable() {
        assert_eq!(
            TxError::MissingSignature { slot: 1 }.code(),
            "missing-signature"
        );
        assert_eq!(
            TxError::InvalidSignature { slot: 0 }.code(),
            "invalid-signature"
        );
    }
}
