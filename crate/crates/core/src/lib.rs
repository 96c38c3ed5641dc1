//! Primitives for a tiered, puzzle-free blockchain for smart homes.
//!
//! A home miner keeps a local chain of per-device transaction ledgers under an
//! owner-controlled policy. Data lives in local, shared or cloud storage that
//! authenticates its user by a secret block-number and a data hash. Homes meet
//! in an overlay of cluster heads that route access multisigs, keep divergent
//! views of an overlay chain and rate each other with beta reputation.

pub mod block;
pub mod codec;
pub mod crypto;
pub mod ids;
pub mod localchain;
pub mod overlay;
pub mod policy;
mod serde_hex;
pub mod storage;
pub mod trust;
pub mod tx;

pub use block::{Block, BlockHeader};
pub use crypto::{
    hash_bytes, CryptoError, CryptoProvider, DataHash, KeyPair, PrivateKey, PublicKey, Scheme,
    SharedKey, SimCrypto, StandardCrypto,
};
pub use ids::{
    AccessScope, AccountId, BlockId, BlockNumber, ClusterId, DeviceId, IdRegistry, NodeId,
    RandomId, StorageKind, TxId,
};
pub use localchain::{LocalChain, LocalChainError, Miner, MinerConfig, OwnerAuth, StorageHandle};
pub use overlay::{
    BlockReceipt, BreachVerdict, ClusterHeadState, Member, MemberRole, OverlayError,
    OverlayNetwork, OverlayParams, RouteDecision, Verdict,
};
pub use policy::{Action, Decision, PolicyHeader, PolicyRule, PrivacyLevel, Subject};
pub use storage::{StorageError, StorageNode, StoreReceipt, StoreRequest};
pub use trust::{Channel, Outcome, TrustParams, TrustTable};
pub use tx::{
    validate_tx_signatures, SignatureSlot, SignedHashContext, Transaction, TxError, TxKind,
};
