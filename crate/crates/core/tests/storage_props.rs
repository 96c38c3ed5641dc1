use std::collections::BTreeMap;
use std::sync::Arc;

use homechain_core::crypto::{decrypt_token, derive_shared_key, SimCrypto};
use homechain_core::storage::GuardOutcome;
use homechain_core::{
    hash_bytes, AccountId, BlockNumber, DataHash, KeyPair, RandomId, SharedKey, StorageError,
    StorageKind, StorageNode, StoreRequest,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn key(label: &str) -> KeyPair {
    SimCrypto::keypair_from_label(label)
}

fn shared(node: &StorageNode) -> SharedKey {
    derive_shared_key(&SimCrypto, &key("aheu1938k3").private, node.public_key()).unwrap()
}

fn node(kind: StorageKind, capacity: usize) -> StorageNode {
    StorageNode::new(
        Arc::new(SimCrypto),
        key(&format!("storage-{}", kind.as_str())),
        kind,
    )
    .with_capacity(capacity)
}

fn kind_of(i: u8) -> StorageKind {
    match i % 3 {
        0 => StorageKind::Local,
        1 => StorageKind::Shared,
        _ => StorageKind::Cloud,
    }
}

/// Client-side handle onto the newest block of an account.
struct Handle {
    account: AccountId,
    bn: BlockNumber,
    hash: DataHash,
}

fn store(
    node: &mut StorageNode,
    h: &mut Handle,
    data: &[u8],
    rng: &mut ChaCha8Rng,
) -> Result<(), StorageError> {
    let k = shared(node);
    let req = StoreRequest {
        requester: Some(RandomId(7)),
        account: h.account,
        prev_block_number: h.bn,
        prev_hash: h.hash,
        data,
        claimed_hash: Some(hash_bytes(data)),
    };
    let receipt = node.store(req, &k, 1, rng)?;
    let bn = decrypt_token(&SimCrypto, &k, &receipt.encrypted_block_number).unwrap();
    h.bn = BlockNumber(bn.try_into().unwrap());
    h.hash = receipt.data_hash;
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1_000))]

    #[test]
    fn blocks_enumerate_in_store_order(
        schedule in prop::collection::vec((0usize..4, prop::collection::vec(any::<u8>(), 1..8)), 1..40),
        kind in 0u8..3,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut n = node(kind_of(kind), 1024);
        let mut handles: Vec<Handle> = (0..4)
            .map(|i| {
                let (account, bn, hash) = n.bootstrap_account(key(&format!("owner{i}")).public, &mut rng);
                Handle { account, bn, hash }
            })
            .collect();
        let mut expected: BTreeMap<AccountId, Vec<Vec<u8>>> = BTreeMap::new();
        for (a, data) in &schedule {
            store(&mut n, &mut handles[*a], data, &mut rng).unwrap();
            expected.entry(handles[*a].account).or_default().push(data.clone());
        }
        for h in &handles {
            let acct = n.account(h.account).unwrap();
            let got: Vec<Vec<u8>> = acct.blocks().iter().skip(1).map(|b| b.data.clone()).collect();
            prop_assert_eq!(got, expected.get(&h.account).cloned().unwrap_or_default());
            for w in acct.blocks().windows(2) {
                prop_assert_eq!(w[0].next, Some(w[1].block_number));
            }
            prop_assert_eq!(acct.blocks().last().unwrap().next, None);
        }
    }

    #[test]
    fn each_block_has_one_successor(
        data in prop::collection::vec(prop::collection::vec(any::<u8>(), 1..8), 1..10),
        kind in 0u8..3,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut n = node(kind_of(kind), 1024);
        let (account, bn, hash) = n.bootstrap_account(key("owner").public, &mut rng);
        let mut h = Handle { account, bn, hash };
        for d in &data {
            let mut stale = Handle { account, bn: h.bn, hash: h.hash };
            store(&mut n, &mut h, d, &mut rng).unwrap();
            prop_assert_eq!(store(&mut n, &mut stale, b"again", &mut rng), Err(StorageError::AlreadyChained));
            let k = shared(&n);
            prop_assert_eq!(
                n.pre_chain_guard(account, &stale.bn, &stale.hash, &k, &mut rng),
                Ok(GuardOutcome::AlreadyChained)
            );
        }
        let successors = n.account(account).unwrap().blocks().iter().filter(|b| b.next.is_some()).count();
        prop_assert_eq!(successors, data.len());
    }

    #[test]
    fn only_the_exact_pair_authenticates(
        data in prop::collection::vec(any::<u8>(), 1..16),
        flip_bn in prop::option::of((0usize..16, 1u8..=255)),
        flip_hash in prop::option::of((0usize..32, 1u8..=255)),
        kind in 0u8..3,
        seed in any::<u64>(),
    ) {
        prop_assume!(flip_bn.is_some() || flip_hash.is_some());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut n = node(kind_of(kind), 1024);
        let (account, bn, hash) = n.bootstrap_account(key("owner").public, &mut rng);
        let mut h = Handle { account, bn, hash };
        store(&mut n, &mut h, &data, &mut rng).unwrap();
        let good = n.retrieve(account, &h.bn, &h.hash).unwrap();
        prop_assert_eq!(&good.data, &data);

        let mut bad = Handle { account, bn: h.bn, hash: h.hash };
        if let Some((i, x)) = flip_bn {
            bad.bn.0[i] ^= x;
        }
        if let Some((i, x)) = flip_hash {
            bad.hash.0[i] ^= x;
        }
        prop_assert_eq!(n.retrieve(account, &bad.bn, &bad.hash), Err(StorageError::AuthFail));
        prop_assert_eq!(n.retrieve_window(account, &bad.bn, &bad.hash, 3), Err(StorageError::AuthFail));
        prop_assert_eq!(store(&mut n, &mut bad, b"x", &mut rng), Err(StorageError::AuthFail));
        let k = shared(&n);
        prop_assert_eq!(n.pre_chain_guard(account, &bad.bn, &bad.hash, &k, &mut rng), Err(StorageError::AuthFail));
    }

    #[test]
    fn signed_hashes_match_cloud_stores(
        attempts in prop::collection::vec((any::<bool>(), prop::collection::vec(any::<u8>(), 1..8)), 1..30),
        kind in 0u8..3,
        capacity in 2usize..20,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = kind_of(kind);
        let mut n = node(kind, capacity);
        let (account, bn, hash) = n.bootstrap_account(key("owner").public, &mut rng);
        let mut h = Handle { account, bn, hash };
        let mut ok = 0u64;
        for (honest, data) in &attempts {
            let k = shared(&n);
            let claimed = if *honest { hash_bytes(data) } else { hash_bytes(b"lie") };
            let req = StoreRequest {
                requester: Some(RandomId(1)),
                account,
                prev_block_number: h.bn,
                prev_hash: h.hash,
                data,
                claimed_hash: Some(claimed),
            };
            match n.store(req, &k, 1, &mut rng) {
                Ok(r) => {
                    ok += 1;
                    prop_assert_eq!(r.signed_hash.is_some(), kind == StorageKind::Cloud);
                    let bn = decrypt_token(&SimCrypto, &k, &r.encrypted_block_number).unwrap();
                    h.bn = BlockNumber(bn.try_into().unwrap());
                    h.hash = r.data_hash;
                }
                Err(e) => prop_assert!(matches!(e, StorageError::HashMismatch | StorageError::NoCapacity)),
            }
        }
        prop_assert_eq!(n.successful_stores(), ok);
        let expected = if kind == StorageKind::Cloud { ok } else { 0 };
        prop_assert_eq!(n.signed_hash_count(), expected);
    }
}

#[test]
fn random_block_numbers_never_authenticate() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut n = node(StorageKind::Cloud, 1024);
    let (account, bn, hash) = n.bootstrap_account(key("owner").public, &mut rng);
    let mut h = Handle { account, bn, hash };
    for i in 0..10u8 {
        store(&mut n, &mut h, &[i], &mut rng).unwrap();
    }
    let hashes: Vec<DataHash> = n
        .account(account)
        .unwrap()
        .blocks()
        .iter()
        .map(|b| b.data_hash)
        .collect();
    let mut accepted = 0;
    for _ in 0..1000 {
        let guess = BlockNumber::random(&mut rng);
        for hh in &hashes {
            if n.retrieve(account, &guess, hh).is_ok() {
                accepted += 1;
            }
        }
    }
    assert_eq!(accepted, 0);
}

#[test]
fn owner_extends_after_guard_and_leaked_pair_cannot() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut n = node(StorageKind::Cloud, 1024);
    let (account, bn, hash) = n.bootstrap_account(key("owner").public, &mut rng);
    let mut h = Handle { account, bn, hash };
    store(&mut n, &mut h, b"reading-1", &mut rng).unwrap();
    let k = shared(&n);
    let GuardOutcome::Guarded {
        encrypted_block_number,
        empty_hash,
    } = n
        .pre_chain_guard(account, &h.bn, &h.hash, &k, &mut rng)
        .unwrap()
    else {
        panic!("first guard must append");
    };
    let mut leaked = Handle {
        account,
        bn: h.bn,
        hash: h.hash,
    };
    assert_eq!(
        store(&mut n, &mut leaked, b"fake", &mut rng),
        Err(StorageError::AlreadyChained)
    );
    let bn = decrypt_token(&SimCrypto, &k, &encrypted_block_number).unwrap();
    let mut fresh = Handle {
        account,
        bn: BlockNumber(bn.try_into().unwrap()),
        hash: empty_hash,
    };
    store(&mut n, &mut fresh, b"reading-2", &mut rng).unwrap();
    let w = n
        .retrieve_window(account, &fresh.bn, &fresh.hash, 5)
        .unwrap();
    let data: Vec<&[u8]> = w.iter().map(|r| r.data.as_slice()).collect();
    assert_eq!(data, vec![&b"reading-2"[..], &b"reading-1"[..]]);
}
