use homechain_core::crypto::SimCrypto;
use homechain_core::trust::{sample_size, verify_block_sampled, EvidenceRecord};
use homechain_core::{
    hash_bytes, AccountId, Block, Channel, KeyPair, Outcome, PublicKey, SignedHashContext,
    Transaction, TrustParams, TrustTable, TxKind,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn key(label: &str) -> KeyPair {
    SimCrypto::keypair_from_label(label)
}

fn arb_event() -> impl Strategy<Value = (Outcome, Channel)> {
    (
        prop_oneof![Just(Outcome::Pos), Just(Outcome::Neg)],
        prop_oneof![Just(Channel::Direct), Just(Channel::Indirect)],
    )
}

fn table_with(subject: &PublicKey, events: &[(Outcome, Channel)]) -> TrustTable {
    let mut t = TrustTable::new(TrustParams::default());
    for (o, c) in events {
        t.update_evidence(subject, *o, *c);
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1_000))]

    #[test]
    fn positive_evidence_never_lowers_trust(events in prop::collection::vec(arb_event(), 0..60), next in arb_event()) {
        let b = key("ch-b").public;
        let mut t = table_with(&b, &events);
        let before = t.trust_level(&b);
        t.update_evidence(&b, next.0, next.1);
        let after = t.trust_level(&b);
        match next.0 {
            Outcome::Pos => prop_assert!(after >= before),
            Outcome::Neg => prop_assert!(after <= before),
        }
        prop_assert!((0.0..=1.0).contains(&after));
    }

    #[test]
    fn counters_only_grow(events in prop::collection::vec(arb_event(), 0..60)) {
        let b = key("ch-b").public;
        let mut t = TrustTable::new(TrustParams::default());
        let mut prev = EvidenceRecord::default();
        for (o, c) in events {
            t.update_evidence(&b, o, c);
            let r = t.record(&b);
            prop_assert!(r.direct_pos >= prev.direct_pos && r.direct_neg >= prev.direct_neg);
            prop_assert!(r.indirect_pos >= prev.indirect_pos && r.indirect_neg >= prev.indirect_neg);
            let grew = (r.direct_pos + r.direct_neg + r.indirect_pos + r.indirect_neg)
                - (prev.direct_pos + prev.direct_neg + prev.indirect_pos + prev.indirect_neg);
            prop_assert_eq!(grew, 1);
            prev = r;
        }
    }

    #[test]
    fn fraction_follows_best_trust(
        miner_events in prop::collection::vec(arb_event(), 0..30),
        cosigner_events in prop::collection::vec(arb_event(), 0..30),
    ) {
        let (m, c) = (key("miner").public, key("cosigner").public);
        let mut t = table_with(&m, &miner_events);
        for (o, ch) in &cosigner_events {
            t.update_evidence(&c, *o, *ch);
        }
        let f = t.verification_fraction(&m, std::slice::from_ref(&c));
        let with_direct: Vec<&PublicKey> = [&m, &c].into_iter().filter(|pk| t.record(pk).has_direct()).collect();
        if with_direct.is_empty() {
            prop_assert_eq!(f, 1.0);
        } else {
            let best = with_direct.iter().map(|pk| t.trust_level(pk)).fold(0.0, f64::max);
            prop_assert!((f - (1.0 - best).max(0.1)).abs() < 1e-12);
            prop_assert!(f < 1.0);
            prop_assert!(f >= 0.1);
        }
    }

    #[test]
    fn fraction_is_non_increasing_in_trust(
        a in prop::collection::vec(arb_event(), 1..40),
        b in prop::collection::vec(arb_event(), 1..40),
    ) {
        let x = key("x").public;
        let mut a = a;
        let mut b = b;
        // both tables hold direct evidence
        a.push((Outcome::Pos, Channel::Direct));
        b.push((Outcome::Pos, Channel::Direct));
        let (ta, tb) = (table_with(&x, &a), table_with(&x, &b));
        let (la, lb) = (ta.trust_level(&x), tb.trust_level(&x));
        let (fa, fb) = (ta.verification_fraction(&x, &[]), tb.verification_fraction(&x, &[]));
        if la <= lb {
            prop_assert!(fa >= fb);
        } else {
            prop_assert!(fa <= fb);
        }
    }
}

fn signed_block(total: usize, bad: usize) -> Block {
    let miner = key("miner");
    let txs = (0..total)
        .map(|i| {
            let mut tx = Transaction::new(
                TxKind::SignedHash {
                    context: SignedHashContext::StoredData {
                        account: AccountId(1),
                    },
                },
                i as u64,
            )
            .with_data_hash(hash_bytes(&i.to_be_bytes()))
            .with_signer(miner.public.clone());
            tx.sign_slot(&SimCrypto, 0, &miner.private).unwrap();
            if i < bad {
                tx.slots[0].signature.as_mut().unwrap()[0] ^= 1;
            }
            tx
        })
        .collect();
    Block::overlay(&SimCrypto, None, txs, &miner.private, &[key("c").public], 0).unwrap()
}

fn binom(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// P(at least one bad transaction among m drawn without replacement from T
/// containing b bad ones).
fn hypergeometric_detect(t: usize, b: usize, m: usize) -> f64 {
    1.0 - binom(t - b, m) / binom(t, m)
}

#[test]
fn sampled_detection_matches_hypergeometric() {
    for (t, b, f) in [
        (20, 1, 0.25),
        (20, 2, 0.25),
        (10, 1, 0.5),
        (20, 3, 0.1),
        (15, 1, 1.0),
    ] {
        let block = signed_block(t, b);
        let m = sample_size(f, t);
        let expected = hypergeometric_detect(t, b, m);
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64 * 1000 + b as u64);
        let trials = 10_000;
        let detected = (0..trials)
            .filter(|_| !verify_block_sampled(&SimCrypto, &block, f, &mut rng).passed())
            .count();
        let p = detected as f64 / trials as f64;
        assert!(
            (p - expected).abs() <= 0.02,
            "T={t} b={b} f={f}: {p} vs {expected}"
        );
    }
    assert_eq!(hypergeometric_detect(20, 1, 5), 0.25);
}

#[test]
fn valid_blocks_always_pass() {
    let block = signed_block(12, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for f in [0.05, 0.1, 0.5, 1.0] {
        let out = verify_block_sampled(&SimCrypto, &block, f, &mut rng);
        assert!(out.passed());
        assert_eq!(out.checked(), sample_size(f, 12).max(1));
    }
    let empty = Block::overlay(
        &SimCrypto,
        None,
        vec![],
        &key("m").private,
        &[key("c").public],
        0,
    )
    .unwrap();
    assert!(verify_block_sampled(&SimCrypto, &empty, 1.0, &mut rng).passed());
}
