//! Repeated single-CH experiments on block verification: collusion
//! detection and verification work against trust.

use std::sync::Arc;

use homechain_core::{
    hash_bytes, AccountId, Block, Channel, ClusterHeadState, ClusterId, CryptoProvider, KeyPair,
    NodeId, Outcome, OverlayParams, SignedHashContext, SimCrypto, Transaction, TrustParams, TxKind,
    Verdict,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Probability that a uniform sample of `m` out of `t` transactions hits at
/// least one of `b` bad ones.
pub fn hypergeometric_detection(t: usize, b: usize, m: usize) -> f64 {
    if b == 0 || m == 0 {
        return 0.0;
    }
    if m + b > t {
        return 1.0;
    }
    // P(miss) = C(t-b, m) / C(t, m) = prod_{i<m} (t-b-i)/(t-i)
    let miss: f64 = (0..m)
        .map(|i| (t - b - i) as f64 / (t - i) as f64)
        .product();
    1.0 - miss
}

/// Direct evidence an honest CH holds about the miner and cosigner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Evidence {
    pub pos: u64,
    pub neg: u64,
}

impl Evidence {
    pub const NONE: Evidence = Evidence { pos: 0, neg: 0 };

    pub fn trust_level(self) -> f64 {
        (self.pos as f64 + 1.0) / ((self.pos + self.neg) as f64 + 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub detected: bool,
    pub body_checks: usize,
    pub sig_checks: usize,
    pub fraction: f64,
}

/// Block-verification bench: a colluding miner and cosigner publish a
/// `t`-transaction block with `b` forged signatures to one honest CH.
pub struct CollusionBench {
    provider: Arc<dyn CryptoProvider>,
    miner: KeyPair,
    cosigner: KeyPair,
    honest: KeyPair,
    params: OverlayParams,
}

impl CollusionBench {
    pub fn new(f_min: f64) -> Self {
        Self {
            provider: Arc::new(SimCrypto),
            miner: SimCrypto::keypair_from_label("colluding-miner"),
            cosigner: SimCrypto::keypair_from_label("colluding-cosigner"),
            honest: SimCrypto::keypair_from_label("honest-ch"),
            params: OverlayParams {
                trust: TrustParams {
                    f_min,
                    ..TrustParams::default()
                },
                ..OverlayParams::default()
            },
        }
    }

    fn block(&self, t: usize, b: usize, nonce: u64) -> Block {
        let p = self.provider.as_ref();
        let txs = (0..t)
            .map(|i| {
                let mut tx = Transaction::new(
                    TxKind::SignedHash {
                        context: SignedHashContext::StoredData {
                            account: AccountId(i as u64),
                        },
                    },
                    nonce,
                )
                .with_data_hash(hash_bytes(format!("{nonce}/{i}").as_bytes()))
                .with_signer(self.miner.public.clone());
                tx.sign_slot(p, 0, &self.miner.private)
                    .expect("miner owns slot 0");
                if i < b {
                    if let Some(sig) = tx.slots[0].signature.as_mut() {
                        sig[0] ^= 0xff;
                    }
                }
                tx
            })
            .collect();
        let mut block = Block::overlay(
            p,
            None,
            txs,
            &self.miner.private,
            std::slice::from_ref(&self.cosigner.public),
            nonce,
        )
        .expect("miner signs its block");
        block
            .cosign(p, &self.cosigner.private)
            .expect("cosigner slot exists");
        block
    }

    /// One trial with a fresh honest CH that holds `evidence` about both colluders.
    pub fn trial(
        &self,
        t: usize,
        b: usize,
        evidence: Evidence,
        rng: &mut ChaCha8Rng,
        nonce: u64,
    ) -> TrialOutcome {
        let mut ch =
            ClusterHeadState::new(ClusterId(2), NodeId(2), self.honest.clone(), self.params);
        for pk in [&self.miner.public, &self.cosigner.public] {
            for _ in 0..evidence.pos {
                ch.trust.update_evidence(pk, Outcome::Pos, Channel::Direct);
            }
            for _ in 0..evidence.neg {
                ch.trust.update_evidence(pk, Outcome::Neg, Channel::Direct);
            }
        }
        let mut block = self.block(t, b, nonce);
        let r = ch.receive_block(
            self.provider.as_ref(),
            &mut block,
            Some(&self.cosigner.public),
            rng,
        );
        TrialOutcome {
            detected: matches!(r.verdict, Verdict::Failed { .. }),
            body_checks: r.body_checks,
            sig_checks: r.sig_checks,
            fraction: r.fraction,
        }
    }

    /// Fraction of `trials` in which the honest CH detected the forgery.
    pub fn detection_rate(
        &self,
        t: usize,
        b: usize,
        evidence: Evidence,
        trials: u64,
        seed: u64,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hits = (0..trials)
            .filter(|&n| self.trial(t, b, evidence, &mut rng, n).detected)
            .count();
        hits as f64 / trials as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TlPoint {
    /// `None` when the CH has no direct evidence.
    pub tl: Option<f64>,
    pub body_checks: usize,
    pub fraction: f64,
}

/// Verification work on an honest `t`-transaction block as trust in its
/// miner grows. The first point has no evidence; the rest hold `pos`
/// positive and `total - pos` negative reports for `pos` in `0..=total`.
pub fn tl_sweep(t: usize, f_min: f64, total: u64, seed: u64) -> Vec<TlPoint> {
    let bench = CollusionBench::new(f_min);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![{
        let r = bench.trial(t, 0, Evidence::NONE, &mut rng, 0);
        TlPoint {
            tl: None,
            body_checks: r.body_checks,
            fraction: r.fraction,
        }
    }];
    for pos in 0..=total {
        let ev = Evidence {
            pos,
            neg: total - pos,
        };
        let r = bench.trial(t, 0, ev, &mut rng, pos + 1);
        out.push(TlPoint {
            tl: Some(ev.trust_level()),
            body_checks: r.body_checks,
            fraction: r.fraction,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_edges() {
        assert_eq!(hypergeometric_detection(20, 0, 5), 0.0);
        assert_eq!(hypergeometric_detection(20, 1, 20), 1.0);
        assert!((hypergeometric_detection(20, 1, 5) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn no_evidence_checks_everything() {
        let b = CollusionBench::new(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = b.trial(20, 1, Evidence::NONE, &mut rng, 0);
        assert!(r.detected);
        assert_eq!(r.body_checks, 20);
    }
}
