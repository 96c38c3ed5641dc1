//! Beta-reputation trust between cluster heads and trust-scaled sampling of
//! block verification.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::block::Block;
use crate::crypto::{CryptoProvider, PublicKey};
use crate::ids::TxId;
use crate::tx::validate_tx_signatures;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pos,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// This CH verified a block itself.
    Direct,
    /// Reported by a third CH that relayed the block.
    Indirect,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub direct_pos: u64,
    pub direct_neg: u64,
    pub indirect_pos: u64,
    pub indirect_neg: u64,
}

impl EvidenceRecord {
    pub fn has_direct(&self) -> bool {
        self.direct_pos + self.direct_neg > 0
    }

    pub fn trust_level(&self, w: f64) -> f64 {
        let r = self.direct_pos as f64 + w * self.indirect_pos as f64;
        let s = self.direct_neg as f64 + w * self.indirect_neg as f64;
        (r + 1.0) / (r + s + 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrustParams {
    /// Discount applied to indirect evidence.
    pub indirect_weight: f64,
    /// Smallest fraction of a block that is ever verified.
    pub f_min: f64,
}

impl Default for TrustParams {
    fn default() -> Self {
        Self {
            indirect_weight: 0.5,
            f_min: 0.1,
        }
    }
}

/// One CH's evidence about other CHs, keyed by their public keys.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrustTable {
    pub params: TrustParams,
    records: BTreeMap<PublicKey, EvidenceRecord>,
}

impl TrustTable {
    pub fn new(params: TrustParams) -> Self {
        Self {
            params,
            records: BTreeMap::new(),
        }
    }

    pub fn update_evidence(&mut self, subject: &PublicKey, outcome: Outcome, channel: Channel) {
        let rec = self.records.entry(subject.clone()).or_default();
        match (outcome, channel) {
            (Outcome::Pos, Channel::Direct) => rec.direct_pos += 1,
            (Outcome::Neg, Channel::Direct) => rec.direct_neg += 1,
            (Outcome::Pos, Channel::Indirect) => rec.indirect_pos += 1,
            (Outcome::Neg, Channel::Indirect) => rec.indirect_neg += 1,
        }
    }

    pub fn record(&self, subject: &PublicKey) -> EvidenceRecord {
        self.records.get(subject).copied().unwrap_or_default()
    }

    pub fn trust_level(&self, subject: &PublicKey) -> f64 {
        self.record(subject)
            .trust_level(self.params.indirect_weight)
    }

    /// Fraction of a block's transactions to verify. Full verification unless
    /// this CH holds direct evidence about the miner or a cosigner; otherwise
    /// scaled down by the best trust level among those with evidence.
    pub fn verification_fraction(&self, miner: &PublicKey, cosigners: &[PublicKey]) -> f64 {
        let best = std::iter::once(miner)
            .chain(cosigners)
            .filter(|pk| self.record(pk).has_direct())
            .map(|pk| self.trust_level(pk))
            .fold(None, |acc: Option<f64>, tl| {
                Some(acc.map_or(tl, |a| a.max(tl)))
            });
        match best {
            None => 1.0,
            Some(tl) => (1.0 - tl).max(self.params.f_min).min(1.0),
        }
    }

    pub fn subjects(&self) -> impl Iterator<Item = (&PublicKey, &EvidenceRecord)> {
        self.records.iter()
    }

    /// Tab-separated snapshot: `subject r s indirect_pos indirect_neg tl`.
    pub fn export_tsv(&self) -> String {
        let mut out = String::from("subject\tr\ts\tindirect_pos\tindirect_neg\ttl\n");
        for (pk, rec) in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{:.6}",
                pk.label(),
                rec.direct_pos,
                rec.direct_neg,
                rec.indirect_pos,
                rec.indirect_neg,
                rec.trust_level(self.params.indirect_weight)
            );
        }
        out
    }
}

/// `ceil(f * total)` clamped to `[0, total]`.
pub fn sample_size(f: f64, total: usize) -> usize {
    ((f * total as f64) - 1e-9).ceil().clamp(0.0, total as f64) as usize
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SampleOutcome {
    Pass { checked: usize },
    Fail { checked: usize, bad: Vec<TxId> },
}

impl SampleOutcome {
    pub fn checked(&self) -> usize {
        match self {
            SampleOutcome::Pass { checked } | SampleOutcome::Fail { checked, .. } => *checked,
        }
    }

    pub fn passed(&self) -> bool {
        matches!(self, SampleOutcome::Pass { .. })
    }
}

/// Check the signatures of `ceil(f * T)` distinct transactions drawn
/// uniformly from `block`. Evidence bookkeeping is left to the caller.
pub fn verify_block_sampled(
    provider: &dyn CryptoProvider,
    block: &Block,
    f: f64,
    rng: &mut dyn RngCore,
) -> SampleOutcome {
    let total = block.txs.len();
    if total == 0 {
        return SampleOutcome::Pass { checked: 0 };
    }
    let m = sample_size(f, total).max(1);
    let mut picks = index::sample(rng, total, m).into_vec();
    picks.sort_unstable();
    let bad: Vec<TxId> = picks
        .iter()
        .map(|&i| &block.txs[i])
        .filter(|tx| validate_tx_signatures(provider, tx).is_err())
        .map(|tx| tx.id())
        .collect();
    if bad.is_empty() {
        SampleOutcome::Pass { checked: m }
    } else {
        SampleOutcome::Fail { checked: m, bad }
    }
}
