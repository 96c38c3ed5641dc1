//! Owner-controlled access-control lists carried in local block headers.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::PublicKey;
use crate::ids::{AccessScope, DeviceId, StorageKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    StoreLocal,
    StoreShared,
    StoreCloud,
    AccessLatest,
    AccessWindow,
    AccessFullChain,
    Monitor,
    DeviceToDevice,
}

impl Action {
    pub const ALL: [Action; 8] = [
        Action::StoreLocal,
        Action::StoreShared,
        Action::StoreCloud,
        Action::AccessLatest,
        Action::AccessWindow,
        Action::AccessFullChain,
        Action::Monitor,
        Action::DeviceToDevice,
    ];

    pub fn store(kind: StorageKind) -> Self {
        match kind {
            StorageKind::Local => Action::StoreLocal,
            StorageKind::Shared => Action::StoreShared,
            StorageKind::Cloud => Action::StoreCloud,
        }
    }

    pub fn access(scope: AccessScope) -> Self {
        match scope {
            AccessScope::Window => Action::AccessWindow,
            AccessScope::FullChain => Action::AccessFullChain,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Action::StoreLocal => 1,
            Action::StoreShared => 2,
            Action::StoreCloud => 3,
            Action::AccessLatest => 4,
            Action::AccessWindow => 5,
            Action::AccessFullChain => 6,
            Action::Monitor => 7,
            Action::DeviceToDevice => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivacyLevel {
    /// Block-number and hash of the stored chain are disclosed.
    FullChain,
    /// Only the minimum data needed to answer the query is disclosed.
    Minimal,
}

/// Who a rule applies to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subject {
    Key(PublicKey),
    Device(DeviceId),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("rule grants no actions")]
    EmptyActions,
    #[error("full-chain access requires the full_chain privacy level")]
    FullChainLevelMismatch,
    #[error("duplicate rule for subject {subject:?} on device {device}")]
    DuplicateRule { subject: Subject, device: DeviceId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRule {
    pub subject: Subject,
    pub device: DeviceId,
    pub actions: BTreeSet<Action>,
    pub privacy_level: PrivacyLevel,
    /// Name of the privacy transform applied to released data; `None` is pass-through.
    #[serde(default)]
    pub transform: Option<String>,
    /// Whether resolved access proofs may be published to the overlay.
    #[serde(default = "default_true")]
    pub disclose_proof: bool,
}

fn default_true() -> bool {
    true
}

impl PolicyRule {
    pub fn new(
        subject: Subject,
        device: DeviceId,
        actions: impl IntoIterator<Item = Action>,
        privacy_level: PrivacyLevel,
    ) -> Result<Self, PolicyError> {
        let rule = Self {
            subject,
            device,
            actions: actions.into_iter().collect(),
            privacy_level,
            transform: None,
            disclose_proof: true,
        };
        rule.validate()?;
        Ok(rule)
    }

    pub fn with_transform(mut self, name: impl Into<String>) -> Self {
        self.transform = Some(name.into());
        self
    }

    pub fn without_proof_disclosure(mut self) -> Self {
        self.disclose_proof = false;
        self
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.actions.is_empty() {
            return Err(PolicyError::EmptyActions);
        }
        if self.actions.contains(&Action::AccessFullChain)
            && self.privacy_level != PrivacyLevel::FullChain
        {
            return Err(PolicyError::FullChainLevelMismatch);
        }
        Ok(())
    }

    pub fn allows(&self, action: Action) -> bool {
        self.actions.contains(&action)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Allow {
        level: PrivacyLevel,
        /// Index of the matching rule; `None` for the owner.
        rule: Option<usize>,
    },
    Deny,
}

impl Decision {
    pub fn is_allow(&self) -> bool {
        matches!(self, Decision::Allow { .. })
    }

    pub fn level(&self) -> Option<PrivacyLevel> {
        match self {
            Decision::Allow { level, .. } => Some(*level),
            Decision::Deny => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PolicyHeader {
    pub rules: Vec<PolicyRule>,
    pub version: u64,
}

impl PolicyHeader {
    pub fn new(rules: Vec<PolicyRule>, version: u64) -> Result<Self, PolicyError> {
        let mut seen = BTreeSet::new();
        for r in &rules {
            r.validate()?;
            if !seen.insert((&r.subject, &r.device)) {
                return Err(PolicyError::DuplicateRule {
                    subject: r.subject.clone(),
                    device: r.device.clone(),
                });
            }
        }
        Ok(Self { rules, version })
    }

    /// Header for the next version. Rules in `updates` replace existing rules
    /// for the same (subject, device) pair and are appended otherwise.
    pub fn merged(&self, updates: &[PolicyRule]) -> Result<Self, PolicyError> {
        let mut rules = self.rules.clone();
        for u in updates {
            u.validate()?;
            match rules
                .iter_mut()
                .find(|r| r.subject == u.subject && r.device == u.device)
            {
                Some(slot) => *slot = u.clone(),
                None => rules.push(u.clone()),
            }
        }
        Self::new(rules, self.version + 1)
    }

    /// Header for the next version with `rules` as the complete rule set.
    pub fn replaced(&self, rules: Vec<PolicyRule>) -> Result<Self, PolicyError> {
        Self::new(rules, self.version + 1)
    }

    pub fn rule_for(&self, subject: &Subject, device: &DeviceId) -> Option<(usize, &PolicyRule)> {
        self.rules
            .iter()
            .enumerate()
            .find(|(_, r)| &r.subject == subject && &r.device == device)
    }

    /// Decide whether `subject` may perform `action` on `device`.
    ///
    /// The owner is always granted full-chain disclosure. A subject holding
    /// only windowed rights that asks for the full chain is downgraded to the
    /// minimal level rather than refused.
    pub fn decide(
        &self,
        owner: &PublicKey,
        subject: &Subject,
        device: &DeviceId,
        action: Action,
    ) -> Decision {
        if matches!(subject, Subject::Key(k) if k == owner) {
            return Decision::Allow {
                level: PrivacyLevel::FullChain,
                rule: None,
            };
        }
        let Some((idx, rule)) = self.rule_for(subject, device) else {
            return Decision::Deny;
        };
        let allow = |level| Decision::Allow {
            level,
            rule: Some(idx),
        };
        match action {
            Action::AccessFullChain => {
                if rule.allows(Action::AccessFullChain) {
                    allow(PrivacyLevel::FullChain)
                } else if rule.allows(Action::AccessWindow) || rule.allows(Action::AccessLatest) {
                    allow(PrivacyLevel::Minimal)
                } else {
                    Decision::Deny
                }
            }
            Action::AccessWindow | Action::AccessLatest => {
                if rule.allows(action) || rule.allows(Action::AccessFullChain) {
                    allow(PrivacyLevel::Minimal)
                } else {
                    Decision::Deny
                }
            }
            other if rule.allows(other) => allow(rule.privacy_level),
            _ => Decision::Deny,
        }
    }

    /// Keys named by any rule.
    pub fn granted_keys(&self) -> BTreeSet<PublicKey> {
        self.rules
            .iter()
            .filter_map(|r| match &r.subject {
                Subject::Key(k) => Some(k.clone()),
                Subject::Device(_) => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::SimCrypto;

    fn key(label: &str) -> PublicKey {
        SimCrypto::keypair_from_label(label).public
    }

    fn dev() -> DeviceId {
        DeviceId::new("thermostat")
    }

    #[test]
    fn rule_validation() {
        assert_eq!(
            PolicyRule::new(Subject::Key(key("a")), dev(), [], PrivacyLevel::Minimal),
            Err(PolicyError::EmptyActions)
        );
        assert_eq!(
            PolicyRule::new(
                Subject::Key(key("a")),
                dev(),
                [Action::AccessFullChain],
                PrivacyLevel::Minimal
            ),
            Err(PolicyError::FullChainLevelMismatch)
        );
    }

    #[test]
    fn one_rule_per_subject_device_pair() {
        let r = PolicyRule::new(
            Subject::Key(key("a")),
            dev(),
            [Action::Monitor],
            PrivacyLevel::Minimal,
        )
        .unwrap();
        assert!(matches!(
            PolicyHeader::new(vec![r.clone(), r.clone()], 1),
            Err(PolicyError::DuplicateRule { .. })
        ));
        let merged = PolicyHeader::default()
            .merged(std::slice::from_ref(&r))
            .unwrap()
            .merged(&[r])
            .unwrap();
        assert_eq!(merged.rules.len(), 1);
        assert_eq!(merged.version, 2);
    }

    #[test]
    fn decisions() {
        let owner = key("owner");
        let sp = key("76sj18394");
        let windowed = key("window-only");
        let h = PolicyHeader::new(
            vec![
                PolicyRule::new(
                    Subject::Key(sp.clone()),
                    dev(),
                    [Action::AccessFullChain],
                    PrivacyLevel::FullChain,
                )
                .unwrap(),
                PolicyRule::new(
                    Subject::Key(windowed.clone()),
                    dev(),
                    [Action::AccessWindow],
                    PrivacyLevel::Minimal,
                )
                .unwrap(),
            ],
            1,
        )
        .unwrap();
        let d = |k: &PublicKey, a| h.decide(&owner, &Subject::Key(k.clone()), &dev(), a);
        assert_eq!(
            d(&owner, Action::AccessFullChain).level(),
            Some(PrivacyLevel::FullChain)
        );
        assert_eq!(
            d(&sp, Action::AccessFullChain).level(),
            Some(PrivacyLevel::FullChain)
        );
        assert_eq!(
            d(&windowed, Action::AccessFullChain).level(),
            Some(PrivacyLevel::Minimal)
        );
        assert_eq!(d(&windowed, Action::Monitor), Decision::Deny);
        assert_eq!(d(&key("stranger"), Action::AccessWindow), Decision::Deny);
        assert_eq!(
            h.decide(
                &owner,
                &Subject::Key(sp.clone()),
                &DeviceId::new("camera"),
                Action::AccessFullChain
            ),
            Decision::Deny
        );
    }
}
