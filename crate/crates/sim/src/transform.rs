//! Privacy transforms applied to data released under the minimal level.

use homechain_core::hash_bytes;

pub trait PrivacyTransform: Send + Sync {
    fn name(&self) -> &'static str;
    fn apply(&self, data: &[u8]) -> Vec<u8>;
}

/// Pass-through.
pub struct Identity;

impl PrivacyTransform for Identity {
    fn name(&self) -> &'static str {
        "identity"
    }

    fn apply(&self, data: &[u8]) -> Vec<u8> {
        data.to_vec()
    }
}

/// Release only the hash of the data.
pub struct Digest;

impl PrivacyTransform for Digest {
    fn name(&self) -> &'static str {
        "digest"
    }

    fn apply(&self, data: &[u8]) -> Vec<u8> {
        hash_bytes(data).0.to_vec()
    }
}

/// Keep the first half of the bytes.
pub struct Truncate;

impl PrivacyTransform for Truncate {
    fn name(&self) -> &'static str {
        "truncate"
    }

    fn apply(&self, data: &[u8]) -> Vec<u8> {
        data[..data.len() / 2].to_vec()
    }
}

static REGISTRY: [&dyn PrivacyTransform; 3] = [&Identity, &Digest, &Truncate];

pub fn lookup(name: &str) -> Option<&'static dyn PrivacyTransform> {
    REGISTRY.iter().copied().find(|t| t.name() == name)
}
