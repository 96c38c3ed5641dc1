//! Canonical byte encoding used for signing, identifiers and content hashes.
//!
//! Every field is written as a big-endian `u32` length followed by the field
//! bytes. Optional values start with a presence byte (`0x00` absent, `0x01`
//! present). The byte layout is documented in `docs/wire-format.md`.

use crate::crypto::PublicKey;
use crate::policy::{PolicyHeader, PolicyRule, PrivacyLevel, Subject};

#[derive(Debug, Default, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.raw(&v.to_be_bytes())
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.raw(&v.to_be_bytes())
    }

    /// Length-prefixed bytes.
    pub fn field(&mut self, bytes: &[u8]) -> &mut Self {
        self.u32(bytes.len() as u32).raw(bytes)
    }

    /// Length-prefixed field holding a presence byte and, if present, the value.
    pub fn opt_field(&mut self, bytes: Option<&[u8]>) -> &mut Self {
        match bytes {
            None => self.field(&[0]),
            Some(b) => {
                let mut inner = Vec::with_capacity(b.len() + 1);
                inner.push(1);
                inner.extend_from_slice(b);
                self.field(&inner)
            }
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub fn public_key(pk: &PublicKey) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(pk.scheme.tag()).field(&pk.bytes);
    w.finish()
}

fn subject(s: &Subject) -> Vec<u8> {
    let mut w = Writer::new();
    match s {
        Subject::Key(k) => w.u8(1).field(&public_key(k)),
        Subject::Device(d) => w.u8(2).field(d.as_str().as_bytes()),
    };
    w.finish()
}

pub fn policy_rule(r: &PolicyRule) -> Vec<u8> {
    let mut w = Writer::new();
    w.field(&subject(&r.subject))
        .field(r.device.as_str().as_bytes());
    let actions: Vec<u8> = r.actions.iter().map(|a| a.code()).collect();
    w.field(&actions)
        .field(&[match r.privacy_level {
            PrivacyLevel::FullChain => 1,
            PrivacyLevel::Minimal => 2,
        }])
        .opt_field(r.transform.as_deref().map(str::as_bytes))
        .field(&[r.disclose_proof as u8]);
    w.finish()
}

pub fn policy_rules(rules: &[PolicyRule]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(rules.len() as u32);
    for r in rules {
        w.field(&policy_rule(r));
    }
    w.finish()
}

pub fn policy_header(h: &PolicyHeader) -> Vec<u8> {
    let mut w = Writer::new();
    w.u64(h.version).field(&policy_rules(&h.rules));
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optional_fields_are_distinguishable() {
        let mut a = Writer::new();
        a.opt_field(None);
        let mut b = Writer::new();
        b.opt_field(Some(&[]));
        assert_ne!(a.finish(), b.finish());
    }

    #[test]
    fn field_layout_is_length_prefixed() {
        let mut w = Writer::new();
        w.field(b"ab").opt_field(Some(b"c"));
        assert_eq!(
            w.finish(),
            vec![0, 0, 0, 2, b'a', b'b', 0, 0, 0, 2, 1, b'c']
        );
    }
}
