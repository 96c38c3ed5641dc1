//! Pluggable cryptography.
//!
//! Two backends implement [`CryptoProvider`]:
//!
//! - [`StandardCrypto`]: Ed25519 signatures, X25519 key agreement and
//!   ChaCha20-Poly1305 sealing.
//! - [`SimCrypto`]: a fast deterministic double for large simulations. Its
//!   signatures are keyed SHA-256 digests whose key is derivable from the
//!   public token, and its key agreement runs in the multiplicative group
//!   modulo the Mersenne prime 2^61 - 1. It offers no security whatsoever and
//!   exists so that simulated adversaries can be scripted cheaply.
//!
//! Hashing is SHA-256 for both backends, see [`hash_bytes`].

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Nonce};
use ed25519_dalek::{Signer as _, SigningKey, VerifyingKey};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::serde_hex;

/// Errors raised by a crypto provider.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("key material is malformed")]
    MalformedKey,
    #[error("signature bytes are malformed")]
    MalformedSignature,
    #[error("key belongs to the {found:?} scheme, provider is {expected:?}")]
    ProviderMismatch { expected: Scheme, found: Scheme },
    #[error("ciphertext failed authentication")]
    Authentication,
    #[error("ciphertext is truncated")]
    Truncated,
}

/// Which backend produced a key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scheme {
    Standard,
    Sim,
}

impl Scheme {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Scheme::Standard => 1,
            Scheme::Sim => 2,
        }
    }
}

/// 256-bit digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DataHash(#[serde(with = "serde_hex::array")] pub [u8; 32]);

impl DataHash {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for DataHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DataHash({}..)", &self.to_hex()[..12])
    }
}

impl fmt::Display for DataHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// SHA-256 of `data`.
pub fn hash_bytes(data: &[u8]) -> DataHash {
    DataHash(Sha256::digest(data).into())
}

pub(crate) fn hash_parts(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u32).to_be_bytes());
        h.update(p);
    }
    h.finalize().into()
}

/// A public key. For the simulation backend the bytes are a printable token
/// such as `76sj18394`; for the standard backend they are the Ed25519
/// verifying key followed by the X25519 public key.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PublicKey {
    pub scheme: Scheme,
    #[serde(with = "serde_hex::vec")]
    pub bytes: Vec<u8>,
}

impl PublicKey {
    pub fn new(scheme: Scheme, bytes: Vec<u8>) -> Self {
        Self { scheme, bytes }
    }

    /// Printable form: the token itself for simulation keys, hex otherwise.
    pub fn label(&self) -> String {
        match self.scheme {
            Scheme::Sim => String::from_utf8_lossy(&self.bytes).into_owned(),
            Scheme::Standard => hex::encode(&self.bytes),
        }
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = self.label();
        let short = if label.len() > 16 {
            &label[..16]
        } else {
            &label
        };
        write!(f, "PublicKey({short})")
    }
}

impl fmt::Display for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Private half of a key pair. Holds a 32-byte seed from which both the
/// signing and the key-agreement secrets are derived.
#[derive(Clone, PartialEq, Eq)]
pub struct PrivateKey {
    scheme: Scheme,
    seed: [u8; 32],
    public: PublicKey,
}

impl PrivateKey {
    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PrivateKey({:?}, <redacted>)", self.public)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyPair {
    pub public: PublicKey,
    pub private: PrivateKey,
}

/// A detached signature together with the key that produced it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub signer: PublicKey,
    #[serde(with = "serde_hex::vec")]
    pub bytes: Vec<u8>,
}

/// Symmetric key produced by key agreement.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SharedKey(#[serde(with = "serde_hex::array")] pub [u8; 32]);

impl fmt::Debug for SharedKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SharedKey({}..)", &hex::encode(self.0)[..8])
    }
}

/// An intermediate key-agreement value: a group element in the backend's
/// Diffie-Hellman group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DhPoint {
    pub scheme: Scheme,
    pub bytes: Vec<u8>,
}

pub trait CryptoProvider: Send + Sync + fmt::Debug {
    fn scheme(&self) -> Scheme;

    /// Deterministic key pair from arbitrary seed material.
    fn keypair_from_seed(&self, seed: &[u8]) -> KeyPair;

    fn sign(&self, key: &PrivateKey, msg: &[u8]) -> Result<Signature, CryptoError>;

    /// `Ok(true)` iff `sig` was produced by the private key of `pk` over `msg`.
    /// Malformed keys or signature bytes are errors, never `Ok(true)`.
    fn verify(&self, pk: &PublicKey, msg: &[u8], sig: &[u8]) -> Result<bool, CryptoError>;

    /// The key-agreement element published by `pk`.
    fn dh_public(&self, pk: &PublicKey) -> Result<DhPoint, CryptoError>;

    /// Raise `point` to the secret exponent of `own`.
    fn dh(&self, own: &PrivateKey, point: &DhPoint) -> Result<DhPoint, CryptoError>;

    fn seal(&self, key: &SharedKey, nonce: &[u8; 12], plaintext: &[u8]) -> Vec<u8>;

    fn open(
        &self,
        key: &SharedKey,
        nonce: &[u8; 12],
        ciphertext: &[u8],
    ) -> Result<Vec<u8>, CryptoError>;

    fn generate_keypair(&self, rng: &mut dyn RngCore) -> KeyPair {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        self.keypair_from_seed(&seed)
    }

    fn check_scheme(&self, found: Scheme) -> Result<(), CryptoError> {
        if found == self.scheme() {
            Ok(())
        } else {
            Err(CryptoError::ProviderMismatch {
                expected: self.scheme(),
                found,
            })
        }
    }
}

fn kdf(scheme: Scheme, point: &DhPoint) -> SharedKey {
    SharedKey(hash_parts(&[
        b"homechain/shared-key",
        &[scheme.tag()],
        &point.bytes,
    ]))
}

/// Pairwise key agreement: `derive(a, B) == derive(b, A)`.
pub fn derive_shared_key(
    provider: &dyn CryptoProvider,
    own: &PrivateKey,
    peer: &PublicKey,
) -> Result<SharedKey, CryptoError> {
    provider.check_scheme(own.scheme)?;
    provider.check_scheme(peer.scheme)?;
    let point = provider.dh(own, &provider.dh_public(peer)?)?;
    Ok(kdf(provider.scheme(), &point))
}

/// One step of generalized Diffie-Hellman: fold `own` into a partial value
/// computed by other group members.
pub fn extend_group_partial(
    provider: &dyn CryptoProvider,
    own: &PrivateKey,
    partial: &DhPoint,
) -> Result<DhPoint, CryptoError> {
    provider.check_scheme(own.scheme)?;
    provider.check_scheme(partial.scheme)?;
    provider.dh(own, partial)
}

/// Final step of generalized Diffie-Hellman: `partial` carries every other
/// member's secret; folding `own` in yields the group key shared by all.
pub fn derive_group_key(
    provider: &dyn CryptoProvider,
    own: &PrivateKey,
    partial: &DhPoint,
) -> Result<SharedKey, CryptoError> {
    let point = extend_group_partial(provider, own, partial)?;
    Ok(kdf(provider.scheme(), &point))
}

/// Seal a storage block-number (or any short token) under `key` with a fresh
/// random nonce. Output is `nonce || ciphertext`.
pub fn encrypt_token(
    provider: &dyn CryptoProvider,
    key: &SharedKey,
    token: &[u8],
    rng: &mut dyn RngCore,
) -> Vec<u8> {
    let mut nonce = [0u8; 12];
    rng.fill_bytes(&mut nonce);
    let mut out = nonce.to_vec();
    out.extend(provider.seal(key, &nonce, token));
    out
}

pub fn decrypt_token(
    provider: &dyn CryptoProvider,
    key: &SharedKey,
    sealed: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    if sealed.len() < 12 {
        return Err(CryptoError::Truncated);
    }
    let (nonce, ct) = sealed.split_at(12);
    let nonce: [u8; 12] = nonce.try_into().expect("split at 12");
    provider.open(key, &nonce, ct)
}

// ---------------------------------------------------------------------------
// Standard backend

#[derive(Debug, Default, Clone, Copy)]
pub struct StandardCrypto;

impl StandardCrypto {
    fn signing_key(seed: &[u8; 32]) -> SigningKey {
        SigningKey::from_bytes(seed)
    }

    fn x25519_secret(seed: &[u8; 32]) -> x25519_dalek::StaticSecret {
        x25519_dalek::StaticSecret::from(hash_parts(&[b"homechain/x25519", seed]))
    }

    fn split(pk: &PublicKey) -> Result<(&[u8], &[u8]), CryptoError> {
        if pk.bytes.len() != 64 {
            return Err(CryptoError::MalformedKey);
        }
        Ok(pk.bytes.split_at(32))
    }
}

impl CryptoProvider for StandardCrypto {
    fn scheme(&self) -> Scheme {
        Scheme::Standard
    }

    fn keypair_from_seed(&self, seed: &[u8]) -> KeyPair {
        let seed = hash_parts(&[b"homechain/standard-seed", seed]);
        let vk = Self::signing_key(&seed).verifying_key();
        let xpub = x25519_dalek::PublicKey::from(&Self::x25519_secret(&seed));
        let mut bytes = vk.to_bytes().to_vec();
        bytes.extend_from_slice(xpub.as_bytes());
        let public = PublicKey::new(Scheme::Standard, bytes);
        KeyPair {
            private: PrivateKey {
                scheme: Scheme::Standard,
                seed,
                public: public.clone(),
            },
            public,
        }
    }

    fn sign(&self, key: &PrivateKey, msg: &[u8]) -> Result<Signature, CryptoError> {
        self.check_scheme(key.scheme)?;
        let sig = Self::signing_key(&key.seed).sign(msg);
        Ok(Signature {
            signer: key.public.clone(),
            bytes: sig.to_bytes().to_vec(),
        })
    }

    fn verify(&self, pk: &PublicKey, msg: &[u8], sig: &[u8]) -> Result<bool, CryptoError> {
        self.check_scheme(pk.scheme)?;
        let (ed, _) = Self::split(pk)?;
        let ed: [u8; 32] = ed.try_into().map_err(|_| CryptoError::MalformedKey)?;
        let vk = VerifyingKey::from_bytes(&ed).map_err(|_| CryptoError::MalformedKey)?;
        let sig = ed25519_dalek::Signature::from_slice(sig)
            .map_err(|_| CryptoError::MalformedSignature)?;
        Ok(vk.verify_strict(msg, &sig).is_ok())
    }

    fn dh_public(&self, pk: &PublicKey) -> Result<DhPoint, CryptoError> {
        self.check_scheme(pk.scheme)?;
        let (_, x) = Self::split(pk)?;
        Ok(DhPoint {
            scheme: Scheme::Standard,
            bytes: x.to_vec(),
        })
    }

    fn dh(&self, own: &PrivateKey, point: &DhPoint) -> Result<DhPoint, CryptoError> {
        self.check_scheme(own.scheme)?;
        self.check_scheme(point.scheme)?;
        let p: [u8; 32] = point
            .bytes
            .as_slice()
            .try_into()
            .map_err(|_| CryptoError::MalformedKey)?;
        let shared =
            Self::x25519_secret(&own.seed).diffie_hellman(&x25519_dalek::PublicKey::from(p));
        Ok(DhPoint {
            scheme: Scheme::Standard,
            bytes: shared.as_bytes().to_vec(),
        })
    }

    fn seal(&self, key: &SharedKey, nonce: &[u8; 12], plaintext: &[u8]) -> Vec<u8> {
        ChaCha20Poly1305::new((&key.0).into())
            .encrypt(Nonce::from_slice(nonce), plaintext)
            .expect("chacha20poly1305 encryption is infallible for in-memory buffers")
    }

    fn open(
        &self,
        key: &SharedKey,
        nonce: &[u8; 12],
        ciphertext: &[u8],
    ) -> Result<Vec<u8>, CryptoError> {
        ChaCha20Poly1305::new((&key.0).into())
            .decrypt(Nonce::from_slice(nonce), ciphertext)
            .map_err(|_| CryptoError::Authentication)
    }
}

// ---------------------------------------------------------------------------
// Simulation backend

const SIM_P: u64 = (1 << 61) - 1;
const SIM_G: u64 = 37;
const SIM_TAG_LEN: usize = 16;

fn mulmod(a: u64, b: u64) -> u64 {
    ((a as u128 * b as u128) % SIM_P as u128) as u64
}

fn powmod(mut base: u64, mut exp: u64) -> u64 {
    let mut acc = 1u64;
    base %= SIM_P;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mulmod(acc, base);
        }
        base = mulmod(base, base);
        exp >>= 1;
    }
    acc
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SimCrypto;

impl SimCrypto {
    /// Key pair whose public token is exactly `label`.
    pub fn keypair_from_label(label: &str) -> KeyPair {
        let public = PublicKey::new(Scheme::Sim, label.as_bytes().to_vec());
        KeyPair {
            private: PrivateKey {
                scheme: Scheme::Sim,
                seed: Self::secret(&public),
                public: public.clone(),
            },
            public,
        }
    }

    fn secret(pk: &PublicKey) -> [u8; 32] {
        hash_parts(&[b"homechain/sim-secret", &pk.bytes])
    }

    fn exponent(seed: &[u8; 32]) -> u64 {
        let x = u64::from_be_bytes(seed[..8].try_into().expect("8 bytes")) % (SIM_P - 2);
        x + 1
    }

    fn digest_sig(seed: &[u8; 32], msg: &[u8]) -> Vec<u8> {
        hash_parts(&[b"homechain/sim-sig", seed, msg]).to_vec()
    }

    fn keystream_xor(key: &SharedKey, nonce: &[u8; 12], data: &[u8]) -> Vec<u8> {
        data.chunks(32)
            .enumerate()
            .flat_map(|(i, chunk)| {
                let block = hash_parts(&[
                    b"homechain/sim-stream",
                    &key.0,
                    nonce,
                    &(i as u64).to_be_bytes(),
                ]);
                chunk
                    .iter()
                    .zip(block)
                    .map(|(a, b)| a ^ b)
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    fn tag(key: &SharedKey, nonce: &[u8; 12], ct: &[u8]) -> [u8; SIM_TAG_LEN] {
        hash_parts(&[b"homechain/sim-tag", &key.0, nonce, ct])[..SIM_TAG_LEN]
            .try_into()
            .expect("tag length")
    }
}

impl CryptoProvider for SimCrypto {
    fn scheme(&self) -> Scheme {
        Scheme::Sim
    }

    fn keypair_from_seed(&self, seed: &[u8]) -> KeyPair {
        const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
        let digest = hash_parts(&[b"homechain/sim-label", seed]);
        let label: String = digest[..12]
            .iter()
            .map(|b| ALPHABET[*b as usize % ALPHABET.len()] as char)
            .collect();
        Self::keypair_from_label(&label)
    }

    fn sign(&self, key: &PrivateKey, msg: &[u8]) -> Result<Signature, CryptoError> {
        self.check_scheme(key.scheme)?;
        Ok(Signature {
            signer: key.public.clone(),
            bytes: Self::digest_sig(&key.seed, msg),
        })
    }

    fn verify(&self, pk: &PublicKey, msg: &[u8], sig: &[u8]) -> Result<bool, CryptoError> {
        self.check_scheme(pk.scheme)?;
        if pk.bytes.is_empty() {
            return Err(CryptoError::MalformedKey);
        }
        if sig.len() != 32 {
            return Err(CryptoError::MalformedSignature);
        }
        Ok(Self::digest_sig(&Self::secret(pk), msg) == sig)
    }

    fn dh_public(&self, pk: &PublicKey) -> Result<DhPoint, CryptoError> {
        self.check_scheme(pk.scheme)?;
        if pk.bytes.is_empty() {
            return Err(CryptoError::MalformedKey);
        }
        let x = Self::exponent(&Self::secret(pk));
        Ok(DhPoint {
            scheme: Scheme::Sim,
            bytes: powmod(SIM_G, x).to_be_bytes().to_vec(),
        })
    }

    fn dh(&self, own: &PrivateKey, point: &DhPoint) -> Result<DhPoint, CryptoError> {
        self.check_scheme(own.scheme)?;
        self.check_scheme(point.scheme)?;
        let p: [u8; 8] = point
            .bytes
            .as_slice()
            .try_into()
            .map_err(|_| CryptoError::MalformedKey)?;
        let base = u64::from_be_bytes(p);
        if base == 0 || base >= SIM_P {
            return Err(CryptoError::MalformedKey);
        }
        Ok(DhPoint {
            scheme: Scheme::Sim,
            bytes: powmod(base, Self::exponent(&own.seed))
                .to_be_bytes()
                .to_vec(),
        })
    }

    fn seal(&self, key: &SharedKey, nonce: &[u8; 12], plaintext: &[u8]) -> Vec<u8> {
        let mut ct = Self::keystream_xor(key, nonce, plaintext);
        let tag = Self::tag(key, nonce, &ct);
        ct.extend_from_slice(&tag);
        ct
    }

    fn open(
        &self,
        key: &SharedKey,
        nonce: &[u8; 12],
        ciphertext: &[u8],
    ) -> Result<Vec<u8>, CryptoError> {
        if ciphertext.len() < SIM_TAG_LEN {
            return Err(CryptoError::Truncated);
        }
        let (ct, tag) = ciphertext.split_at(ciphertext.len() - SIM_TAG_LEN);
        if Self::tag(key, nonce, ct) != tag {
            return Err(CryptoError::Authentication);
        }
        Ok(Self::keystream_xor(key, nonce, ct))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn providers() -> Vec<Box<dyn CryptoProvider>> {
        vec![Box::new(StandardCrypto), Box::new(SimCrypto)]
    }

    #[test]
    fn empty_input_digest_is_sha256_golden_value() {
        assert_eq!(
            hash_bytes(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(hash_bytes(b"abc"), hash_bytes(b"abc"));
    }

    #[test]
    fn single_bit_flips_never_collide() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let len = 1 + (rng.next_u32() % 64) as usize;
            let mut data = vec![0u8; len];
            rng.fill_bytes(&mut data);
            let mut flipped = data.clone();
            let bit = rng.next_u32() as usize % (len * 8);
            flipped[bit / 8] ^= 1 << (bit % 8);
            assert_ne!(hash_bytes(&data), hash_bytes(&flipped));
        }
    }

    #[test]
    fn sign_verify_round_trip_and_tamper() {
        for p in providers() {
            let kp = p.keypair_from_seed(b"alice");
            let sig = p.sign(&kp.private, b"hello").unwrap();
            assert!(p.verify(&kp.public, b"hello", &sig.bytes).unwrap());
            assert!(!p.verify(&kp.public, b"hellp", &sig.bytes).unwrap());
            let mut bad = sig.bytes.clone();
            bad[0] ^= 1;
            assert!(!p.verify(&kp.public, b"hello", &bad).unwrap());
        }
    }

    #[test]
    fn fixture_keys_do_not_cross_verify() {
        let miner = SimCrypto::keypair_from_label("aheu1938k3");
        let sp = SimCrypto::keypair_from_label("76sj18394");
        let sig = SimCrypto.sign(&miner.private, b"multisig").unwrap();
        assert!(!SimCrypto
            .verify(&sp.public, b"multisig", &sig.bytes)
            .unwrap());
        assert_eq!(sp.public.label(), "76sj18394");

        let p = StandardCrypto;
        let miner = p.keypair_from_seed(b"aheu1938k3");
        let sp = p.keypair_from_seed(b"76sj18394");
        let sig = p.sign(&miner.private, b"multisig").unwrap();
        assert!(!p.verify(&sp.public, b"multisig", &sig.bytes).unwrap());
    }

    #[test]
    fn malformed_material_is_an_error() {
        let p = StandardCrypto;
        let short = PublicKey::new(Scheme::Standard, vec![1, 2, 3]);
        assert_eq!(
            p.verify(&short, b"m", &[0; 64]),
            Err(CryptoError::MalformedKey)
        );
        let kp = p.keypair_from_seed(b"k");
        assert_eq!(
            p.verify(&kp.public, b"m", &[0; 10]),
            Err(CryptoError::MalformedSignature)
        );
        let sim = SimCrypto::keypair_from_label("x1");
        assert!(matches!(
            p.verify(&sim.public, b"m", &[0; 64]),
            Err(CryptoError::ProviderMismatch { .. })
        ));
        assert!(matches!(
            derive_shared_key(&p, &kp.private, &sim.public),
            Err(CryptoError::ProviderMismatch { .. })
        ));
    }

    #[test]
    fn key_agreement_is_symmetric_and_peer_specific() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for p in providers() {
            for _ in 0..100 {
                let a = p.generate_keypair(&mut rng);
                let b = p.generate_keypair(&mut rng);
                let c = p.generate_keypair(&mut rng);
                let ab = derive_shared_key(p.as_ref(), &a.private, &b.public).unwrap();
                let ba = derive_shared_key(p.as_ref(), &b.private, &a.public).unwrap();
                let ac = derive_shared_key(p.as_ref(), &a.private, &c.public).unwrap();
                assert_eq!(ab, ba);
                assert_ne!(ab, ac);
            }
        }
    }

    #[test]
    fn three_party_group_key_agrees() {
        for p in providers() {
            let p = p.as_ref();
            let a = p.keypair_from_seed(b"a");
            let b = p.keypair_from_seed(b"b");
            let c = p.keypair_from_seed(b"c");
            // each member receives the partial carrying the other two secrets
            let bc = extend_group_partial(p, &b.private, &p.dh_public(&c.public).unwrap()).unwrap();
            let ac = extend_group_partial(p, &a.private, &p.dh_public(&c.public).unwrap()).unwrap();
            let ab = extend_group_partial(p, &a.private, &p.dh_public(&b.public).unwrap()).unwrap();
            let ka = derive_group_key(p, &a.private, &bc).unwrap();
            let kb = derive_group_key(p, &b.private, &ac).unwrap();
            let kc = derive_group_key(p, &c.private, &ab).unwrap();
            assert_eq!(ka, kb);
            assert_eq!(kb, kc);
            let pair = derive_shared_key(p, &a.private, &b.public).unwrap();
            assert_ne!(ka, pair);
        }
    }

    #[test]
    fn token_sealing_round_trips_and_authenticates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in providers() {
            let p = p.as_ref();
            let a = p.keypair_from_seed(b"miner");
            let s = p.keypair_from_seed(b"storage");
            let other = p.keypair_from_seed(b"other");
            let key = derive_shared_key(p, &a.private, &s.public).unwrap();
            let wrong = derive_shared_key(p, &a.private, &other.public).unwrap();
            let bn = [7u8; 16];
            let mut seen = std::collections::BTreeSet::new();
            for _ in 0..100 {
                let ct = encrypt_token(p, &key, &bn, &mut rng);
                assert_eq!(decrypt_token(p, &key, &ct).unwrap(), bn);
                assert_eq!(
                    decrypt_token(p, &wrong, &ct),
                    Err(CryptoError::Authentication)
                );
                assert!(seen.insert(ct));
            }
            assert_eq!(decrypt_token(p, &key, &[1, 2]), Err(CryptoError::Truncated));
        }
    }
}
