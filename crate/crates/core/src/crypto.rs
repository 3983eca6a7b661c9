//! Signatures and hashing.
//!
//! ECDSA over NIST P-256 with RFC 6979 deterministic nonces, and SHA-256.
//!
//! Encodings (all fixed length):
//! - public key: 33-byte SEC1 compressed point
//! - signature: 64 bytes, big-endian `r || s`, with `s` in the lower half of
//!   the group order; high-`s` encodings are rejected so each signature has
//!   exactly one valid byte form
//! - digest: 32 bytes

use std::fmt;

use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{Signature as EcdsaSignature, SigningKey, VerifyingKey};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::randomness::Seed;

pub const PUBLIC_KEY_LEN: usize = 33;
pub const SIGNATURE_LEN: usize = 64;
pub const DIGEST_LEN: usize = 32;

/// Security level of P-256 in bits; larger requests cannot be honoured.
pub const MAX_SECURITY_PARAM: u32 = 128;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("security parameter {0} outside 1..=128")]
    SecurityParam(u32),
    #[error("malformed public key")]
    PublicKey,
}

pub type Result<T> = std::result::Result<T, CryptoError>;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub const ZERO: Digest = Digest([0; DIGEST_LEN]);

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn hash(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

/// Incremental form of [`hash`] for inputs too large to buffer.
#[derive(Clone, Default)]
pub struct Hasher(Sha256);

impl Hasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, bytes: &[u8]) {
        self.0.update(bytes);
    }

    pub fn finish(self) -> Digest {
        Digest(self.0.finalize().into())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PublicKey(pub [u8; PUBLIC_KEY_LEN]);

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey(")?;
        for b in &self.0[..6] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

impl PublicKey {
    /// Checks the bytes decode to a curve point.
    pub fn validate(&self) -> Result<()> {
        VerifyingKey::from_sec1_bytes(&self.0)
            .map(|_| ())
            .map_err(|_| CryptoError::PublicKey)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature(")?;
        for b in &self.0[..6] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
    public: PublicKey,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

fn check_security_param(k: u32) -> Result<()> {
    if k == 0 || k > MAX_SECURITY_PARAM {
        return Err(CryptoError::SecurityParam(k));
    }
    Ok(())
}

impl KeyPair {
    fn from_signing(signing: SigningKey) -> Self {
        let point = signing.verifying_key().to_encoded_point(true);
        let public = PublicKey(point.as_bytes().try_into().expect("compressed point"));
        Self { signing, public }
    }

    pub fn public(&self) -> PublicKey {
        self.public
    }
}

/// Fresh key pair from the operating system's randomness.
pub fn keygen(security_param: u32) -> Result<KeyPair> {
    check_security_param(security_param)?;
    Ok(KeyPair::from_signing(SigningKey::random(
        &mut rand::rngs::OsRng,
    )))
}

/// Key pair derived from a seed, for reproducible simulations.
pub fn keygen_from_seed(security_param: u32, seed: Seed) -> Result<KeyPair> {
    check_security_param(security_param)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed.0);
    loop {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        // Rejection sampling: out-of-range scalars occur with probability
        // about 2^-32.
        if let Ok(signing) = SigningKey::from_bytes(&bytes.into()) {
            return Ok(KeyPair::from_signing(signing));
        }
    }
}

pub fn sign(key: &KeyPair, message: &[u8]) -> Signature {
    let sig: EcdsaSignature = key.signing.sign(message);
    let sig = sig.normalize_s().unwrap_or(sig);
    Signature(sig.to_bytes().into())
}

/// `true` iff `signature` is the valid low-`s` signature of `message` under
/// `public`. Malformed keys or signatures simply fail to verify.
pub fn verify(public: &PublicKey, message: &[u8], signature: &Signature) -> bool {
    let Ok(key) = VerifyingKey::from_sec1_bytes(&public.0) else {
        return false;
    };
    let Ok(sig) = EcdsaSignature::from_slice(&signature.0) else {
        return false;
    };
    if sig.normalize_s().is_some() {
        return false;
    }
    key.verify(message, &sig).is_ok()
}
