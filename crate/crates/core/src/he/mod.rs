//! Additively homomorphic encryption of real vectors.
//!
//! [`FixedPointCodec`] turns reals into unsigned slots, [`PackedCiphertext`]
//! packs many slots into each plaintext integer, and an [`AdditiveScheme`]
//! encrypts those integers. [`Paillier`] is the built-in scheme.

mod codec;
mod packed;
pub mod paillier;

use std::fmt;
use std::sync::Arc;

use num_bigint::BigUint;
use rand::RngCore;

use crate::error::Result;

pub use codec::FixedPointCodec;
pub use packed::{ct_add, decrypt, encrypt_with, slots_per_chunk, PackedCiphertext, WIRE_VERSION};
pub use paillier::{keygen, keypair_from_primes};

/// An additively homomorphic public-key scheme over integer plaintexts
/// `0 <= m < 2^plaintext_bits`.
///
/// Decryption is the only operation that takes a secret key.
pub trait AdditiveScheme: 'static {
    type PublicKey: fmt::Debug + PartialEq + Send + Sync;
    type SecretKey: fmt::Debug + Send + Sync;
    type Ciphertext: Clone + fmt::Debug + PartialEq + Send + Sync;

    fn plaintext_bits(pk: &Self::PublicKey) -> u32;

    fn encrypt<R: RngCore + ?Sized>(pk: &Self::PublicKey, m: &BigUint, rng: &mut R) -> Result<Self::Ciphertext>;

    fn add(pk: &Self::PublicKey, a: &Self::Ciphertext, b: &Self::Ciphertext) -> Self::Ciphertext;

    fn decrypt(sk: &Self::SecretKey, c: &Self::Ciphertext) -> Result<BigUint>;

    fn public_key(sk: &Self::SecretKey) -> &Arc<Self::PublicKey>;

    fn ciphertext_to_bytes(pk: &Self::PublicKey, c: &Self::Ciphertext) -> Vec<u8>;

    fn ciphertext_from_bytes(pk: &Self::PublicKey, bytes: &[u8]) -> Result<Self::Ciphertext>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Paillier;

pub type PublicKey = paillier::PublicKey;
pub type SecretKey = paillier::SecretKey;

impl AdditiveScheme for Paillier {
    type PublicKey = paillier::PublicKey;
    type SecretKey = paillier::SecretKey;
    type Ciphertext = BigUint;

    fn plaintext_bits(pk: &Self::PublicKey) -> u32 {
        pk.plaintext_bits()
    }

    fn encrypt<R: RngCore + ?Sized>(pk: &Self::PublicKey, m: &BigUint, rng: &mut R) -> Result<BigUint> {
        pk.encrypt(m, rng)
    }

    fn add(pk: &Self::PublicKey, a: &BigUint, b: &BigUint) -> BigUint {
        pk.add(a, b)
    }

    fn decrypt(sk: &Self::SecretKey, c: &BigUint) -> Result<BigUint> {
        sk.decrypt(c)
    }

    fn public_key(sk: &Self::SecretKey) -> &Arc<Self::PublicKey> {
        sk.public_key()
    }

    fn ciphertext_to_bytes(pk: &Self::PublicKey, c: &BigUint) -> Vec<u8> {
        let raw = c.to_bytes_be();
        let mut out = vec![0u8; pk.ciphertext_bytes().saturating_sub(raw.len())];
        out.extend_from_slice(&raw);
        out
    }

    fn ciphertext_from_bytes(pk: &Self::PublicKey, bytes: &[u8]) -> Result<BigUint> {
        pk.ciphertext_from_bytes(bytes)
    }
}

/// Encrypts `values` under a Paillier public key.
pub fn encrypt<R: RngCore + ?Sized>(
    pk: &Arc<PublicKey>,
    values: &[f64],
    codec: FixedPointCodec,
    rng: &mut R,
) -> Result<PackedCiphertext<Paillier>> {
    encrypt_with::<Paillier, R>(pk, values, codec, rng)
}
