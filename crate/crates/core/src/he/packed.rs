//! Slot-packed ciphertexts of real vectors.

use std::fmt;
use std::sync::Arc;

use num_bigint::BigUint;
use rand::RngCore;

use super::codec::FixedPointCodec;
use super::paillier::bit_field;
use super::{AdditiveScheme, Paillier};
use crate::error::{Error, Result};

pub const WIRE_VERSION: u8 = 1;
const HEADER_LEN: usize = 16;

/// Encrypted vector: `slot_count` encoded values packed `slots_per_chunk`
/// to a plaintext, lowest slot in the lowest bits. `add_count` is the number
/// of homomorphic additions folded in, so the ciphertext holds the sum of
/// `add_count + 1` vectors.
pub struct PackedCiphertext<S: AdditiveScheme = Paillier> {
    pk: Arc<S::PublicKey>,
    chunks: Vec<S::Ciphertext>,
    slot_count: usize,
    codec: FixedPointCodec,
    add_count: u32,
}

impl<S: AdditiveScheme> Clone for PackedCiphertext<S> {
    fn clone(&self) -> Self {
        PackedCiphertext {
            pk: self.pk.clone(),
            chunks: self.chunks.clone(),
            slot_count: self.slot_count,
            codec: self.codec,
            add_count: self.add_count,
        }
    }
}

impl<S: AdditiveScheme> fmt::Debug for PackedCiphertext<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PackedCiphertext")
            .field("slot_count", &self.slot_count)
            .field("chunks", &self.chunks.len())
            .field("codec", &self.codec)
            .field("add_count", &self.add_count)
            .finish()
    }
}

impl<S: AdditiveScheme> PartialEq for PackedCiphertext<S> {
    fn eq(&self, other: &Self) -> bool {
        self.pk == other.pk
            && self.chunks == other.chunks
            && self.slot_count == other.slot_count
            && self.codec == other.codec
            && self.add_count == other.add_count
    }
}

/// Number of codec slots that fit in one plaintext of `pk`.
pub fn slots_per_chunk<S: AdditiveScheme>(pk: &S::PublicKey, codec: FixedPointCodec) -> Result<usize> {
    let per = (S::plaintext_bits(pk) / codec.slot_bits()) as usize;
    if per == 0 {
        return Err(Error::Parameter(format!(
            "{}-bit plaintexts cannot hold a {}-bit slot",
            S::plaintext_bits(pk),
            codec.slot_bits()
        )));
    }
    Ok(per)
}

fn pack(slots: &[u128], width: u32) -> BigUint {
    let total_bits = slots.len() as u64 * width as u64;
    let mut digits = vec![0u64; total_bits.div_ceil(64) as usize];
    for (i, &slot) in slots.iter().enumerate() {
        let offset = i as u64 * width as u64;
        let mut done = 0u32;
        while done < width {
            let pos = offset + done as u64;
            let shift = (pos % 64) as u32;
            let take = (64 - shift).min(width - done);
            let bits = ((slot >> done) as u64) & low_mask(take);
            digits[(pos / 64) as usize] |= bits << shift;
            done += take;
        }
    }
    let bytes: Vec<u8> = digits.iter().flat_map(|d| d.to_le_bytes()).collect();
    BigUint::from_bytes_le(&bytes)
}

fn low_mask(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

fn unpack(m: &BigUint, count: usize, width: u32, out: &mut Vec<u128>) {
    let digits = m.to_u64_digits();
    for i in 0..count {
        out.push(bit_field(&digits, i as u64 * width as u64, width));
    }
}

/// Encodes and encrypts `values` under any additive scheme.
pub fn encrypt_with<S: AdditiveScheme, R: RngCore + ?Sized>(
    pk: &Arc<S::PublicKey>,
    values: &[f64],
    codec: FixedPointCodec,
    rng: &mut R,
) -> Result<PackedCiphertext<S>> {
    let per = slots_per_chunk::<S>(pk, codec)?;
    let slots = codec.encode(values)?;
    let chunks = slots
        .chunks(per)
        .map(|group| S::encrypt(pk, &pack(group, codec.slot_bits()), rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(PackedCiphertext {
        pk: pk.clone(),
        chunks,
        slot_count: values.len(),
        codec,
        add_count: 0,
    })
}

/// Homomorphic slot-wise sum.
pub fn ct_add<S: AdditiveScheme>(a: &PackedCiphertext<S>, b: &PackedCiphertext<S>) -> Result<PackedCiphertext<S>> {
    if a.pk != b.pk {
        return Err(Error::Protocol("ciphertexts under different public keys".into()));
    }
    if a.codec != b.codec {
        return Err(Error::Protocol("ciphertexts with different codecs".into()));
    }
    if a.slot_count != b.slot_count || a.chunks.len() != b.chunks.len() {
        return Err(Error::Protocol(format!(
            "cannot add ciphertexts of {} and {} slots",
            a.slot_count, b.slot_count
        )));
    }
    let summands = a.summands() + b.summands();
    if summands > a.codec.capacity() {
        return Err(Error::Capacity {
            summands,
            capacity: a.codec.capacity(),
        });
    }
    let chunks = a.chunks.iter().zip(&b.chunks).map(|(x, y)| S::add(&a.pk, x, y)).collect();
    Ok(PackedCiphertext {
        pk: a.pk.clone(),
        chunks,
        slot_count: a.slot_count,
        codec: a.codec,
        add_count: (summands - 1) as u32,
    })
}

/// Decrypts the sum held by `ct`. `divisor` must equal the number of summed
/// vectors, which is what removes the per-summand bias.
pub fn decrypt<S: AdditiveScheme>(sk: &S::SecretKey, ct: &PackedCiphertext<S>, divisor: u64) -> Result<Vec<f64>> {
    if divisor != ct.summands() {
        return Err(Error::Protocol(format!(
            "decrypt divisor {divisor} but the ciphertext sums {} vectors",
            ct.summands()
        )));
    }
    if **S::public_key(sk) != *ct.pk {
        return Err(Error::Protocol("secret key does not match the ciphertext's public key".into()));
    }
    let per = slots_per_chunk::<S>(&ct.pk, ct.codec)?;
    let mut slots = Vec::with_capacity(ct.slot_count);
    for (k, c) in ct.chunks.iter().enumerate() {
        let count = per.min(ct.slot_count - k * per);
        unpack(&S::decrypt(sk, c)?, count, ct.codec.slot_bits(), &mut slots);
    }
    Ok(ct.codec.decode(&slots, divisor))
}

impl<S: AdditiveScheme> PackedCiphertext<S> {
    pub fn public_key(&self) -> &Arc<S::PublicKey> {
        &self.pk
    }

    pub fn chunks(&self) -> &[S::Ciphertext] {
        &self.chunks
    }

    pub fn slot_count(&self) -> usize {
        self.slot_count
    }

    pub fn codec(&self) -> FixedPointCodec {
        self.codec
    }

    pub fn add_count(&self) -> u32 {
        self.add_count
    }

    /// Number of encrypted vectors summed into this ciphertext.
    pub fn summands(&self) -> u64 {
        self.add_count as u64 + 1
    }

    pub fn is_empty(&self) -> bool {
        self.slot_count == 0
    }

    /// Header `version, f, w_int, g` (one byte each) then `slot_count`,
    /// `add_count` and the chunk count as big-endian `u32`; every chunk
    /// follows as a big-endian `u32` length and its big-endian bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.push(WIRE_VERSION);
        out.push(self.codec.frac_bits() as u8);
        out.push(self.codec.int_bits() as u8);
        out.push(self.codec.guard_bits() as u8);
        out.extend_from_slice(&(self.slot_count as u32).to_be_bytes());
        out.extend_from_slice(&self.add_count.to_be_bytes());
        out.extend_from_slice(&(self.chunks.len() as u32).to_be_bytes());
        for c in &self.chunks {
            let bytes = S::ciphertext_to_bytes(&self.pk, c);
            out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
            out.extend_from_slice(&bytes);
        }
        out
    }

    pub fn from_bytes(pk: &Arc<S::PublicKey>, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Wire("ciphertext header truncated".into()));
        }
        if bytes[0] != WIRE_VERSION {
            return Err(Error::Wire(format!("unsupported ciphertext version {}", bytes[0])));
        }
        let codec = FixedPointCodec::new(bytes[1] as u32, bytes[2] as u32, bytes[3] as u32)
            .map_err(|e| Error::Wire(format!("bad codec in header: {e}")))?;
        let be32 = |at: usize| u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let slot_count = be32(4) as usize;
        let add_count = be32(8);
        let chunk_count = be32(12) as usize;
        let per = slots_per_chunk::<S>(pk, codec)?;
        if chunk_count != slot_count.div_ceil(per) {
            return Err(Error::Wire(format!("{chunk_count} chunks cannot hold {slot_count} slots")));
        }
        if add_count as u64 + 1 > codec.capacity() {
            return Err(Error::Wire(format!("add count {add_count} exceeds codec capacity")));
        }
        let mut at = HEADER_LEN;
        let mut chunks = Vec::with_capacity(chunk_count);
        for _ in 0..chunk_count {
            if bytes.len() < at + 4 {
                return Err(Error::Wire("chunk length truncated".into()));
            }
            let len = be32(at) as usize;
            at += 4;
            let body = bytes
                .get(at..at + len)
                .ok_or_else(|| Error::Wire("chunk body truncated".into()))?;
            chunks.push(S::ciphertext_from_bytes(pk, body)?);
            at += len;
        }
        if at != bytes.len() {
            return Err(Error::Wire(format!("{} trailing bytes", bytes.len() - at)));
        }
        Ok(PackedCiphertext {
            pk: pk.clone(),
            chunks,
            slot_count,
            codec,
            add_count,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::he::{encrypt, keygen};
    use crate::rng::{derive, Stream};
    use rand::Rng;
    use std::sync::OnceLock;

    type Keys = (Arc<crate::he::PublicKey>, crate::he::SecretKey);

    fn keys() -> &'static Keys {
        static KEYS: OnceLock<Keys> = OnceLock::new();
        KEYS.get_or_init(|| keygen(512, &mut derive(11, Stream::Keygen, 0, 0)).unwrap())
    }

    #[test]
    fn pack_unpack_round_trip() {
        let mut rng = derive(0, Stream::Encrypt, 0, 0);
        for width in [1u32, 7, 55, 63, 64, 65, 100, 120] {
            let slots: Vec<u128> = (0..13).map(|_| rng.random::<u128>() & ((1u128 << width) - 1)).collect();
            let mut back = Vec::new();
            unpack(&pack(&slots, width), slots.len(), width, &mut back);
            assert_eq!(back, slots, "width {width}");
        }
    }

    #[test]
    fn round_trip_thousand_values() {
        let (pk, sk) = keys();
        let codec = FixedPointCodec::default();
        let mut rng = derive(1, Stream::Encrypt, 0, 0);
        let values: Vec<f64> = (0..1000).map(|_| rng.random_range(-100.0..100.0)).collect();
        let ct = encrypt(pk, &values, codec, &mut rng).unwrap();
        assert_eq!(ct.chunks().len(), 1000usize.div_ceil(9));
        let back = decrypt(sk, &ct, 1).unwrap();
        let err = values.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= codec.quantum());
    }

    #[test]
    fn empty_vector() {
        let (pk, sk) = keys();
        let ct = encrypt(pk, &[], FixedPointCodec::default(), &mut derive(2, Stream::Encrypt, 0, 0)).unwrap();
        assert!(ct.is_empty() && ct.chunks().is_empty());
        assert!(decrypt(sk, &ct, 1).unwrap().is_empty());
    }

    #[test]
    fn encryptions_differ() {
        let (pk, _) = keys();
        let mut rng = derive(3, Stream::Encrypt, 0, 0);
        let a = encrypt(pk, &[1.0, 2.0], FixedPointCodec::default(), &mut rng).unwrap();
        let b = encrypt(pk, &[1.0, 2.0], FixedPointCodec::default(), &mut rng).unwrap();
        assert_ne!(a.chunks(), b.chunks());
    }

    #[test]
    fn add_two() {
        let (pk, sk) = keys();
        let codec = FixedPointCodec::default();
        let mut rng = derive(4, Stream::Encrypt, 0, 0);
        let a = encrypt(pk, &[1.5], codec, &mut rng).unwrap();
        let b = encrypt(pk, &[2.25], codec, &mut rng).unwrap();
        let s = ct_add(&a, &b).unwrap();
        assert_eq!(s.add_count(), 1);
        assert!((decrypt(sk, &s, 2).unwrap()[0] - 3.75).abs() <= 2.0 * codec.quantum());
    }

    #[test]
    fn three_fixed_vectors() {
        let (pk, sk) = keys();
        let codec = FixedPointCodec::default();
        let mut rng = derive(5, Stream::Encrypt, 0, 0);
        let cts: Vec<_> = [[1.0, 2.0], [3.0, 4.0], [-1.0, 0.0]]
            .iter()
            .map(|v| encrypt(pk, v, codec, &mut rng).unwrap())
            .collect();
        let sum = ct_add(&ct_add(&cts[0], &cts[1]).unwrap(), &cts[2]).unwrap();
        let out = decrypt(sk, &sum, 3).unwrap();
        assert!((out[0] - 3.0).abs() <= 3.0 * codec.quantum());
        assert!((out[1] - 6.0).abs() <= 3.0 * codec.quantum());
    }

    #[test]
    fn twenty_clients_match_plaintext_sum() {
        let (pk, sk) = keys();
        let codec = FixedPointCodec::default();
        let mut rng = derive(6, Stream::Encrypt, 0, 0);
        let vecs: Vec<Vec<f64>> = (0..20).map(|_| (0..50).map(|_| rng.random_range(-8.0..8.0)).collect()).collect();
        let mut acc = encrypt(pk, &vecs[0], codec, &mut rng).unwrap();
        for v in &vecs[1..] {
            acc = ct_add(&acc, &encrypt(pk, v, codec, &mut rng).unwrap()).unwrap();
        }
        assert_eq!(acc.add_count(), 19);
        let out = decrypt(sk, &acc, 20).unwrap();
        for (j, got) in out.iter().enumerate() {
            let truth: f64 = vecs.iter().map(|v| v[j]).sum();
            assert!((got - truth).abs() <= 20.0 * codec.quantum());
        }
    }

    #[test]
    fn guard_capacity_and_divisor_checks() {
        let (pk, sk) = keys();
        let codec = FixedPointCodec::new(10, 4, 2).unwrap();
        let mut rng = derive(7, Stream::Encrypt, 0, 0);
        let one = encrypt(pk, &[0.5], codec, &mut rng).unwrap();
        let mut acc = one.clone();
        for _ in 1..4 {
            acc = ct_add(&acc, &one).unwrap();
        }
        // a fifth summand would exceed 2^2
        assert!(matches!(ct_add(&acc, &one), Err(Error::Capacity { summands: 5, capacity: 4 })));
        assert!((decrypt(sk, &acc, 4).unwrap()[0] - 2.0).abs() < 1e-12);
        assert!(matches!(decrypt(sk, &acc, 3), Err(Error::Protocol(_))));
    }

    #[test]
    fn shape_mismatch() {
        let (pk, _) = keys();
        let codec = FixedPointCodec::default();
        let mut rng = derive(8, Stream::Encrypt, 0, 0);
        let a = encrypt(pk, &[1.0], codec, &mut rng).unwrap();
        let b = encrypt(pk, &[1.0, 2.0], codec, &mut rng).unwrap();
        assert!(matches!(ct_add(&a, &b), Err(Error::Protocol(_))));
        let c = encrypt(pk, &[1.0], FixedPointCodec::new(20, 16, 8).unwrap(), &mut rng).unwrap();
        assert!(matches!(ct_add(&a, &c), Err(Error::Protocol(_))));
    }

    #[test]
    fn foreign_key_is_rejected() {
        let (pk, _) = keys();
        let (_, other_sk) = keygen(512, &mut derive(12, Stream::Keygen, 0, 0)).unwrap();
        let ct = encrypt(pk, &[1.0], FixedPointCodec::default(), &mut derive(9, Stream::Encrypt, 0, 0)).unwrap();
        assert!(matches!(decrypt(&other_sk, &ct, 1), Err(Error::Protocol(_))));
    }

    #[test]
    fn wire_round_trip() {
        let (pk, sk) = keys();
        let codec = FixedPointCodec::default();
        let mut rng = derive(10, Stream::Encrypt, 0, 0);
        let a = encrypt(pk, &[1.0, -2.0, 3.5, 0.0, 7.0, 1.0, 1.0, 1.0, 1.0, 9.0], codec, &mut rng).unwrap();
        let s = ct_add(&a, &a).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(bytes[0], WIRE_VERSION);
        assert_eq!(&bytes[1..4], &[30, 16, 8]);
        assert_eq!(&bytes[4..8], &10u32.to_be_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_be_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_be_bytes());
        let back = PackedCiphertext::<Paillier>::from_bytes(pk, &bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(decrypt(sk, &back, 2).unwrap()[9], 18.0);
        assert!(PackedCiphertext::<Paillier>::from_bytes(pk, &bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = 9;
        assert!(PackedCiphertext::<Paillier>::from_bytes(pk, &bad).is_err());
    }
}
