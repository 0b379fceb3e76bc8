//! Paillier encryption with `g = n + 1`.
//!
//! Encryption uses a short random exponent over a fixed public base,
//! `c = (1 + m n) * hs^a mod n^2` with `hs = h^n mod n^2`, `h = -y^2 mod n`.
//! The base is public, so `hs^a` is served from a precomputed window table
//! and costs a few dozen modular multiplications instead of a full
//! exponentiation. Ciphertexts are ordinary Paillier ciphertexts; decryption
//! is the usual `L(c^lambda mod n^2) * mu mod n`, computed with the CRT.

use std::fmt;
use std::sync::Arc;

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{Rng, RngCore};

use crate::error::{Error, Result};

const WINDOW: u32 = 6;

const SMALL_PRIMES: [u32; 53] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109,
    113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193, 197, 199, 211, 223, 227, 229, 233,
    239, 241, 251,
];

/// `base^(d * 2^(WINDOW * i)) mod modulus` for every window `i` and digit `d`.
#[derive(Clone)]
struct FixedBaseTable {
    rows: Vec<Vec<BigUint>>,
}

impl FixedBaseTable {
    fn new(base: &BigUint, modulus: &BigUint, exponent_bits: u32) -> Self {
        let windows = exponent_bits.div_ceil(WINDOW) as usize;
        let mut rows = Vec::with_capacity(windows);
        let mut b = base % modulus;
        for _ in 0..windows {
            let mut row = Vec::with_capacity(1 << WINDOW);
            let mut acc = BigUint::one();
            for _ in 0..1 << WINDOW {
                row.push(acc.clone());
                acc = &acc * &b % modulus;
            }
            // acc is now b^(2^WINDOW), the base of the next window
            b = acc;
            rows.push(row);
        }
        FixedBaseTable { rows }
    }

    fn pow(&self, exponent: &BigUint, modulus: &BigUint) -> BigUint {
        let digits = exponent.to_u64_digits();
        let mut acc = BigUint::one();
        for (i, row) in self.rows.iter().enumerate() {
            let d = bit_field(&digits, i as u64 * WINDOW as u64, WINDOW) as usize;
            if d != 0 {
                acc = acc * &row[d] % modulus;
            }
        }
        acc
    }
}

/// `width` bits of a little-endian digit vector starting at bit `offset`.
pub(crate) fn bit_field(digits: &[u64], offset: u64, width: u32) -> u128 {
    debug_assert!(width <= 120);
    let mut out = 0u128;
    let mut got = 0u32;
    while got < width {
        let pos = offset + got as u64;
        let word = (pos / 64) as usize;
        let shift = (pos % 64) as u32;
        let take = (64 - shift).min(width - got);
        let bits = digits.get(word).map_or(0, |w| (w >> shift) & mask64(take));
        out |= (bits as u128) << got;
        got += take;
    }
    out
}

fn mask64(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
    modulus_bits: u32,
    nonce_bits: u32,
    hs: BigUint,
    table: FixedBaseTable,
}

impl PublicKey {
    fn new<R: RngCore + ?Sized>(n: BigUint, rng: &mut R) -> Self {
        let n_squared = &n * &n;
        let modulus_bits = n.bits() as u32;
        let nonce_bits = modulus_bits.div_ceil(2);
        let y = loop {
            let y = random_below(&n, rng);
            if !y.is_zero() && y.gcd(&n).is_one() {
                break y;
            }
        };
        let h = &n - (&y * &y % &n);
        let hs = h.modpow(&n, &n_squared);
        let table = FixedBaseTable::new(&hs, &n_squared, nonce_bits);
        PublicKey {
            n,
            n_squared,
            modulus_bits,
            nonce_bits,
            hs,
            table,
        }
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    pub fn modulus_bits(&self) -> u32 {
        self.modulus_bits
    }

    /// Bits of plaintext that always fit below `n`.
    pub fn plaintext_bits(&self) -> u32 {
        self.modulus_bits - 1
    }

    /// Encrypts an integer `m < n`.
    pub fn encrypt<R: RngCore + ?Sized>(&self, m: &BigUint, rng: &mut R) -> Result<BigUint> {
        if m >= &self.n {
            return Err(Error::Parameter("plaintext is not below the modulus".into()));
        }
        let a = random_bits(self.nonce_bits, rng);
        let blind = self.table.pow(&a, &self.n_squared);
        let gm = (BigUint::one() + m * &self.n) % &self.n_squared;
        Ok(gm * blind % &self.n_squared)
    }

    /// Ciphertext of the sum of the two plaintexts (mod `n`).
    pub fn add(&self, a: &BigUint, b: &BigUint) -> BigUint {
        a * b % &self.n_squared
    }

    fn check_ciphertext(&self, c: &BigUint) -> Result<()> {
        if c.is_zero() || c >= &self.n_squared {
            return Err(Error::Wire("ciphertext outside (0, n^2)".into()));
        }
        Ok(())
    }

    /// Width in bytes of a serialized ciphertext.
    pub fn ciphertext_bytes(&self) -> usize {
        self.n_squared.bits().div_ceil(8) as usize
    }

    pub fn ciphertext_from_bytes(&self, bytes: &[u8]) -> Result<BigUint> {
        let c = BigUint::from_bytes_be(bytes);
        self.check_ciphertext(&c)?;
        Ok(c)
    }
}

impl PartialEq for PublicKey {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.hs == other.hs
    }
}

impl Eq for PublicKey {}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PublicKey")
            .field("modulus_bits", &self.modulus_bits)
            .field("n", &self.n)
            .finish_non_exhaustive()
    }
}

/// Factorization-derived decryption key. Holds its public key.
pub struct SecretKey {
    public: Arc<PublicKey>,
    lambda: BigUint,
    mu: BigUint,
    p: BigUint,
    q: BigUint,
    p_squared: BigUint,
    q_squared: BigUint,
    hp: BigUint,
    hq: BigUint,
    q_inv_p: BigUint,
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecretKey")
            .field("modulus_bits", &self.public.modulus_bits)
            .finish_non_exhaustive()
    }
}

fn l_function(u: &BigUint, d: &BigUint) -> BigUint {
    (u - 1u32) / d
}

impl SecretKey {
    fn from_primes(p: BigUint, q: BigUint, public: Arc<PublicKey>) -> Result<Self> {
        let n = public.n.clone();
        let one = BigUint::one();
        let (p1, q1) = (&p - &one, &q - &one);
        let lambda = p1.lcm(&q1);
        let mu = (&lambda % &n)
            .modinv(&n)
            .ok_or_else(|| Error::Parameter("lambda is not invertible mod n".into()))?;
        let g = &n + &one;
        let p_squared = &p * &p;
        let q_squared = &q * &q;
        let hp = l_function(&g.modpow(&p1, &p_squared), &p)
            .modinv(&p)
            .ok_or_else(|| Error::Parameter("degenerate prime p".into()))?;
        let hq = l_function(&g.modpow(&q1, &q_squared), &q)
            .modinv(&q)
            .ok_or_else(|| Error::Parameter("degenerate prime q".into()))?;
        let q_inv_p = (&q % &p)
            .modinv(&p)
            .ok_or_else(|| Error::Parameter("p and q are not coprime".into()))?;
        Ok(SecretKey {
            public,
            lambda,
            mu,
            p,
            q,
            p_squared,
            q_squared,
            hp,
            hq,
            q_inv_p,
        })
    }

    pub fn public_key(&self) -> &Arc<PublicKey> {
        &self.public
    }

    /// CRT decryption.
    pub fn decrypt(&self, c: &BigUint) -> Result<BigUint> {
        self.public.check_ciphertext(c)?;
        let one = BigUint::one();
        let mp = l_function(&c.modpow(&(&self.p - &one), &self.p_squared), &self.p) * &self.hp % &self.p;
        let mq = l_function(&c.modpow(&(&self.q - &one), &self.q_squared), &self.q) * &self.hq % &self.q;
        // m = mq + q * ((mp - mq) * q^-1 mod p)
        let diff = (&mp + &self.p - (&mq % &self.p)) % &self.p;
        let t = diff * &self.q_inv_p % &self.p;
        Ok(mq + &self.q * t)
    }

    /// Textbook `L(c^lambda mod n^2) * mu mod n`, kept as a cross-check.
    pub fn decrypt_textbook(&self, c: &BigUint) -> Result<BigUint> {
        self.public.check_ciphertext(c)?;
        let pk = &self.public;
        let u = c.modpow(&self.lambda, &pk.n_squared);
        Ok(l_function(&u, &pk.n) * &self.mu % &pk.n)
    }
}

/// Uniform integer with exactly `bits` random bits (leading ones allowed to be zero).
pub(crate) fn random_bits<R: RngCore + ?Sized>(bits: u32, rng: &mut R) -> BigUint {
    let bytes = bits.div_ceil(8) as usize;
    let mut buf = vec![0u8; bytes];
    rng.fill_bytes(&mut buf);
    let excess = bytes as u32 * 8 - bits;
    if excess > 0 {
        buf[0] &= 0xff >> excess;
    }
    BigUint::from_bytes_be(&buf)
}

/// Uniform integer in `[0, bound)` by rejection.
pub(crate) fn random_below<R: RngCore + ?Sized>(bound: &BigUint, rng: &mut R) -> BigUint {
    let bits = bound.bits() as u32;
    loop {
        let x = random_bits(bits, rng);
        if &x < bound {
            return x;
        }
    }
}

fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    for &sp in SMALL_PRIMES.iter().chain(std::iter::once(&2)) {
        let sp = BigUint::from(sp);
        if n == &sp {
            return true;
        }
        if (n % &sp).is_zero() {
            return false;
        }
    }
    let one = BigUint::one();
    let n1 = n - &one;
    let s = n1.trailing_zeros().expect("n - 1 is even and non-zero");
    let d = &n1 >> s;
    let span = n - 3u32;
    'witness: for _ in 0..rounds {
        let a = random_below(&span, rng) + &two;
        let mut x = a.modpow(&d, n);
        if x == one || x == n1 {
            continue;
        }
        for _ in 1..s {
            x = &x * &x % n;
            if x == n1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Random prime with exactly `bits` bits and its top two bits set.
fn random_prime<R: RngCore + ?Sized>(bits: u32, rng: &mut R) -> BigUint {
    loop {
        let mut c = random_bits(bits, rng);
        c.set_bit(u64::from(bits - 1), true);
        c.set_bit(u64::from(bits - 2), true);
        c.set_bit(0, true);
        if is_probable_prime(&c, 40, rng) {
            return c;
        }
    }
}

/// Generates a key pair with an exactly `modulus_bits`-bit modulus.
pub fn keygen<R: Rng + ?Sized>(modulus_bits: u32, rng: &mut R) -> Result<(Arc<PublicKey>, SecretKey)> {
    if modulus_bits < 512 || !modulus_bits.is_multiple_of(2) {
        return Err(Error::Parameter(format!(
            "modulus size must be an even number of bits, at least 512; got {modulus_bits}"
        )));
    }
    let half = modulus_bits / 2;
    loop {
        let p = random_prime(half, rng);
        let q = random_prime(half, rng);
        if p == q {
            continue;
        }
        if let Ok(pair) = keypair_from_primes(p, q, rng) {
            return Ok(pair);
        }
    }
}

/// Key pair for caller-chosen primes. Meant for fixtures; no size checks.
pub fn keypair_from_primes<R: RngCore + ?Sized>(
    p: BigUint,
    q: BigUint,
    rng: &mut R,
) -> Result<(Arc<PublicKey>, SecretKey)> {
    if p == q || p < BigUint::from(3u32) || q < BigUint::from(3u32) {
        return Err(Error::Parameter("need two distinct odd primes".into()));
    }
    let n = &p * &q;
    let phi = (&p - 1u32) * (&q - 1u32);
    if !n.gcd(&phi).is_one() {
        return Err(Error::Parameter("gcd(n, phi(n)) must be 1".into()));
    }
    let public = Arc::new(PublicKey::new(n, rng));
    let secret = SecretKey::from_primes(p, q, public.clone())?;
    Ok((public, secret))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};

    fn toy() -> (Arc<PublicKey>, SecretKey) {
        keypair_from_primes(11u32.into(), 13u32.into(), &mut derive(0, Stream::Keygen, 0, 0)).unwrap()
    }

    #[test]
    fn small_prime_fixture() {
        let (pk, sk) = toy();
        let mut rng = derive(1, Stream::Encrypt, 0, 0);
        let c = pk.encrypt(&5u32.into(), &mut rng).unwrap();
        assert_eq!(sk.decrypt(&c).unwrap(), BigUint::from(5u32));
        assert_eq!(sk.decrypt_textbook(&c).unwrap(), BigUint::from(5u32));
    }

    /// `c = g^m r^n mod n^2` with `g = n + 1`, computed from scratch.
    #[test]
    fn decrypts_textbook_ciphertexts() {
        let (pk, sk) = toy();
        let n = BigUint::from(143u32);
        let n2 = &n * &n;
        let g = &n + 1u32;
        for m in 0u32..143 {
            for r in [2u32, 7, 100, 142] {
                let c = g.modpow(&m.into(), &n2) * BigUint::from(r).modpow(&n, &n2) % &n2;
                assert_eq!(sk.decrypt(&c).unwrap(), BigUint::from(m));
            }
        }
        assert_eq!(pk.n(), &n);
    }

    #[test]
    fn addition_is_homomorphic() {
        let (pk, sk) = toy();
        let mut rng = derive(2, Stream::Encrypt, 0, 0);
        let a = pk.encrypt(&40u32.into(), &mut rng).unwrap();
        let b = pk.encrypt(&120u32.into(), &mut rng).unwrap();
        assert_eq!(sk.decrypt(&pk.add(&a, &b)).unwrap(), BigUint::from(17u32));
    }

    #[test]
    fn keygen_is_deterministic_and_sized() {
        let (pk1, sk1) = keygen(512, &mut derive(3, Stream::Keygen, 0, 0)).unwrap();
        let (pk2, _) = keygen(512, &mut derive(3, Stream::Keygen, 0, 0)).unwrap();
        assert_eq!(pk1, pk2);
        assert_eq!(pk1.modulus_bits(), 512);
        let mut rng = derive(4, Stream::Encrypt, 0, 0);
        let top = (BigUint::one() << pk1.plaintext_bits()) - 1u32;
        for m in [BigUint::zero(), BigUint::one(), top] {
            let c = pk1.encrypt(&m, &mut rng).unwrap();
            assert_eq!(sk1.decrypt(&c).unwrap(), m);
            assert_eq!(sk1.decrypt_textbook(&c).unwrap(), m);
        }
        assert!(keygen(256, &mut rng).is_err());
        assert!(keygen(513, &mut rng).is_err());
    }

    #[test]
    fn encryption_is_randomized() {
        let (pk, _) = toy();
        let mut rng = derive(5, Stream::Encrypt, 0, 0);
        let cs: Vec<BigUint> = (0..8).map(|_| pk.encrypt(&BigUint::from(3u32), &mut rng).unwrap()).collect();
        assert!(cs.iter().any(|c| c != &cs[0]));
    }

    #[test]
    fn fixed_base_table_matches_modpow() {
        let m = BigUint::from(1_000_003u32) * BigUint::from(999_983u32);
        let base = BigUint::from(12_345u32);
        let table = FixedBaseTable::new(&base, &m, 70);
        let mut rng = derive(6, Stream::Encrypt, 0, 0);
        for _ in 0..50 {
            let e = random_bits(70, &mut rng);
            assert_eq!(table.pow(&e, &m), base.modpow(&e, &m));
        }
    }

    #[test]
    fn primality() {
        let mut rng = derive(7, Stream::Keygen, 0, 0);
        for p in [2u32, 3, 5, 97, 251, 257, 65_537, 2_147_483_647] {
            assert!(is_probable_prime(&p.into(), 20, &mut rng), "{p}");
        }
        for c in [0u32, 1, 4, 9, 561, 1105, 65_535, 2_147_483_649] {
            assert!(!is_probable_prime(&c.into(), 20, &mut rng), "{c}");
        }
    }

    #[test]
    fn bit_fields_cross_words() {
        let digits = [0xdead_beef_0123_4567u64, 0x89ab_cdef_fedc_ba98];
        assert_eq!(bit_field(&digits, 0, 16), 0x4567);
        assert_eq!(bit_field(&digits, 56, 16), 0x98de);
        assert_eq!(bit_field(&digits, 120, 16), 0x89);
        assert_eq!(bit_field(&digits, 200, 8), 0);
    }

    #[test]
    fn out_of_range_inputs() {
        let (pk, sk) = toy();
        let mut rng = derive(8, Stream::Encrypt, 0, 0);
        assert!(pk.encrypt(&143u32.into(), &mut rng).is_err());
        assert!(sk.decrypt(&BigUint::zero()).is_err());
        assert!(sk.decrypt(pk.n_squared()).is_err());
    }
}
