//! Paillier cryptosystem with generator g = N + 1.
//!
//! Encryption is `(1 + mN) · r^N mod N²`, decryption is
//! `L(c^λ mod N²) · μ mod N` with `L(u) = (u - 1) / N` and `μ = λ⁻¹ mod N`.

use std::cell::Cell;
use std::fmt;
use std::sync::OnceLock;

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::RngCore;

use crate::codec::{self, Reader};
use crate::error::{invalid, Error, Result};

pub const MILLER_RABIN_ROUNDS: usize = 40;
/// Smallest prime size accepted without the insecure-test flag.
pub const MIN_SECURE_KAPPA1: u32 = 128;
/// Smallest prime size accepted at all.
pub const MIN_TEST_KAPPA1: u32 = 16;

const MAX_PRIME_ATTEMPTS_PER_BIT: u32 = 1000;

/// Whether undersized keys are allowed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeySecurity {
    Standard,
    /// Allows 16 <= kappa1 < 128. Only for tests and simulations.
    InsecureTest,
}

/// Counts of modular exponentiations and multiplications mod N² performed
/// on the current thread.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct OpCounts {
    pub exponentiations: u64,
    pub multiplications: u64,
}

impl std::ops::Sub for OpCounts {
    type Output = OpCounts;
    fn sub(self, rhs: OpCounts) -> OpCounts {
        OpCounts {
            exponentiations: self.exponentiations - rhs.exponentiations,
            multiplications: self.multiplications - rhs.multiplications,
        }
    }
}

thread_local! {
    static OPS: Cell<OpCounts> = const { Cell::new(OpCounts { exponentiations: 0, multiplications: 0 }) };
}

fn count(exp: u64, mul: u64) {
    OPS.with(|c| {
        let mut v = c.get();
        v.exponentiations += exp;
        v.multiplications += mul;
        c.set(v);
    });
}

/// Operation counters for the calling thread.
pub fn op_counts() -> OpCounts {
    OPS.with(|c| c.get())
}

pub fn reset_op_counts() {
    OPS.with(|c| c.set(OpCounts::default()));
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Ciphertext(BigUint);

impl Ciphertext {
    pub fn from_value(value: BigUint) -> Self {
        Ciphertext(value)
    }

    pub fn value(&self) -> &BigUint {
        &self.0
    }

    /// 4-byte big-endian byte count, then the big-endian magnitude.
    pub fn write_to(&self, out: &mut Vec<u8>) {
        codec::put_biguint(out, &self.0);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out);
        out
    }

    pub fn read_from(r: &mut Reader<'_>) -> Result<Self> {
        Ok(Ciphertext(r.biguint()?))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let c = Self::read_from(&mut r)?;
        r.finish()?;
        Ok(c)
    }
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Ciphertext({:x})", self.0)
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct PaillierPublicKey {
    n: BigUint,
    n_squared: BigUint,
}

impl fmt::Debug for PaillierPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PaillierPublicKey {{ n: {:x} }}", self.n)
    }
}

impl PaillierPublicKey {
    pub fn from_modulus(n: BigUint) -> Result<Self> {
        if n.bits() < 2 * MIN_TEST_KAPPA1 as u64 - 1 || n.is_even() {
            return invalid("public modulus must be odd and at least 31 bits");
        }
        let n_squared = &n * &n;
        Ok(PaillierPublicKey { n, n_squared })
    }

    pub fn modulus(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    pub fn generator(&self) -> BigUint {
        &self.n + 1u32
    }

    /// Bit length of N.
    pub fn bits(&self) -> u64 {
        self.n.bits()
    }

    pub fn encrypt<R: RngCore + ?Sized>(&self, m: &BigUint, rng: &mut R) -> Result<Ciphertext> {
        if m >= &self.n {
            return invalid("plaintext must be below N");
        }
        let r = loop {
            let r = random_below(&self.n, rng);
            // gcd(r, N) != 1 would factor N; resample anyway.
            if !r.is_zero() && r.gcd(&self.n).is_one() {
                break r;
            }
        };
        let rn = r.modpow(&self.n, &self.n_squared);
        let gm = BigUint::one() + m * &self.n;
        count(1, 1);
        Ok(Ciphertext((gm * rn) % &self.n_squared))
    }

    pub fn encrypt_u128<R: RngCore + ?Sized>(&self, m: u128, rng: &mut R) -> Result<Ciphertext> {
        self.encrypt(&BigUint::from(m), rng)
    }

    pub fn encrypt_vector<R: RngCore + ?Sized>(
        &self,
        v: &[BigUint],
        rng: &mut R,
    ) -> Result<Vec<Ciphertext>> {
        v.iter()
            .enumerate()
            .map(|(i, m)| {
                self.encrypt(m, rng).map_err(|_| {
                    Error::InvalidArgument(format!("component {i} is not below N"))
                })
            })
            .collect()
    }

    /// Homomorphic sum: product of the ciphertexts mod N².
    pub fn add_ct(&self, cs: &[Ciphertext]) -> Result<Ciphertext> {
        if cs.is_empty() {
            return invalid("add_ct of an empty list");
        }
        let mut acc = BigUint::one();
        for c in cs {
            acc = (acc * &c.0) % &self.n_squared;
        }
        count(0, cs.len() as u64);
        Ok(Ciphertext(acc))
    }

    /// Homomorphic scalar product: `c^k mod N²`.
    pub fn scalar_mul(&self, c: &Ciphertext, k: &BigUint) -> Result<Ciphertext> {
        if k >= &self.n {
            return invalid("scalar must be below N");
        }
        count(1, 0);
        Ok(Ciphertext(c.0.modpow(k, &self.n_squared)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        codec::put_biguint(&mut out, &self.n);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let n = r.biguint()?;
        r.finish()?;
        Self::from_modulus(n)
    }
}

#[derive(Clone)]
pub struct PaillierSecretKey {
    lambda: BigUint,
    mu: BigUint,
}

impl fmt::Debug for PaillierSecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PaillierSecretKey { .. }")
    }
}

impl PaillierSecretKey {
    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    pub fn decrypt(&self, pk: &PaillierPublicKey, c: &Ciphertext) -> Result<BigUint> {
        if c.0.is_zero() || c.0 >= pk.n_squared {
            return Err(Error::Decryption("ciphertext outside (0, N²)".into()));
        }
        let u = c.0.modpow(&self.lambda, &pk.n_squared);
        if u.is_zero() {
            return Err(Error::Decryption("c^λ is zero mod N²".into()));
        }
        let u_minus_one = u - 1u32;
        let (l, rem) = u_minus_one.div_rem(&pk.n);
        if !rem.is_zero() {
            return Err(Error::Decryption("L(c^λ) is not an integer".into()));
        }
        count(1, 1);
        Ok((l * &self.mu) % &pk.n)
    }
}

/// Generates a key pair with two distinct `kappa1`-bit primes, so N has
/// exactly `2 * kappa1` bits.
pub fn keygen<R: RngCore + ?Sized>(
    kappa1: u32,
    security: KeySecurity,
    rng: &mut R,
) -> Result<(PaillierPublicKey, PaillierSecretKey)> {
    let floor = match security {
        KeySecurity::Standard => MIN_SECURE_KAPPA1,
        KeySecurity::InsecureTest => MIN_TEST_KAPPA1,
    };
    if kappa1 < floor {
        return Err(Error::KeyGeneration(format!(
            "kappa1 = {kappa1} below the minimum of {floor} for {security:?} keys"
        )));
    }
    for _ in 0..16 {
        let p = random_prime(kappa1, rng)?;
        let q = loop {
            let q = random_prime(kappa1, rng)?;
            if q != p {
                break q;
            }
        };
        let n = &p * &q;
        let lambda = (&p - 1u32).lcm(&(&q - 1u32));
        let Some(mu) = lambda.modinv(&n) else {
            continue;
        };
        let pk = PaillierPublicKey::from_modulus(n)?;
        return Ok((pk, PaillierSecretKey { lambda, mu }));
    }
    Err(Error::KeyGeneration("λ not invertible mod N after retries".into()))
}

/// Uniform integer in `[0, bound)` by rejection sampling.
pub fn random_below<R: RngCore + ?Sized>(bound: &BigUint, rng: &mut R) -> BigUint {
    assert!(!bound.is_zero());
    let bits = bound.bits();
    let nbytes = bits.div_ceil(8) as usize;
    let excess = nbytes as u64 * 8 - bits;
    let mut buf = vec![0u8; nbytes];
    loop {
        rng.fill_bytes(&mut buf);
        buf[0] &= 0xffu8 >> excess;
        let v = BigUint::from_bytes_be(&buf);
        if &v < bound {
            return v;
        }
    }
}

fn small_primes() -> &'static [u32] {
    static PRIMES: OnceLock<Vec<u32>> = OnceLock::new();
    PRIMES.get_or_init(|| {
        let limit = 2000usize;
        let mut sieve = vec![true; limit];
        sieve[0] = false;
        sieve[1] = false;
        for i in 2..limit {
            if sieve[i] {
                let mut j = i * i;
                while j < limit {
                    sieve[j] = false;
                    j += i;
                }
            }
        }
        (0..limit as u32).filter(|&i| sieve[i as usize]).collect()
    })
}

/// Miller-Rabin with `rounds` random bases, after trial division.
pub fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    if n < &BigUint::from(2u32) {
        return false;
    }
    for &p in small_primes() {
        let p = BigUint::from(p);
        if n == &p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    let one = BigUint::one();
    let n_minus_one = n - &one;
    let s = n_minus_one.trailing_zeros().unwrap_or(0);
    let d = &n_minus_one >> s;
    let span = n - 3u32;
    'witness: for _ in 0..rounds {
        let a = random_below(&span, rng) + 2u32;
        let mut x = a.modpow(&d, n);
        if x == one || x == n_minus_one {
            continue;
        }
        for _ in 1..s {
            x = (&x * &x) % n;
            if x == n_minus_one {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Random probable prime of exactly `bits` bits with the two top bits set.
pub fn random_prime<R: RngCore + ?Sized>(bits: u32, rng: &mut R) -> Result<BigUint> {
    if bits < 8 {
        return Err(Error::KeyGeneration(format!("prime size {bits} too small")));
    }
    let nbytes = bits.div_ceil(8) as usize;
    let excess = nbytes as u32 * 8 - bits;
    let mut buf = vec![0u8; nbytes];
    for _ in 0..bits * MAX_PRIME_ATTEMPTS_PER_BIT {
        rng.fill_bytes(&mut buf);
        buf[0] &= 0xffu8 >> excess;
        let mut cand = BigUint::from_bytes_be(&buf);
        cand.set_bit(bits as u64 - 1, true);
        cand.set_bit(bits as u64 - 2, true);
        cand.set_bit(0, true);
        if is_probable_prime(&cand, MILLER_RABIN_ROUNDS, rng) {
            return Ok(cand);
        }
    }
    Err(Error::KeyGeneration(format!("no {bits}-bit prime found")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn keys(seed: u64) -> (PaillierPublicKey, PaillierSecretKey, ChaCha20Rng) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (pk, sk) = keygen(16, KeySecurity::InsecureTest, &mut rng).unwrap();
        (pk, sk, rng)
    }

    fn b(v: u64) -> BigUint {
        BigUint::from(v)
    }

    #[test]
    fn modulus_has_twice_the_prime_bits() {
        for kappa in [16, 24, 40] {
            let mut rng = ChaCha20Rng::seed_from_u64(kappa as u64);
            let (pk, _) = keygen(kappa, KeySecurity::InsecureTest, &mut rng).unwrap();
            assert_eq!(pk.bits(), 2 * kappa as u64);
            assert_eq!(pk.generator(), pk.modulus() + 1u32);
        }
    }

    #[test]
    fn small_keys_need_the_test_flag() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert!(keygen(64, KeySecurity::Standard, &mut rng).is_err());
        assert!(keygen(8, KeySecurity::InsecureTest, &mut rng).is_err());
    }

    #[test]
    fn distinct_keys_from_distinct_randomness() {
        let (a, _, _) = keys(1);
        let (b, _, _) = keys(2);
        assert_ne!(a.modulus(), b.modulus());
    }

    #[test]
    fn boundary_plaintexts() {
        let (pk, sk, mut rng) = keys(3);
        let top = pk.modulus() - 1u32;
        for m in [b(0), b(42), top.clone()] {
            let c = pk.encrypt(&m, &mut rng).unwrap();
            assert_eq!(sk.decrypt(&pk, &c).unwrap(), m);
        }
        assert!(pk.encrypt(pk.modulus(), &mut rng).is_err());
    }

    #[test]
    fn encryption_is_randomized() {
        let (pk, sk, mut rng) = keys(4);
        let c1 = pk.encrypt(&b(5), &mut rng).unwrap();
        let c2 = pk.encrypt(&b(5), &mut rng).unwrap();
        assert_ne!(c1, c2);
        assert_eq!(sk.decrypt(&pk, &c1).unwrap(), b(5));
        assert_eq!(sk.decrypt(&pk, &c2).unwrap(), b(5));
    }

    #[test]
    fn homomorphic_examples() {
        let (pk, sk, mut rng) = keys(5);
        let e = |m: u64, rng: &mut ChaCha20Rng| pk.encrypt(&b(m), rng).unwrap();
        let sum = pk.add_ct(&[e(2, &mut rng), e(3, &mut rng)]).unwrap();
        assert_eq!(sk.decrypt(&pk, &sum).unwrap(), b(5));
        let sum3 = pk.add_ct(&[e(1, &mut rng), e(2, &mut rng), e(3, &mut rng)]).unwrap();
        assert_eq!(sk.decrypt(&pk, &sum3).unwrap(), b(6));
        let c = e(9, &mut rng);
        assert_eq!(sk.decrypt(&pk, &pk.add_ct(&[c.clone()]).unwrap()).unwrap(), b(9));
        let wrap = pk
            .add_ct(&[pk.encrypt(&(pk.modulus() - 1u32), &mut rng).unwrap(), e(1, &mut rng)])
            .unwrap();
        assert_eq!(sk.decrypt(&pk, &wrap).unwrap(), b(0));
        assert!(pk.add_ct(&[]).is_err());

        let c3 = e(3, &mut rng);
        assert_eq!(sk.decrypt(&pk, &pk.scalar_mul(&c3, &b(4)).unwrap()).unwrap(), b(12));
        let c7 = e(7, &mut rng);
        assert_eq!(sk.decrypt(&pk, &pk.scalar_mul(&c7, &b(0)).unwrap()).unwrap(), b(0));
        assert_eq!(sk.decrypt(&pk, &pk.scalar_mul(&c7, &b(1)).unwrap()).unwrap(), b(7));
        let c6 = e(6, &mut rng);
        assert_eq!(sk.decrypt(&pk, &pk.scalar_mul(&c6, &b(6)).unwrap()).unwrap(), b(36));
        assert!(pk.scalar_mul(&c6, pk.modulus()).is_err());
    }

    #[test]
    fn vector_encryption() {
        let (pk, sk, mut rng) = keys(6);
        assert!(pk.encrypt_vector(&[], &mut rng).unwrap().is_empty());
        let cs = pk.encrypt_vector(&[b(1), b(2)], &mut rng).unwrap();
        let ms: Vec<_> = cs.iter().map(|c| sk.decrypt(&pk, c).unwrap()).collect();
        assert_eq!(ms, vec![b(1), b(2)]);
        let v: Vec<_> = (0..331u64).map(b).collect();
        assert_eq!(pk.encrypt_vector(&v, &mut rng).unwrap().len(), 331);
        let err = pk
            .encrypt_vector(&[b(1), pk.modulus().clone()], &mut rng)
            .unwrap_err();
        assert!(err.to_string().contains("component 1"));
    }

    #[test]
    fn malformed_ciphertexts_fail_to_decrypt() {
        let (pk, sk, _) = keys(7);
        assert!(sk.decrypt(&pk, &Ciphertext::from_value(b(0))).is_err());
        assert!(sk
            .decrypt(&pk, &Ciphertext::from_value(pk.n_squared().clone()))
            .is_err());
        // N itself is not a unit mod N², so c^λ is not 1 mod N.
        assert!(sk
            .decrypt(&pk, &Ciphertext::from_value(pk.modulus().clone()))
            .is_err());
    }

    #[test]
    fn serialization_roundtrip() {
        let (pk, _, mut rng) = keys(8);
        let c = pk.encrypt(&b(11), &mut rng).unwrap();
        let bytes = c.to_bytes();
        let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        assert_eq!(len, bytes.len() - 4);
        assert_eq!(Ciphertext::from_bytes(&bytes).unwrap(), c);
        assert_eq!(PaillierPublicKey::from_bytes(&pk.to_bytes()).unwrap(), pk);
    }

    #[test]
    fn op_counters_track_primitives() {
        let (pk, sk, mut rng) = keys(9);
        let c = pk.encrypt(&b(1), &mut rng).unwrap();
        reset_op_counts();
        let s = pk.scalar_mul(&c, &b(3)).unwrap();
        let t = pk.add_ct(&[s.clone(), s]).unwrap();
        sk.decrypt(&pk, &t).unwrap();
        assert_eq!(
            op_counts(),
            OpCounts { exponentiations: 2, multiplications: 3 }
        );
    }

    #[test]
    fn miller_rabin_known_values() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        // 2^61 - 1 is prime, 561 and 2^61 + 1 are not.
        assert!(is_probable_prime(&((b(1) << 61) - 1u32), 40, &mut rng));
        assert!(!is_probable_prime(&b(561), 40, &mut rng));
        assert!(!is_probable_prime(&((b(1) << 61) + 1u32), 40, &mut rng));
        // Carmichael number above the trial-division table.
        assert!(!is_probable_prime(&b(41041), 40, &mut rng));
        assert!(is_probable_prime(&b(2), 40, &mut rng));
        assert!(!is_probable_prime(&b(1), 40, &mut rng));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::sync::OnceLock;

    fn key() -> &'static (PaillierPublicKey, PaillierSecretKey) {
        static KEY: OnceLock<(PaillierPublicKey, PaillierSecretKey)> = OnceLock::new();
        KEY.get_or_init(|| keygen(32, KeySecurity::InsecureTest, &mut ChaCha20Rng::seed_from_u64(9)).unwrap())
    }

    proptest! {
        #[test]
        fn homomorphisms_hold(a: u64, b: u64, s: u64, seed: u64) {
            let (pk, sk) = key();
            let n = pk.modulus();
            let (a, b, s) = (BigUint::from(a) % n, BigUint::from(b) % n, BigUint::from(s) % n);
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let ca = pk.encrypt(&a, &mut rng).unwrap();
            let cb = pk.encrypt(&b, &mut rng).unwrap();
            prop_assert_eq!(sk.decrypt(pk, &ca).unwrap(), a.clone());
            prop_assert_eq!(sk.decrypt(pk, &pk.add_ct(&[ca.clone(), cb]).unwrap()).unwrap(), (&a + &b) % n);
            prop_assert_eq!(sk.decrypt(pk, &pk.scalar_mul(&ca, &s).unwrap()).unwrap(), (&a * &s) % n);
        }

        #[test]
        fn ciphertext_bytes_roundtrip(a: u64, seed: u64) {
            let (pk, _) = key();
            let c = pk.encrypt(&(BigUint::from(a) % pk.modulus()), &mut ChaCha20Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(Ciphertext::from_bytes(&c.to_bytes()).unwrap(), c);
        }
    }
}
