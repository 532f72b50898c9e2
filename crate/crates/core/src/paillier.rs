//! Paillier additively homomorphic encryption.
//!
//! The scheme works modulo `n = p*q` for two large primes, with plaintexts in
//! `[0, n)` and ciphertexts in `(Z/n²)*`. We fix the generator `g = n + 1`,
//! which turns the usual `g^m` exponentiation into a single multiplication
//! because `(n+1)^m ≡ 1 + m·n (mod n²)`.
//!
//! Supported homomorphic operations, all on the public key only:
//!
//! * [`PublicKey::add_cipher`]: `E(a)·E(b) → E(a+b mod n)`
//! * [`PublicKey::add_plain`]: `E(a)·g^b → E(a+b mod n)` for a plaintext `b`
//! * [`PublicKey::scalar_mul`]: `E(a)^k → E(k·a mod n)`
//!
//! Ciphertexts carry a fingerprint of the key they were produced under, and
//! every operation checks it; mixing ciphertexts from different keys is an
//! error rather than silent garbage.

use std::fmt;
use std::sync::OnceLock;

use num_bigint::{BigInt, BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hexint;

/// Minimum key size accepted by [`Keypair::generate`]. Keys this small are
/// only useful for tests; anything below is almost certainly a caller bug.
pub const MIN_KEY_BITS: u64 = 16;

/// Miller-Rabin rounds per primality check (error probability ≤ 4^-40).
const MILLER_RABIN_ROUNDS: u32 = 40;

/// Multiplier for the prime-search retry budget: a key generation may test at
/// most `10 * bits` candidates before giving up.
const PRIME_SEARCH_BUDGET_PER_BIT: u64 = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PaillierError {
    #[error("prime search exhausted after {0} candidates")]
    PrimeSearchExhausted(u64),
    #[error("key size {0} too small (minimum {MIN_KEY_BITS} bits)")]
    KeyTooSmall(u64),
    #[error("invalid key material: {0}")]
    InvalidKey(String),
    #[error("plaintext out of range [0, n)")]
    PlaintextOutOfRange,
    #[error("scalar out of range [0, n)")]
    ScalarOutOfRange,
    #[error("invalid ciphertext: {0}")]
    InvalidCiphertext(String),
    #[error("ciphertext was produced under a different key")]
    KeyMismatch,
    #[error("malformed key file: {0}")]
    KeyFile(String),
}

/// SHA-256 digest of a public key's modulus, used to tag ciphertexts so that
/// values from different keys cannot be combined by accident.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeyFingerprint([u8; 32]);

impl KeyFingerprint {
    fn of_modulus(n: &BigUint) -> Self {
        let mut h = Sha256::new();
        h.update(hexint::to_hex(n).as_bytes());
        KeyFingerprint(h.finalize().into())
    }

    /// Full 64-character hex form.
    pub fn to_hex(self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// First 16 hex characters, enough for log lines.
    pub fn short(self) -> String {
        self.to_hex()[..16].to_string()
    }
}

impl fmt::Debug for KeyFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyFingerprint({})", self.short())
    }
}

impl fmt::Display for KeyFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Public half of a Paillier keypair. Sufficient for encryption and all
/// homomorphic operations; holders of only this key cannot decrypt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    g: BigUint,
    n_squared: BigUint,
    fingerprint: KeyFingerprint,
}

/// Secret half of a Paillier keypair.
///
/// `lambda = lcm(p-1, q-1)` and `mu = L(g^lambda mod n²)^{-1} mod n` with
/// `L(u) = (u-1)/n` are precomputed at construction.
#[derive(Clone, PartialEq, Eq)]
pub struct PrivateKey {
    p: BigUint,
    q: BigUint,
    lambda: BigUint,
    mu: BigUint,
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Never print prime factors or lambda/mu.
        write!(f, "PrivateKey(redacted, p={} bits)", self.p.bits())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Keypair {
    pub public: PublicKey,
    pub private: PrivateKey,
}

/// A Paillier ciphertext: a unit modulo n², tagged with the fingerprint of
/// the key that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext {
    value: BigUint,
    key_fp: KeyFingerprint,
}

impl Ciphertext {
    /// Raw ciphertext value, e.g. for serialization.
    pub fn value(&self) -> &BigUint {
        &self.value
    }

    /// Consumes the ciphertext, yielding the raw value for the wire.
    pub fn into_value(self) -> BigUint {
        self.value
    }

    pub fn key_fingerprint(&self) -> KeyFingerprint {
        self.key_fp
    }

    /// Reassembles a ciphertext received off the wire, binding it to `pk`.
    /// Range and unit checks happen here so later operations can assume them.
    pub fn from_value(pk: &PublicKey, value: BigUint) -> Result<Self, PaillierError> {
        let ct = Ciphertext { value, key_fp: pk.fingerprint };
        pk.validate_ciphertext(&ct)?;
        Ok(ct)
    }
}

impl PublicKey {
    /// Builds a public key from a bare modulus (as read from a key file).
    /// The smallest admissible modulus is 3·5 = 15, for toy keys in tests.
    pub fn from_n(n: BigUint) -> Result<Self, PaillierError> {
        if n.bits() < 4 {
            return Err(PaillierError::InvalidKey(format!(
                "modulus too small ({} bits)",
                n.bits()
            )));
        }
        if n.is_even() {
            return Err(PaillierError::InvalidKey("modulus is even".into()));
        }
        let fingerprint = KeyFingerprint::of_modulus(&n);
        let g = &n + 1u32;
        let n_squared = &n * &n;
        Ok(PublicKey { n, g, n_squared, fingerprint })
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    /// The generator `g = n + 1`.
    pub fn generator(&self) -> &BigUint {
        &self.g
    }

    pub fn fingerprint(&self) -> KeyFingerprint {
        self.fingerprint
    }

    /// Bit length of the modulus.
    pub fn bits(&self) -> u64 {
        self.n.bits()
    }

    /// Encrypts `m ∈ [0, n)` under a fresh random nonce.
    pub fn encrypt<R>(&self, m: &BigUint, rng: &mut R) -> Result<Ciphertext, PaillierError>
    where
        R: RngCore + CryptoRng + ?Sized,
    {
        let r = self.sample_nonce(rng);
        self.encrypt_with_nonce(m, &r)
    }

    /// Encrypts with a caller-chosen nonce `r ∈ (0, n)`, `gcd(r, n) = 1`.
    /// Deterministic; exists for test vectors. Use [`encrypt`] everywhere
    /// else — reusing a nonce links plaintexts.
    ///
    /// [`encrypt`]: Self::encrypt
    pub fn encrypt_with_nonce(&self, m: &BigUint, r: &BigUint) -> Result<Ciphertext, PaillierError> {
        if m >= &self.n {
            return Err(PaillierError::PlaintextOutOfRange);
        }
        if r.is_zero() || r >= &self.n || !r.gcd(&self.n).is_one() {
            return Err(PaillierError::InvalidKey("bad encryption nonce".into()));
        }
        // g^m = (n+1)^m ≡ 1 + m·n (mod n²), so one multiplication replaces
        // the exponentiation. m < n keeps 1 + m·n < n² without reduction.
        let g_to_m = 1u32 + m * &self.n;
        let r_to_n = r.modpow(&self.n, &self.n_squared);
        let value = (g_to_m * r_to_n) % &self.n_squared;
        ops::ENCRYPTIONS.fetch_add(1, ops::ORDER);
        Ok(Ciphertext { value, key_fp: self.fingerprint })
    }

    /// Homomorphic addition: `E(a) ⊕ E(b) = E(a + b mod n)`.
    pub fn add_cipher(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, PaillierError> {
        self.check_fp(a)?;
        self.check_fp(b)?;
        let value = (&a.value * &b.value) % &self.n_squared;
        ops::CIPHER_ADDS.fetch_add(1, ops::ORDER);
        Ok(Ciphertext { value, key_fp: self.fingerprint })
    }

    /// Homomorphic plaintext addition: `E(a) ⊕ b = E(a + b mod n)`.
    ///
    /// `b` may be negative; it is reduced into `[0, n)` first, so adding `-1`
    /// adds `n - 1`.
    pub fn add_plain(&self, a: &Ciphertext, b: &BigInt) -> Result<Ciphertext, PaillierError> {
        self.check_fp(a)?;
        let n = BigInt::from(self.n.clone());
        let b_mod = b.mod_floor(&n).to_biguint().expect("mod_floor is non-negative");
        // Multiply by g^b = 1 + b·n (mod n²) without an exponentiation.
        let g_to_b = (1u32 + &b_mod * &self.n) % &self.n_squared;
        let value = (&a.value * g_to_b) % &self.n_squared;
        ops::PLAIN_ADDS.fetch_add(1, ops::ORDER);
        Ok(Ciphertext { value, key_fp: self.fingerprint })
    }

    /// Homomorphic scalar multiplication: `E(a)^k = E(k·a mod n)` for
    /// `k ∈ [0, n)`.
    pub fn scalar_mul(&self, a: &Ciphertext, k: &BigUint) -> Result<Ciphertext, PaillierError> {
        self.check_fp(a)?;
        if k >= &self.n {
            return Err(PaillierError::ScalarOutOfRange);
        }
        let value = a.value.modpow(k, &self.n_squared);
        ops::SCALAR_MULS.fetch_add(1, ops::ORDER);
        Ok(Ciphertext { value, key_fp: self.fingerprint })
    }

    /// Checks that `c` is a plausible ciphertext under this key: fingerprint
    /// match, value in `(0, n²)`, and invertible modulo n².
    pub fn validate_ciphertext(&self, c: &Ciphertext) -> Result<(), PaillierError> {
        self.check_fp(c)?;
        if c.value.is_zero() || c.value >= self.n_squared {
            return Err(PaillierError::InvalidCiphertext(
                "value outside (0, n²)".into(),
            ));
        }
        if !c.value.gcd(&self.n).is_one() {
            return Err(PaillierError::InvalidCiphertext(
                "value shares a factor with n".into(),
            ));
        }
        Ok(())
    }

    fn check_fp(&self, c: &Ciphertext) -> Result<(), PaillierError> {
        if c.key_fp != self.fingerprint {
            return Err(PaillierError::KeyMismatch);
        }
        Ok(())
    }

    fn sample_nonce<R>(&self, rng: &mut R) -> BigUint
    where
        R: RngCore + ?Sized,
    {
        loop {
            let r = rng.gen_biguint_range(&BigUint::one(), &self.n);
            // For real key sizes a shared factor is vanishingly unlikely,
            // but toy keys in tests do hit this.
            if r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }

    /// Serializes to the public key-file form.
    pub fn to_json(&self) -> String {
        let file = KeyFile::Public { n: self.n.clone() };
        serde_json::to_string_pretty(&file).expect("key file serialization cannot fail")
    }

    /// Parses a public key file. Rejects private key files: callers that
    /// only need a public key should never be handed the secret half.
    pub fn from_json(s: &str) -> Result<Self, PaillierError> {
        match KeyFile::parse(s)? {
            KeyFile::Public { n } => Self::from_n(n),
            KeyFile::Private { .. } => Err(PaillierError::KeyFile(
                "expected a public key file, found a private key".into(),
            )),
        }
    }
}

impl PrivateKey {
    /// Decrypts `c` to its plaintext in `[0, n)`.
    pub fn decrypt(&self, pk: &PublicKey, c: &Ciphertext) -> Result<BigUint, PaillierError> {
        pk.validate_ciphertext(c)?;
        let u = c.value.modpow(&self.lambda, &pk.n_squared);
        let l = l_function(&u, &pk.n)?;
        let m = (l * &self.mu) % &pk.n;
        ops::DECRYPTIONS.fetch_add(1, ops::ORDER);
        Ok(m)
    }
}

impl Keypair {
    /// Generates a fresh keypair with a modulus of `bits` (within one bit).
    ///
    /// Primality testing uses trial division by small primes followed by
    /// 40 Miller-Rabin rounds. The search gives up after `10 * bits`
    /// candidates, which in practice means the RNG is broken.
    pub fn generate<R>(bits: u64, rng: &mut R) -> Result<Keypair, PaillierError>
    where
        R: RngCore + CryptoRng + ?Sized,
    {
        if bits < MIN_KEY_BITS {
            return Err(PaillierError::KeyTooSmall(bits));
        }
        let budget = PRIME_SEARCH_BUDGET_PER_BIT * bits;
        let mut attempts_left = budget;
        let p_bits = bits - bits / 2;
        let q_bits = bits / 2;
        let p = gen_prime(p_bits, rng, &mut attempts_left, budget)?;
        loop {
            let q = gen_prime(q_bits, rng, &mut attempts_left, budget)?;
            if q == p {
                continue;
            }
            let n = &p * &q;
            let phi = (&p - 1u32) * (&q - 1u32);
            if !n.gcd(&phi).is_one() {
                continue;
            }
            return Self::from_primes(p, q);
        }
    }

    /// Assembles a keypair from caller-supplied primes, validating that they
    /// are distinct, actually prime, and yield `gcd(n, φ(n)) = 1`.
    pub fn from_primes(p: BigUint, q: BigUint) -> Result<Keypair, PaillierError> {
        if p == q {
            return Err(PaillierError::InvalidKey("p and q must differ".into()));
        }
        for (name, v) in [("p", &p), ("q", &q)] {
            if !is_prime(v, &mut FixedBaseRng) {
                return Err(PaillierError::InvalidKey(format!("{name} is not prime")));
            }
        }
        let n = &p * &q;
        let phi = (&p - 1u32) * (&q - 1u32);
        if !n.gcd(&phi).is_one() {
            return Err(PaillierError::InvalidKey(
                "gcd(n, φ(n)) must be 1".into(),
            ));
        }
        let public = PublicKey::from_n(n.clone())?;
        let lambda = (&p - 1u32).lcm(&(&q - 1u32));
        let u = public.g.modpow(&lambda, &public.n_squared);
        let l = l_function(&u, &n)?;
        let mu = l
            .modinv(&n)
            .ok_or_else(|| PaillierError::InvalidKey("lambda has no inverse mod n".into()))?;
        Ok(Keypair {
            public,
            private: PrivateKey { p, q, lambda, mu },
        })
    }

    /// Convenience decrypt against this pair's own public key.
    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint, PaillierError> {
        self.private.decrypt(&self.public, c)
    }

    /// Serializes to the private key-file form. Only `p` and `q` are stored;
    /// derived values are recomputed (and thus revalidated) on load.
    pub fn to_json(&self) -> String {
        let file = KeyFile::Private {
            n: self.public.n.clone(),
            p: self.private.p.clone(),
            q: self.private.q.clone(),
        };
        serde_json::to_string_pretty(&file).expect("key file serialization cannot fail")
    }

    /// Parses a private key file.
    pub fn from_json(s: &str) -> Result<Self, PaillierError> {
        match KeyFile::parse(s)? {
            KeyFile::Private { n, p, q } => {
                let pair = Self::from_primes(p, q)?;
                if pair.public.n != n {
                    return Err(PaillierError::KeyFile("n does not equal p*q".into()));
                }
                Ok(pair)
            }
            KeyFile::Public { .. } => Err(PaillierError::KeyFile(
                "expected a private key file, found a public key".into(),
            )),
        }
    }
}

/// `L(u) = (u - 1) / n`, defined only when the division is exact.
fn l_function(u: &BigUint, n: &BigUint) -> Result<BigUint, PaillierError> {
    let (quot, rem) = (u - 1u32).div_rem(n);
    if !rem.is_zero() {
        return Err(PaillierError::InvalidCiphertext(
            "value is not in the decryptable subgroup".into(),
        ));
    }
    Ok(quot)
}

/// On-disk key formats. The `kind` tag lets loaders fail loudly when handed
/// the wrong half of a keypair.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind")]
enum KeyFile {
    #[serde(rename = "paillier-public")]
    Public {
        #[serde(with = "hexint::serde_hex")]
        n: BigUint,
    },
    #[serde(rename = "paillier-private")]
    Private {
        #[serde(with = "hexint::serde_hex")]
        n: BigUint,
        #[serde(with = "hexint::serde_hex")]
        p: BigUint,
        #[serde(with = "hexint::serde_hex")]
        q: BigUint,
    },
}

impl KeyFile {
    fn parse(s: &str) -> Result<Self, PaillierError> {
        serde_json::from_str(s).map_err(|e| PaillierError::KeyFile(e.to_string()))
    }
}

// --- prime generation -------------------------------------------------------

fn small_primes() -> &'static [u32] {
    static PRIMES: OnceLock<Vec<u32>> = OnceLock::new();
    PRIMES.get_or_init(|| {
        let limit = 1024usize;
        let mut sieve = vec![true; limit];
        let mut primes = Vec::new();
        for i in 2..limit {
            if sieve[i] {
                primes.push(i as u32);
                for j in (i * i..limit).step_by(i) {
                    sieve[j] = false;
                }
            }
        }
        primes
    })
}

fn gen_prime<R>(
    bits: u64,
    rng: &mut R,
    attempts_left: &mut u64,
    budget: u64,
) -> Result<BigUint, PaillierError>
where
    R: RngCore + ?Sized,
{
    debug_assert!(bits >= 2);
    loop {
        if *attempts_left == 0 {
            return Err(PaillierError::PrimeSearchExhausted(budget));
        }
        *attempts_left -= 1;
        let mut candidate = rng.gen_biguint(bits);
        candidate.set_bit(bits - 1, true); // exact bit length
        candidate.set_bit(0, true); // odd
        if is_prime(&candidate, rng) {
            return Ok(candidate);
        }
    }
}

/// Trial division by all primes below 1024, then Miller-Rabin.
fn is_prime<R>(n: &BigUint, rng: &mut R) -> bool
where
    R: RngCore + ?Sized,
{
    for &p in small_primes() {
        let p_big = BigUint::from(p);
        if n == &p_big {
            return true;
        }
        if (n % p_big).is_zero() {
            return false;
        }
    }
    if n < &BigUint::from(1024u32 * 1024) {
        // Below (max small prime)² and not divisible by any of them.
        return true;
    }
    miller_rabin(n, MILLER_RABIN_ROUNDS, rng)
}

/// Miller-Rabin with uniformly random bases. `n` must be odd and > 3.
fn miller_rabin<R>(n: &BigUint, rounds: u32, rng: &mut R) -> bool
where
    R: RngCore + ?Sized,
{
    let one = BigUint::one();
    let two = BigUint::from(2u32);
    let n_minus_1 = n - &one;
    // n - 1 = 2^s * d with d odd
    let s = n_minus_1.trailing_zeros().expect("n is odd, so n-1 > 0");
    let d = &n_minus_1 >> s;
    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &n_minus_1);
        let mut x = a.modpow(&d, n);
        if x == one || x == n_minus_1 {
            continue;
        }
        for _ in 0..s.saturating_sub(1) {
            x = (&x * &x) % n;
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Deterministic base source for [`Keypair::from_primes`], which has no RNG
/// parameter. Yields a fixed cycle of bytes; with 40 rounds over distinct
/// derived bases this is ample for validating caller-supplied primes.
struct FixedBaseRng;

impl RngCore for FixedBaseRng {
    fn next_u32(&mut self) -> u32 {
        0xa5a5_a5a5
    }
    fn next_u64(&mut self) -> u64 {
        0xa5a5_a5a5_5a5a_5a5au64
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        // A keyed counter stream, so consecutive draws differ.
        use std::sync::atomic::{AtomicU64, Ordering};
        static CTR: AtomicU64 = AtomicU64::new(0);
        let mut h = Sha256::new();
        h.update(CTR.fetch_add(1, Ordering::Relaxed).to_le_bytes());
        h.update(b"fixed-base-rng");
        let block: [u8; 32] = h.finalize().into();
        for (chunk, b) in dest.chunks_mut(32).zip(std::iter::repeat(block)) {
            let len = chunk.len();
            chunk.copy_from_slice(&b[..len]);
        }
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.fill_bytes(dest);
        Ok(())
    }
}

/// Global counters for cryptographic operations.
///
/// Tests and the benchmark harness use these to assert how work splits
/// between client and worker (e.g. the worker performs all scalar
/// multiplications, the client all decryptions). Counters are process-wide;
/// callers that assert on deltas should not run concurrently with other
/// crypto work.
pub mod ops {
    use std::sync::atomic::{AtomicU64, Ordering};

    pub(super) const ORDER: Ordering = Ordering::Relaxed;

    pub(super) static ENCRYPTIONS: AtomicU64 = AtomicU64::new(0);
    pub(super) static DECRYPTIONS: AtomicU64 = AtomicU64::new(0);
    pub(super) static CIPHER_ADDS: AtomicU64 = AtomicU64::new(0);
    pub(super) static PLAIN_ADDS: AtomicU64 = AtomicU64::new(0);
    pub(super) static SCALAR_MULS: AtomicU64 = AtomicU64::new(0);

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
    pub struct Snapshot {
        pub encryptions: u64,
        pub decryptions: u64,
        pub cipher_adds: u64,
        pub plain_adds: u64,
        pub scalar_muls: u64,
    }

    pub fn snapshot() -> Snapshot {
        Snapshot {
            encryptions: ENCRYPTIONS.load(ORDER),
            decryptions: DECRYPTIONS.load(ORDER),
            cipher_adds: CIPHER_ADDS.load(ORDER),
            plain_adds: PLAIN_ADDS.load(ORDER),
            scalar_muls: SCALAR_MULS.load(ORDER),
        }
    }

    impl Snapshot {
        /// Counter increments between `earlier` and `self`.
        pub fn since(&self, earlier: &Snapshot) -> Snapshot {
            Snapshot {
                encryptions: self.encryptions - earlier.encryptions,
                decryptions: self.decryptions - earlier.decryptions,
                cipher_adds: self.cipher_adds - earlier.cipher_adds,
                plain_adds: self.plain_adds - earlier.plain_adds,
                scalar_muls: self.scalar_muls - earlier.scalar_muls,
            }
        }
    }
}
