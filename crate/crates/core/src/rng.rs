//! Deterministic randomness: one 128-bit master seed fans out into
//! domain-separated subkeys, word-level PRFs, and small-domain pseudorandom
//! permutations. Every derived stream is a pure function of the master seed
//! and its labels, so a run is reproducible from the seed alone.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// 64-bit finalizer with full avalanche; the building block for the PRF and
/// key derivation below. Not a cryptographic primitive: the engine needs
/// reproducibility and statistical uniformity, and a deployment would swap
/// in a keyed cipher here.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` under a textual label and two numeric
/// coordinates. Distinct labels or coordinates give independent streams.
pub fn subkey(seed: u128, label: &str, a: u64, b: u64) -> u128 {
    let mut h: u64 = 0xcbf29ce484222325;
    for byte in label.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x100000001b3);
    }
    let lo = seed as u64;
    let hi = (seed >> 64) as u64;
    let x = mix64(lo ^ h ^ mix64(a ^ hi.rotate_left(32)));
    let y = mix64(hi ^ h.rotate_left(29) ^ mix64(b ^ lo.rotate_left(17)) ^ x);
    ((y as u128) << 64) | x as u128
}

/// Expands a 128-bit seed into a ChaCha stream for bulk random draws.
pub fn master_rng(seed: u128) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    let mut state = seed as u64;
    let hi = (seed >> 64) as u64;
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        state = mix64(state ^ hi.rotate_left(i as u32 * 13) ^ i as u64);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha20Rng::from_seed(key)
}

/// Keyed word-to-word PRF.
#[derive(Debug, Clone, Copy)]
pub struct Prf64 {
    k0: u64,
    k1: u64,
}

impl Prf64 {
    pub fn new(key: u128) -> Self {
        Prf64 { k0: key as u64, k1: (key >> 64) as u64 }
    }

    #[inline]
    pub fn eval(&self, x: u64) -> u64 {
        mix64(mix64(x ^ self.k0) ^ self.k1)
    }

    #[inline]
    pub fn eval2(&self, x: u64, y: u64) -> u64 {
        mix64(mix64(x ^ self.k0) ^ y.rotate_left(23) ^ self.k1)
    }
}

const PRP_ROUNDS: usize = 8;

/// Pseudorandom permutation over `0..domain`, realised as an unbalanced
/// Feistel network on the next power of two with cycle-walking back into
/// the domain. A fresh key yields an independent-looking permutation, which
/// is how shuffled placements are drawn without storing a table.
#[derive(Debug, Clone)]
pub struct SlotPrp {
    domain: u64,
    left_bits: u32,
    right_bits: u32,
    round_keys: [u64; PRP_ROUNDS],
}

impl SlotPrp {
    pub fn new(key: u128, domain: u64) -> Self {
        let bits = if domain <= 2 { 2 } else { 64 - (domain - 1).leading_zeros() };
        let right_bits = (bits / 2).max(1);
        let left_bits = bits - right_bits;
        let mut round_keys = [0u64; PRP_ROUNDS];
        let prf = Prf64::new(key);
        for (i, rk) in round_keys.iter_mut().enumerate() {
            *rk = prf.eval(0x5bd1e995 ^ i as u64);
        }
        SlotPrp { domain, left_bits, right_bits, round_keys }
    }

    #[inline]
    fn permute_padded(&self, x: u64) -> u64 {
        let lmask = (1u64 << self.left_bits) - 1;
        let rmask = (1u64 << self.right_bits) - 1;
        let mut l = (x >> self.right_bits) & lmask;
        let mut r = x & rmask;
        for (i, rk) in self.round_keys.iter().enumerate() {
            if i % 2 == 0 {
                l ^= mix64(r ^ *rk) & lmask;
            } else {
                r ^= mix64(l ^ rk.rotate_left(32)) & rmask;
            }
        }
        (l << self.right_bits) | r
    }

    /// Image of `x` under the permutation. `x` must be below the domain.
    pub fn apply(&self, x: u64) -> u64 {
        debug_assert!(x < self.domain.max(1));
        if self.domain <= 1 {
            return 0;
        }
        let mut y = self.permute_padded(x);
        while y >= self.domain {
            y = self.permute_padded(y);
        }
        y
    }
}
