//! Toeplitz-matrix hashing for privacy amplification.
//!
//! `out_i = ⊕_j key_j · seed[i − j + n − 1]`. Small inputs use the direct
//! double loop; large ones compute the same sums as an integer convolution
//! (number-theoretic transform) and reduce mod 2, splitting into sub-blocks
//! when the transform would get too long.

use rand::Rng;

use crate::error::{Error, Result};
use crate::sourcesim::session_rng;

/// Seed bits for an `output_len × input_len` Toeplitz matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToeplitzSeed {
    bits: Vec<u8>,
    input_len: usize,
    output_len: usize,
}

impl ToeplitzSeed {
    pub fn new(bits: Vec<u8>, input_len: usize, output_len: usize) -> Result<Self> {
        if output_len > input_len {
            return Err(Error::input(format!(
                "Toeplitz output length {output_len} exceeds input length {input_len}"
            )));
        }
        let expected = (input_len + output_len).saturating_sub(1);
        if bits.len() != expected {
            return Err(Error::input(format!(
                "Toeplitz seed has {} bits, needs n + ℓ − 1 = {expected}",
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::input("seed bits must be 0 or 1"));
        }
        Ok(ToeplitzSeed {
            bits,
            input_len,
            output_len,
        })
    }

    /// Expands a 64-bit seed into `n + ℓ − 1` bits.
    pub fn expand(seed: u64, input_len: usize, output_len: usize) -> Result<Self> {
        let mut rng = session_rng(seed, 0x7A);
        let len = (input_len + output_len).saturating_sub(1);
        let bits = (0..len).map(|_| rng.gen::<bool>() as u8).collect();
        Self::new(bits, input_len, output_len)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn output_len(&self) -> usize {
        self.output_len
    }
}

/// Above this many matrix entries the convolution path is used.
const DIRECT_LIMIT: usize = 1 << 22;
/// Longest transform; sub-blocks are sized so that `n + ℓ − 1` fits.
const MAX_NTT_LEN: usize = 1 << 23;

pub fn toeplitz_hash(key: &[u8], seed: &ToeplitzSeed) -> Result<Vec<u8>> {
    if key.len() != seed.input_len {
        return Err(Error::input(format!(
            "key has {} bits, seed expects {}",
            key.len(),
            seed.input_len
        )));
    }
    if key.iter().any(|&b| b > 1) {
        return Err(Error::input("key bits must be 0 or 1"));
    }
    let mut out = vec![0u8; seed.output_len];
    if seed.output_len == 0 {
        return Ok(out);
    }
    if key.len().saturating_mul(seed.output_len) <= DIRECT_LIMIT {
        toeplitz_direct(key, &seed.bits, &mut out);
    } else {
        toeplitz_blocked(key, &seed.bits, &mut out);
    }
    Ok(out)
}

/// Reference evaluation straight from the matrix definition.
pub(crate) fn toeplitz_direct(key: &[u8], seed: &[u8], out: &mut [u8]) {
    let n = key.len();
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0u8;
        for (j, &k) in key.iter().enumerate() {
            acc ^= k & seed[i + n - 1 - j];
        }
        *o ^= acc;
    }
}

/// XOR-accumulates the hash block by block. A block of rows `[i0, i0+r)`
/// against key bits `[j0, j0+m)` is itself a Toeplitz product with seed
/// window starting at `i0 + n − j0 − m`.
pub(crate) fn toeplitz_blocked(key: &[u8], seed: &[u8], out: &mut [u8]) {
    let n = key.len();
    let block = MAX_NTT_LEN / 2;
    let mut i0 = 0;
    while i0 < out.len() {
        let r = block.min(out.len() - i0);
        let mut j0 = 0;
        while j0 < n {
            let m = block.min(n - j0);
            let start = i0 + n - j0 - m;
            let window = &seed[start..start + m + r - 1];
            toeplitz_ntt(&key[j0..j0 + m], window, &mut out[i0..i0 + r]);
            j0 += m;
        }
        i0 += r;
    }
}

fn toeplitz_ntt(key: &[u8], seed: &[u8], out: &mut [u8]) {
    let n = key.len();
    let len = (n + out.len() - 1).next_power_of_two();
    debug_assert!(len <= MAX_NTT_LEN);
    // c[k] = Σ_j key_j · seed[k − j]; only k ∈ [n−1, n+ℓ−2] is read, and a
    // cyclic transform of length ≥ n + ℓ − 1 leaves those entries unaliased.
    let mut a = vec![0u32; len];
    let mut b = vec![0u32; len];
    for (x, &k) in a.iter_mut().zip(key) {
        *x = u32::from(k);
    }
    for (x, &s) in b.iter_mut().zip(seed) {
        *x = u32::from(s);
    }
    ntt::transform(&mut a, false);
    ntt::transform(&mut b, false);
    for (x, y) in a.iter_mut().zip(&b) {
        *x = ntt::mul(*x, *y);
    }
    ntt::transform(&mut a, true);
    for (i, o) in out.iter_mut().enumerate() {
        *o ^= (a[i + n - 1] & 1) as u8;
    }
}

mod ntt {
    /// 15·2²⁷ + 1; supports transforms up to 2²⁷ points.
    const MODULUS: u64 = 2_013_265_921;
    const GENERATOR: u64 = 31;

    pub fn mul(a: u32, b: u32) -> u32 {
        (u64::from(a) * u64::from(b) % MODULUS) as u32
    }

    fn pow(mut base: u64, mut exp: u64) -> u64 {
        let mut acc = 1u64;
        base %= MODULUS;
        while exp > 0 {
            if exp & 1 == 1 {
                acc = acc * base % MODULUS;
            }
            base = base * base % MODULUS;
            exp >>= 1;
        }
        acc
    }

    pub fn transform(a: &mut [u32], invert: bool) {
        let n = a.len();
        debug_assert!(n.is_power_of_two());
        let mut j = 0usize;
        for i in 1..n {
            let mut bit = n >> 1;
            while j & bit != 0 {
                j ^= bit;
                bit >>= 1;
            }
            j |= bit;
            if i < j {
                a.swap(i, j);
            }
        }
        let mut twiddles = Vec::with_capacity(n / 2);
        let mut len = 2;
        while len <= n {
            let mut w = pow(GENERATOR, (MODULUS - 1) / len as u64);
            if invert {
                w = pow(w, MODULUS - 2);
            }
            twiddles.clear();
            let mut cur = 1u64;
            for _ in 0..len / 2 {
                twiddles.push(cur as u32);
                cur = cur * w % MODULUS;
            }
            for chunk in a.chunks_exact_mut(len) {
                let (lo, hi) = chunk.split_at_mut(len / 2);
                for ((u, v), &tw) in lo.iter_mut().zip(hi.iter_mut()).zip(&twiddles) {
                    let x = u64::from(*u);
                    let y = u64::from(mul(*v, tw));
                    *u = ((x + y) % MODULUS) as u32;
                    *v = ((x + MODULUS - y) % MODULUS) as u32;
                }
            }
            len <<= 1;
        }
        if invert {
            let inv_n = pow(n as u64, MODULUS - 2) as u32;
            for x in a.iter_mut() {
                *x = mul(*x, inv_n);
            }
        }
    }
}
