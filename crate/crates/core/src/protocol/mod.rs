//! The BBM92 two-party protocol: basis sifting, sampled error estimation,
//! the security verdict, and the actor state machines that drive a session
//! over a classical channel.

pub mod message;
pub mod session;
pub mod transport;

use std::collections::HashSet;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sourcesim::{session_rng, Basis, Timetag};

pub use message::{AbortReason, BitArray, ClassicalMessage, MessageBody};
pub use session::{alice_session, bob_session, run_session, SessionOutcome, SessionParams, SessionReport, SessionResult};
pub use transport::{in_process_pair, InProcessTransport, Link, TcpTransport, Transcript, TranscriptEntry, Transport};

pub const DEFAULT_SAMPLE_FRACTION: f64 = 0.1;
pub const DEFAULT_ABORT_THRESHOLD: f64 = 0.11;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiftedKey {
    pub bits: Vec<u8>,
    pub bases: Vec<Basis>,
    pub origin_indices: Vec<u64>,
}

impl SiftedKey {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// `(Z, X)` bit counts.
    pub fn basis_balance(&self) -> (u64, u64) {
        let z = self.bases.iter().filter(|&&b| b == Basis::Z).count() as u64;
        (z, self.bases.len() as u64 - z)
    }

    /// Drops the positions in `sorted` (ascending, unique).
    pub fn remove_positions(&mut self, sorted: &[usize]) {
        let mut drop = sorted.iter().peekable();
        let mut keep = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            if drop.peek() == Some(&&i) {
                drop.next();
            } else {
                keep.push(i);
            }
        }
        self.bits = keep.iter().map(|&i| self.bits[i]).collect();
        self.bases = keep.iter().map(|&i| self.bases[i]).collect();
        self.origin_indices = keep.iter().map(|&i| self.origin_indices[i]).collect();
    }
}

/// Keeps the local detections named by `indices`, in the given (match)
/// order. Transmitted ports (H, D) become 0, reflected ports (V, A) 1.
pub fn sift(local: &[Timetag], indices: impl IntoIterator<Item = u64>) -> Result<SiftedKey> {
    let mut seen = HashSet::new();
    let mut key = SiftedKey::default();
    for idx in indices {
        if !seen.insert(idx) {
            return Err(Error::ProtocolViolation(format!("detection index {idx} matched twice")));
        }
        let tag = usize::try_from(idx)
            .ok()
            .and_then(|i| local.get(i))
            .ok_or_else(|| Error::ProtocolViolation(format!("detection index {idx} out of range")))?;
        key.bits.push(tag.channel.bit());
        key.bases.push(tag.channel.basis());
        key.origin_indices.push(idx);
    }
    Ok(key)
}

/// Sorted positions of a uniform sample of `⌈fraction · n⌉` out of `n`.
pub fn sample_positions(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::input(format!("sample fraction {fraction} outside (0, 1)")));
    }
    let k = (fraction * n as f64).ceil() as usize;
    if k > n {
        return Err(Error::input(format!("sample of {k} exceeds key length {n}")));
    }
    let mut rng = session_rng(seed, 0x5A);
    let mut picked = index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Reveals a random sample of both keys, removes it, and returns the
/// mismatch fraction on the sample with the disclosed positions.
pub fn estimate_qber_sample(
    key_a: &mut SiftedKey,
    key_b: &mut SiftedKey,
    fraction: f64,
    seed: u64,
) -> Result<(f64, Vec<usize>)> {
    if key_a.len() != key_b.len() {
        return Err(Error::input(format!(
            "key lengths differ: {} vs {}",
            key_a.len(),
            key_b.len()
        )));
    }
    let picked = sample_positions(key_a.len(), fraction, seed)?;
    if picked.is_empty() {
        return Err(Error::Degenerate("empty key, nothing to sample".into()));
    }
    let errors = picked
        .iter()
        .filter(|&&i| key_a.bits[i] != key_b.bits[i])
        .count();
    key_a.remove_positions(&picked);
    key_b.remove_positions(&picked);
    Ok((errors as f64 / picked.len() as f64, picked))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub qber: f64,
    pub s_estimate: f64,
    pub v_estimate: f64,
    pub abort: Option<AbortReason>,
}

impl Verdict {
    pub fn proceed(&self) -> bool {
        self.abort.is_none()
    }
}

pub fn security_check(q_est: f64) -> Verdict {
    security_check_with(q_est, DEFAULT_ABORT_THRESHOLD)
}

/// Aborts strictly above `threshold`, or when the implied CHSH value no
/// longer exceeds 2.
pub fn security_check_with(q_est: f64, threshold: f64) -> Verdict {
    let v = 1.0 - 2.0 * q_est;
    let s = 2.0 * std::f64::consts::SQRT_2 * v;
    let abort = if q_est.is_nan() || q_est > threshold {
        Some(AbortReason::QberThreshold)
    } else if s <= 2.0 {
        Some(AbortReason::BellBound)
    } else {
        None
    };
    Verdict {
        qber: q_est,
        s_estimate: s,
        v_estimate: v,
        abort,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sourcesim::{Channel, Party};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tags(channels: &[Channel]) -> Vec<Timetag> {
        channels
            .iter()
            .enumerate()
            .map(|(i, &channel)| Timetag {
                party: Party::Alice,
                channel,
                timestamp_ps: 1000 * i as u64,
            })
            .collect()
    }

    fn key_from(bits: Vec<u8>) -> SiftedKey {
        let n = bits.len();
        SiftedKey {
            bits,
            bases: vec![Basis::Z; n],
            origin_indices: (0..n as u64).collect(),
        }
    }

    #[test]
    fn sift_encoding() {
        use Channel::*;
        let local = tags(&[H, D, V, A]);
        let key = sift(&local, [0, 1, 2]).unwrap();
        assert_eq!(key.bits, vec![0, 0, 1]);
        assert_eq!(key.bases, vec![Basis::Z, Basis::X, Basis::Z]);
        assert_eq!(key.origin_indices, vec![0, 1, 2]);
        assert!(sift(&local, []).unwrap().is_empty());
        assert!(matches!(sift(&local, [1, 1]), Err(Error::ProtocolViolation(_))));
        assert!(matches!(sift(&local, [4]), Err(Error::ProtocolViolation(_))));
    }

    #[test]
    fn sample_extremes() {
        let mut a = key_from(vec![0, 1, 1, 0, 1, 0, 0, 1, 1, 1]);
        let mut b = a.clone();
        let (q, picked) = estimate_qber_sample(&mut a, &mut b, 0.3, 1).unwrap();
        assert_eq!(q, 0.0);
        assert_eq!(picked.len(), 3);
        assert_eq!(a.len(), 7);
        assert_eq!(a, b);

        let mut a = key_from(vec![0, 1, 1, 0, 1, 0, 0, 1]);
        let mut b = key_from(a.bits.iter().map(|x| x ^ 1).collect());
        assert_eq!(estimate_qber_sample(&mut a, &mut b, 0.5, 2).unwrap().0, 1.0);

        let mut a = key_from(vec![0; 4]);
        assert!(estimate_qber_sample(&mut a.clone(), &mut a, 1.0, 0).is_err());
        assert!(estimate_qber_sample(&mut key_from(vec![0; 4]), &mut key_from(vec![0; 3]), 0.5, 0).is_err());
    }

    #[test]
    fn sampled_estimate_is_hypergeometric() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bits: Vec<u8> = (0..n).map(|_| rng.gen::<bool>() as u8).collect();
        // Exactly 5% errors.
        let err = index::sample(&mut rng, n, n / 20).into_vec();
        let mut flipped = bits.clone();
        for i in err {
            flipped[i] ^= 1;
        }
        for seed in 0..5 {
            let (q, picked) =
                estimate_qber_sample(&mut key_from(bits.clone()), &mut key_from(flipped.clone()), 0.1, seed).unwrap();
            assert_eq!(picked.len(), 10_000);
            let k = 10_000.0;
            let sigma = (0.05 * 0.95 / k * (n as f64 - k) / (n as f64 - 1.0)).sqrt();
            assert!((q - 0.05).abs() <= 3.0 * sigma, "{q}");
            assert!(3.0 * sigma <= 0.007);
        }
    }

    #[test]
    fn verdict_examples() {
        let v = security_check(0.0);
        assert!(v.proceed());
        assert!((v.s_estimate - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        let v = security_check(0.11);
        assert!(v.proceed());
        assert!((v.s_estimate - 2.206).abs() < 1e-3);
        let v = security_check(0.15);
        assert_eq!(v.abort, Some(AbortReason::QberThreshold));
        assert!((v.s_estimate - 1.98).abs() < 1e-2);
        // With a lax threshold the Bell bound still bites.
        assert_eq!(security_check_with(0.15, 0.2).abort, Some(AbortReason::BellBound));
    }

    proptest! {
        #[test]
        fn removal_keeps_alignment(n in 1usize..300, frac in 0.01f64..0.99, seed in any::<u64>()) {
            let bits: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
            let mut a = key_from(bits.clone());
            let mut b = key_from(bits);
            let (_, picked) = estimate_qber_sample(&mut a, &mut b, frac, seed).unwrap();
            prop_assert_eq!(picked.len(), (frac * n as f64).ceil() as usize);
            prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(a.len(), n - picked.len());
            prop_assert_eq!(&a.origin_indices, &b.origin_indices);
            prop_assert_eq!(&a.bases, &b.bases);
            prop_assert!(a.origin_indices.iter().all(|i| picked.binary_search(&(*i as usize)).is_err()));
        }
    }
}
