//! Reconciliation, leakage accounting and privacy amplification.

pub mod cascade;
pub mod hash;
pub mod toeplitz;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cascade::{cascade_reconcile, reconcile_in_process, CascadeParams, Role};
pub use hash::key_hash;
pub use toeplitz::{toeplitz_hash, ToeplitzSeed};

pub const DEFAULT_MARGIN_BITS: u64 = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReconciliationResult {
    pub corrected_key: Vec<u8>,
    /// Parity bits this side saw disclosed on the channel.
    pub leak_bits: u64,
    pub passes: u32,
    pub verified: bool,
    /// Bits flipped locally (always 0 on the reference side).
    pub corrections: u64,
}

pub fn binary_entropy(q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::input(format!("binary entropy argument {q} outside [0, 1]")));
    }
    if q == 0.0 || q == 1.0 {
        return Ok(0.0);
    }
    Ok(-q * q.log2() - (1.0 - q) * (1.0 - q).log2())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateFormula {
    /// `n(1 − h2(Q)) − leak − margin`
    #[default]
    LeakActual,
    /// `n(1 − 2h2(Q)) − margin`; the EC cost is taken as the Shannon limit.
    AsymptoticTwoBasis,
}

impl RateFormula {
    pub fn as_str(self) -> &'static str {
        match self {
            RateFormula::LeakActual => "leak_actual",
            RateFormula::AsymptoticTwoBasis => "asymptotic_two_basis",
        }
    }
}

impl fmt::Display for RateFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RateFormula {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leak_actual" => Ok(RateFormula::LeakActual),
            "asymptotic_two_basis" => Ok(RateFormula::AsymptoticTwoBasis),
            other => Err(Error::input(format!("unknown rate formula {other:?}"))),
        }
    }
}

/// Secure key length after privacy amplification, clamped at zero.
pub fn final_key_length(
    n: u64,
    q_est: f64,
    leak_bits: u64,
    margin_bits: u64,
    formula: RateFormula,
) -> Result<u64> {
    let h = binary_entropy(q_est)?;
    let (retained, leak) = match formula {
        RateFormula::LeakActual => ((n as f64 * (1.0 - h)).floor(), leak_bits),
        RateFormula::AsymptoticTwoBasis => ((n as f64 * (1.0 - 2.0 * h)).floor(), 0),
    };
    let retained = if retained > 0.0 { retained as u64 } else { 0 };
    Ok(retained.saturating_sub(leak).saturating_sub(margin_bits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent evaluation through natural logarithms.
    fn h2_oracle(q: f64) -> f64 {
        (-(q * q.ln()) - (1.0 - q) * (1.0 - q).ln()) / std::f64::consts::LN_2
    }

    #[test]
    fn entropy_values() {
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        let h = binary_entropy(0.0644).unwrap();
        assert!((h - h2_oracle(0.0644)).abs() < 1e-12);
        assert!((h - 0.34467).abs() < 1e-4, "{h}");
        assert!(binary_entropy(-0.1).is_err());
        assert!(binary_entropy(1.5).is_err());
    }

    #[test]
    fn key_length_examples() {
        assert_eq!(final_key_length(1000, 0.0, 0, 0, RateFormula::LeakActual).unwrap(), 1000);
        let n = 1_000_000u64;
        let expected = (n as f64 * (1.0 - h2_oracle(0.0644))).floor() as u64 - 430_000 - 128;
        let got = final_key_length(n, 0.0644, 430_000, 128, RateFormula::LeakActual).unwrap();
        assert_eq!(got, expected);
        assert_eq!(got, 225_202);
        assert_eq!(final_key_length(100, 0.3, 90, 128, RateFormula::LeakActual).unwrap(), 0);
        assert_eq!(
            final_key_length(1000, 0.0, 999, 0, RateFormula::AsymptoticTwoBasis).unwrap(),
            1000
        );
    }

    proptest! {
        #[test]
        fn key_length_monotone(n in 1u64..2_000_000, q1 in 0.0f64..0.5, q2 in 0.0f64..0.5, l1 in 0u64..1_000_000, l2 in 0u64..1_000_000) {
            let (qa, qb) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            let (la, lb) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
            for f in [RateFormula::LeakActual, RateFormula::AsymptoticTwoBasis] {
                let base = final_key_length(n, qa, la, 128, f).unwrap();
                prop_assert!(final_key_length(n, qb, la, 128, f).unwrap() <= base);
                prop_assert!(final_key_length(n, qa, lb, 128, f).unwrap() <= base);
                prop_assert!(base <= n);
            }
        }
    }
}
