//! Windowed coincidence matching and the sifted-rate / QBER statistics.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sourcesim::{Channel, DetectionRecord, Timetag};

/// ±1 ns.
pub const DEFAULT_WINDOW_PS: u64 = 1000;

pub trait Timestamped {
    fn timestamp_ps(&self) -> u64;
}

impl Timestamped for u64 {
    fn timestamp_ps(&self) -> u64 {
        *self
    }
}

impl Timestamped for Timetag {
    fn timestamp_ps(&self) -> u64 {
        self.timestamp_ps
    }
}

impl Timestamped for DetectionRecord {
    fn timestamp_ps(&self) -> u64 {
        self.timestamp_ps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CoincidencePair {
    pub alice: usize,
    pub bob: usize,
    /// Bob's timestamp minus Alice's.
    pub delta_ps: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoincidenceSet {
    pub pairs: Vec<CoincidencePair>,
    pub window_ps: u64,
}

impl CoincidenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn check_sorted<T: Timestamped>(stream: &[T], who: &str) -> Result<()> {
    if stream
        .windows(2)
        .any(|w| w[1].timestamp_ps() < w[0].timestamp_ps())
    {
        return Err(Error::input(format!("{who} stream is not sorted by timestamp")));
    }
    Ok(())
}

/// Greedy first-come matching: in time order, each Alice record takes the
/// earliest unmatched Bob record with `|t_b − t_a| ≤ window_ps`.
///
/// Bob records that fall behind the current Alice window can never match a
/// later Alice record, so a single forward cursor suffices.
pub fn match_coincidences<A: Timestamped, B: Timestamped>(
    alice: &[A],
    bob: &[B],
    window_ps: u64,
) -> Result<CoincidenceSet> {
    if window_ps == 0 {
        return Err(Error::input("coincidence window must be > 0"));
    }
    check_sorted(alice, "Alice")?;
    check_sorted(bob, "Bob")?;

    let mut pairs = Vec::with_capacity(alice.len().min(bob.len()));
    let mut j = 0usize;
    for (i, a) in alice.iter().enumerate() {
        let ta = a.timestamp_ps();
        let lo = ta.saturating_sub(window_ps);
        while j < bob.len() && bob[j].timestamp_ps() < lo {
            j += 1;
        }
        if j == bob.len() {
            break;
        }
        let tb = bob[j].timestamp_ps();
        if tb <= ta.saturating_add(window_ps) {
            pairs.push(CoincidencePair {
                alice: i,
                bob: j,
                delta_ps: tb as i64 - ta as i64,
            });
            j += 1;
        }
    }
    Ok(CoincidenceSet { pairs, window_ps })
}

/// Coincidence counts indexed `[alice channel][bob channel]` in H, V, D, A
/// order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoincidenceMatrix {
    pub counts: [[u64; 4]; 4],
}

impl CoincidenceMatrix {
    pub fn get(&self, alice: Channel, bob: Channel) -> u64 {
        self.counts[alice.index()][bob.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// `cc_HH + cc_VV + cc_DD + cc_AA`.
    pub fn correct(&self) -> u64 {
        use Channel::*;
        self.get(H, H) + self.get(V, V) + self.get(D, D) + self.get(A, A)
    }

    /// `cc_HV + cc_VH + cc_DA + cc_AD`.
    pub fn errors(&self) -> u64 {
        use Channel::*;
        self.get(H, V) + self.get(V, H) + self.get(D, A) + self.get(A, D)
    }

    /// All same-basis coincidences: correct plus erroneous.
    pub fn sifted(&self) -> u64 {
        self.correct() + self.errors()
    }

    /// Z-basis and X-basis same-basis coincidence totals.
    pub fn basis_counts(&self) -> (u64, u64) {
        use Channel::*;
        let z = self.get(H, H) + self.get(V, V) + self.get(H, V) + self.get(V, H);
        let x = self.get(D, D) + self.get(A, A) + self.get(D, A) + self.get(A, D);
        (z, x)
    }

    /// `(cc_HH + cc_VV, cc_DD + cc_AA)`.
    pub fn correct_basis_counts(&self) -> (u64, u64) {
        use Channel::*;
        (
            self.get(H, H) + self.get(V, V),
            self.get(D, D) + self.get(A, A),
        )
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, ",H,V,D,A")?;
        for a in Channel::ALL {
            let row = &self.counts[a.index()];
            writeln!(w, "{},{},{},{},{}", a.label(), row[0], row[1], row[2], row[3])?;
        }
        Ok(())
    }
}

/// Anything that reports a detector channel.
pub trait Channeled {
    fn channel(&self) -> Channel;
}

impl Channeled for Timetag {
    fn channel(&self) -> Channel {
        self.channel
    }
}

impl Channeled for DetectionRecord {
    fn channel(&self) -> Channel {
        self.channel
    }
}

pub fn coincidence_matrix<A: Channeled, B: Channeled>(
    set: &CoincidenceSet,
    alice: &[A],
    bob: &[B],
) -> Result<CoincidenceMatrix> {
    let mut m = CoincidenceMatrix::default();
    for p in &set.pairs {
        let a = alice
            .get(p.alice)
            .ok_or_else(|| Error::input(format!("Alice index {} out of range", p.alice)))?;
        let b = bob
            .get(p.bob)
            .ok_or_else(|| Error::input(format!("Bob index {} out of range", p.bob)))?;
        m.counts[a.channel().index()][b.channel().index()] += 1;
    }
    Ok(m)
}

/// Same-basis coincidences per second.
pub fn sifted_rate(m: &CoincidenceMatrix, duration_s: f64) -> Result<f64> {
    if !(duration_s > 0.0) {
        return Err(Error::input("duration must be > 0"));
    }
    Ok(m.sifted() as f64 / duration_s)
}

/// Erroneous over all same-basis coincidences.
pub fn qber(m: &CoincidenceMatrix) -> Result<f64> {
    let sifted = m.sifted();
    if sifted == 0 {
        return Err(Error::Degenerate("no same-basis coincidences".into()));
    }
    Ok(m.errors() as f64 / sifted as f64)
}
