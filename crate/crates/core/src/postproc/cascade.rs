//! Cascade information reconciliation.
//!
//! Alice holds the reference key and only answers parity queries; Bob drives
//! the protocol and corrects his copy. Each pass shuffles the key with a
//! permutation both sides derive from `(session_id, pass)`, splits it into
//! blocks (size `⌈0.73/Q⌉`, doubling per pass) and bisects every block whose
//! parities disagree. A bit corrected in a later pass changes the parity of
//! one block in every earlier pass; those blocks are re-opened, which is the
//! cascade. All bisections that are ready at the same time share a single
//! request/reply round trip.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::postproc::hash::key_hash;
use crate::postproc::ReconciliationResult;
use crate::protocol::message::{BitArray, MessageBody};
use crate::protocol::transport::{in_process_pair, Link, Transport};
use crate::sourcesim::{derive_seed, session_rng};

pub const DEFAULT_PASSES: u32 = 4;
/// Block sizes are derived from at least this error rate, so an estimate of
/// zero still yields finite blocks.
pub const MIN_BLOCK_QBER: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CascadeParams {
    pub qber_estimate: f64,
    pub passes: u32,
    /// Keys the per-pass permutations and the verification hash.
    pub seed: u64,
}

impl CascadeParams {
    pub fn new(qber_estimate: f64, seed: u64) -> Self {
        CascadeParams {
            qber_estimate,
            passes: DEFAULT_PASSES,
            seed,
        }
    }

    pub fn first_block_size(&self, n: usize) -> usize {
        let q = self.qber_estimate.max(MIN_BLOCK_QBER);
        ((0.73 / q).ceil() as usize).clamp(1, n.max(1))
    }

    fn block_size(&self, pass: usize, n: usize) -> usize {
        let k1 = self.first_block_size(n);
        k1.checked_shl(pass as u32)
            .unwrap_or(usize::MAX)
            .min(n.max(1))
    }

    pub fn hash_seed(&self) -> u64 {
        derive_seed(self.seed, 0xEC)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Alice: answers parity queries with her key.
    Reference,
    /// Bob: asks, compares and flips.
    Corrector,
}

fn permutation(seed: u64, pass: usize, n: usize) -> Vec<u32> {
    let mut perm: Vec<u32> = (0..n as u32).collect();
    let mut rng = session_rng(derive_seed(seed, pass as u64), 0xCA5C);
    perm.shuffle(&mut rng);
    perm
}

struct PassLayout {
    perm: Vec<u32>,
    /// Inverse permutation: original index → permuted position.
    pos: Vec<u32>,
    block: usize,
}

impl PassLayout {
    fn new(params: &CascadeParams, pass: usize, n: usize) -> Self {
        let perm = permutation(params.seed, pass, n);
        let mut pos = vec![0u32; n];
        for (p, &i) in perm.iter().enumerate() {
            pos[i as usize] = p as u32;
        }
        PassLayout {
            perm,
            pos,
            block: params.block_size(pass, n),
        }
    }

    fn parity(&self, key: &[u8], lo: u32, hi: u32) -> u8 {
        self.perm[lo as usize..hi as usize]
            .iter()
            .fold(0u8, |acc, &i| acc ^ key[i as usize])
    }

    fn block_count(&self) -> usize {
        self.perm.len().div_ceil(self.block)
    }

    fn block_range(&self, b: usize) -> (u32, u32) {
        let lo = b * self.block;
        (lo as u32, (lo + self.block).min(self.perm.len()) as u32)
    }
}

/// Runs one side of Cascade over `link`.
pub fn cascade_reconcile<T: Transport>(
    link: &mut Link<T>,
    role: Role,
    key: &[u8],
    params: &CascadeParams,
) -> Result<ReconciliationResult> {
    if !(0.0..=1.0).contains(&params.qber_estimate) {
        return Err(Error::input(format!(
            "QBER estimate {} outside [0, 1]",
            params.qber_estimate
        )));
    }
    match role {
        Role::Reference => reference_side(link, key, params),
        Role::Corrector => corrector_side(link, key, params),
    }
}

fn reference_side<T: Transport>(
    link: &mut Link<T>,
    key: &[u8],
    params: &CascadeParams,
) -> Result<ReconciliationResult> {
    let n = key.len();
    let mut layouts: Vec<PassLayout> = Vec::new();
    let mut leak = 0u64;
    loop {
        match link.recv()? {
            MessageBody::EcParityRequest { ranges } => {
                let mut parities = Vec::with_capacity(ranges.len());
                for (pass, lo, hi) in ranges {
                    let pass = usize::from(pass);
                    if pass >= params.passes as usize || lo > hi || hi as usize > n {
                        return Err(Error::ProtocolViolation(format!(
                            "bad parity query ({pass}, {lo}, {hi})"
                        )));
                    }
                    while layouts.len() <= pass {
                        layouts.push(PassLayout::new(params, layouts.len(), n));
                    }
                    parities.push(layouts[pass].parity(key, lo, hi));
                }
                leak += parities.len() as u64;
                link.send(MessageBody::EcParityReply {
                    parities: BitArray(parities),
                })?;
            }
            MessageBody::EcVerify { hash_seed, hash } => {
                let ok = hash_seed == params.hash_seed() && hash == key_hash(key, hash_seed);
                link.send(MessageBody::EcVerifyResult { ok })?;
                return Ok(ReconciliationResult {
                    corrected_key: key.to_vec(),
                    leak_bits: leak,
                    passes: layouts.len() as u32,
                    verified: ok,
                    corrections: 0,
                });
            }
            other => {
                return Err(Error::ProtocolViolation(format!(
                    "unexpected {} during reconciliation",
                    other.type_name()
                )))
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Bisection {
    pass: usize,
    block: usize,
    lo: u32,
    hi: u32,
    /// Alice's parity of `[lo, hi)`.
    reference: u8,
}

struct Corrector<'a, T: Transport> {
    link: &'a mut Link<T>,
    key: Vec<u8>,
    layouts: Vec<PassLayout>,
    reference_top: Vec<Vec<u8>>,
    mismatch: Vec<Vec<bool>>,
    searching: Vec<Vec<bool>>,
    pending: Vec<(usize, usize)>,
    leak: u64,
    corrections: u64,
}

impl<T: Transport> Corrector<'_, T> {
    fn query(&mut self, ranges: Vec<(u8, u32, u32)>) -> Result<Vec<u8>> {
        let expected = ranges.len();
        self.link.send(MessageBody::EcParityRequest { ranges })?;
        match self.link.recv()? {
            MessageBody::EcParityReply { parities } if parities.len() == expected => {
                self.leak += expected as u64;
                Ok(parities.0)
            }
            MessageBody::EcParityReply { parities } => Err(Error::ProtocolViolation(format!(
                "asked for {expected} parities, got {}",
                parities.len()
            ))),
            other => Err(Error::ProtocolViolation(format!(
                "expected EC_PARITY_REPLY, got {}",
                other.type_name()
            ))),
        }
    }

    fn flip(&mut self, index: usize) {
        self.key[index] ^= 1;
        self.corrections += 1;
        for (q, layout) in self.layouts.iter().enumerate() {
            let b = layout.pos[index] as usize / layout.block;
            self.mismatch[q][b] ^= true;
            if self.mismatch[q][b] && !self.searching[q][b] {
                self.pending.push((q, b));
            }
        }
    }

}

fn corrector_side<T: Transport>(
    link: &mut Link<T>,
    key: &[u8],
    params: &CascadeParams,
) -> Result<ReconciliationResult> {
    let n = key.len();
    let mut c = Corrector {
        link,
        key: key.to_vec(),
        layouts: Vec::new(),
        reference_top: Vec::new(),
        mismatch: Vec::new(),
        searching: Vec::new(),
        pending: Vec::new(),
        leak: 0,
        corrections: 0,
    };
    if n > 0 {
        for pass in 0..params.passes as usize {
            let layout = PassLayout::new(params, pass, n);
            let blocks = layout.block_count();
            let ranges: Vec<(u8, u32, u32)> = (0..blocks)
                .map(|b| {
                    let (lo, hi) = layout.block_range(b);
                    (pass as u8, lo, hi)
                })
                .collect();
            let top = c.query(ranges)?;
            let mismatch: Vec<bool> = (0..blocks)
                .map(|b| {
                    let (lo, hi) = layout.block_range(b);
                    layout.parity(&c.key, lo, hi) != top[b]
                })
                .collect();
            c.pending.extend((0..blocks).filter(|&b| mismatch[b]).map(|b| (pass, b)));
            c.layouts.push(layout);
            c.reference_top.push(top);
            c.mismatch.push(mismatch);
            c.searching.push(vec![false; blocks]);
            bisect_all(&mut c)?;
        }
    }
    let hash_seed = params.hash_seed();
    let hash = key_hash(&c.key, hash_seed);
    c.link.send(MessageBody::EcVerify { hash_seed, hash })?;
    let verified = match c.link.recv()? {
        MessageBody::EcVerifyResult { ok } => ok,
        other => {
            return Err(Error::ProtocolViolation(format!(
                "expected EC_VERIFY_RESULT, got {}",
                other.type_name()
            )))
        }
    };
    Ok(ReconciliationResult {
        corrected_key: c.key,
        leak_bits: c.leak,
        passes: c.layouts.len() as u32,
        verified,
        corrections: c.corrections,
    })
}

/// Bisects every mismatched block of every pass so far until all block
/// parities agree with Alice's.
fn bisect_all<T: Transport>(c: &mut Corrector<'_, T>) -> Result<()> {
    let mut active: Vec<Bisection> = Vec::new();
    loop {
        // Settle: start new searches, drop stale ones, apply finished ones.
        loop {
            let mut changed = false;
            for (q, b) in std::mem::take(&mut c.pending) {
                if c.mismatch[q][b] && !c.searching[q][b] {
                    let (lo, hi) = c.layouts[q].block_range(b);
                    c.searching[q][b] = true;
                    active.push(Bisection {
                        pass: q,
                        block: b,
                        lo,
                        hi,
                        reference: c.reference_top[q][b],
                    });
                    changed = true;
                }
            }
            let mut keep = Vec::with_capacity(active.len());
            for s in std::mem::take(&mut active) {
                let layout = &c.layouts[s.pass];
                if layout.parity(&c.key, s.lo, s.hi) == s.reference {
                    c.searching[s.pass][s.block] = false;
                    if c.mismatch[s.pass][s.block] {
                        c.pending.push((s.pass, s.block));
                    }
                    changed = true;
                } else if s.hi - s.lo == 1 {
                    let index = layout.perm[s.lo as usize] as usize;
                    c.searching[s.pass][s.block] = false;
                    c.flip(index);
                    changed = true;
                } else {
                    keep.push(s);
                }
            }
            active = keep;
            if !changed {
                break;
            }
        }
        if active.is_empty() {
            return Ok(());
        }
        let ranges = active
            .iter()
            .map(|s| (s.pass as u8, s.lo, s.lo + (s.hi - s.lo) / 2))
            .collect();
        let replies = c.query(ranges)?;
        for (s, &left_ref) in active.iter_mut().zip(&replies) {
            let mid = s.lo + (s.hi - s.lo) / 2;
            let left_mine = c.layouts[s.pass].parity(&c.key, s.lo, mid);
            if left_mine != left_ref {
                s.hi = mid;
                s.reference = left_ref;
            } else {
                s.lo = mid;
                s.reference ^= left_ref;
            }
        }
    }
}

/// Runs both roles over an in-process link. Returns (Alice's, Bob's) results;
/// a failed verification is reported as an error.
pub fn reconcile_in_process(
    key_a: &[u8],
    key_b: &[u8],
    params: &CascadeParams,
) -> Result<(ReconciliationResult, ReconciliationResult)> {
    if key_a.len() != key_b.len() {
        return Err(Error::input(format!(
            "key lengths differ: {} vs {}",
            key_a.len(),
            key_b.len()
        )));
    }
    let (ta, tb) = in_process_pair(None);
    let session = params.seed;
    let (ra, rb) = std::thread::scope(|scope| {
        let alice = scope.spawn(move || {
            let mut link = Link::new(ta, session);
            cascade_reconcile(&mut link, Role::Reference, key_a, params)
        });
        let mut link = Link::new(tb, session);
        let rb = cascade_reconcile(&mut link, Role::Corrector, key_b, params);
        drop(link);
        (alice.join().expect("reference thread"), rb)
    });
    let (ra, rb) = (ra?, rb?);
    if !(ra.verified && rb.verified) {
        return Err(Error::ReconciliationFailed(
            "keys differ after the final pass".into(),
        ));
    }
    Ok((ra, rb))
}
