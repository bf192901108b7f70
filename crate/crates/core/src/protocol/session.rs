//! Alice and Bob as independent actors.
//!
//! ```text
//! Alice                                   Bob
//!   SESSION_INIT ─────────────────────────▶
//!   ◀───────────────────────────── TIMETAGS        (index, t, basis)
//!   MATCH_RESULT ─────────────────────────▶        same-basis pairs
//!   QBER_SAMPLE_REQUEST ──────────────────▶
//!   ◀────────────────────── QBER_SAMPLE_REVEAL     Bob's sample bits
//!   QBER_SAMPLE_REVEAL ───────────────────▶        Alice's sample bits
//!   SECURITY_VERDICT ─────────────────────▶        [ABORT on failure]
//!   ◀──────────────────── EC_PARITY_REQUEST ┐
//!   EC_PARITY_REPLY ──────────────────────▶ ┘ repeated
//!   ◀──────────────────────────── EC_VERIFY
//!   EC_VERIFY_RESULT ─────────────────────▶        [ABORT on mismatch]
//!   PA_SEED ──────────────────────────────▶        [ABORT if ℓ = 0]
//! ```
//!
//! Every `ABORT` is the sender's last message; no key is emitted after it.

use serde::{Deserialize, Serialize};

use crate::coinc::{match_coincidences, DEFAULT_WINDOW_PS};
use crate::error::{Error, Result};
use crate::postproc::cascade::{cascade_reconcile, CascadeParams, Role, DEFAULT_PASSES};
use crate::postproc::{final_key_length, toeplitz_hash, RateFormula, ToeplitzSeed, DEFAULT_MARGIN_BITS};
use crate::protocol::message::{AbortReason, BitArray, MessageBody, SessionInit};
use crate::protocol::transport::{in_process_pair, Link, Transcript, TranscriptEntry, Transport};
use crate::protocol::{
    security_check_with, sample_positions, sift, SiftedKey, DEFAULT_ABORT_THRESHOLD, DEFAULT_SAMPLE_FRACTION,
};
use crate::sourcesim::{derive_seed, Timetag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionParams {
    pub session_id: u64,
    pub window_ps: u64,
    pub sample_fraction: f64,
    pub abort_threshold: f64,
    pub cascade_passes: u32,
    pub margin_bits: u64,
    pub rate_formula: RateFormula,
    /// Alice's private randomness: sample positions and the PA seed.
    pub seed: u64,
}

impl SessionParams {
    pub fn new(session_id: u64, seed: u64) -> Self {
        SessionParams {
            session_id,
            window_ps: DEFAULT_WINDOW_PS,
            sample_fraction: DEFAULT_SAMPLE_FRACTION,
            abort_threshold: DEFAULT_ABORT_THRESHOLD,
            cascade_passes: DEFAULT_PASSES,
            margin_bits: DEFAULT_MARGIN_BITS,
            rate_formula: RateFormula::default(),
            seed,
        }
    }

    fn init(&self) -> SessionInit {
        SessionInit {
            window_ps: self.window_ps,
            sample_fraction: self.sample_fraction,
            abort_threshold: self.abort_threshold,
            cascade_passes: self.cascade_passes,
        }
    }
}

fn validate_init(init: &SessionInit) -> Result<()> {
    if init.window_ps == 0 {
        return Err(Error::input("coincidence window must be > 0"));
    }
    if !(init.sample_fraction > 0.0 && init.sample_fraction < 1.0) {
        return Err(Error::input(format!(
            "sample fraction {} outside (0, 1)",
            init.sample_fraction
        )));
    }
    if !(0.0..=1.0).contains(&init.abort_threshold) {
        return Err(Error::input(format!(
            "abort threshold {} outside [0, 1]",
            init.abort_threshold
        )));
    }
    if init.cascade_passes == 0 || init.cascade_passes > u32::from(u8::MAX) {
        return Err(Error::input(format!(
            "cascade pass count {} outside 1..=255",
            init.cascade_passes
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session_id: u64,
    /// All matched coincidences, any basis. Only Alice sees this.
    pub raw_coincidences: Option<u64>,
    pub sifted_bits: u64,
    pub basis_balance: (u64, u64),
    pub sample_bits: u64,
    pub qber_estimate: f64,
    /// Mismatch rate over the whole sifted key; only known to an observer
    /// holding both keys.
    pub qber_full: Option<f64>,
    pub s_estimate: f64,
    pub v_estimate: f64,
    /// Bits entering reconciliation.
    pub reconciled_bits: u64,
    pub leak_ec: u64,
    pub cascade_corrections: u64,
    pub final_key_bits: u64,
    pub pa_seed: Option<u64>,
    pub aborted: Option<AbortReason>,
}

impl SessionReport {
    fn new(session_id: u64) -> Self {
        SessionReport {
            session_id,
            raw_coincidences: None,
            sifted_bits: 0,
            basis_balance: (0, 0),
            sample_bits: 0,
            qber_estimate: 0.0,
            qber_full: None,
            s_estimate: 0.0,
            v_estimate: 0.0,
            reconciled_bits: 0,
            leak_ec: 0,
            cascade_corrections: 0,
            final_key_bits: 0,
            pa_seed: None,
            aborted: None,
        }
    }

    /// Z:X ratio of the sifted key; infinite when there are no X bits.
    pub fn balance_ratio(&self) -> f64 {
        self.basis_balance.0 as f64 / self.basis_balance.1 as f64
    }
}

/// One party's view of a finished session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    /// Empty when aborted.
    pub final_key: Vec<u8>,
    /// Before sampling.
    pub sifted: SiftedKey,
    pub report: SessionReport,
}

fn unexpected(expected: &str, got: &MessageBody) -> Error {
    Error::ProtocolViolation(format!("expected {expected}, got {}", got.type_name()))
}

fn aborted(mut report: SessionReport, sifted: SiftedKey, reason: AbortReason) -> SessionOutcome {
    report.aborted = Some(reason);
    report.final_key_bits = 0;
    SessionOutcome {
        final_key: Vec::new(),
        sifted,
        report,
    }
}

fn abort<T: Transport>(
    link: &mut Link<T>,
    report: SessionReport,
    sifted: SiftedKey,
    reason: AbortReason,
) -> Result<SessionOutcome> {
    link.send(MessageBody::Abort { reason })?;
    Ok(aborted(report, sifted, reason))
}

pub fn alice_session<T: Transport>(
    link: &mut Link<T>,
    tags: &[Timetag],
    params: &SessionParams,
) -> Result<SessionOutcome> {
    let init = params.init();
    validate_init(&init)?;
    let mut report = SessionReport::new(params.session_id);
    link.send(MessageBody::SessionInit(init))?;

    let entries = match link.recv()? {
        MessageBody::Timetags { entries } => entries,
        other => return Err(unexpected("TIMETAGS", &other)),
    };
    let bob_times: Vec<u64> = entries.iter().map(|e| e.1).collect();
    let matches = match_coincidences(tags, &bob_times, params.window_ps)
        .map_err(|e| Error::ProtocolViolation(format!("Bob's timetags: {e}")))?;
    report.raw_coincidences = Some(matches.len() as u64);
    let pairs: Vec<(u64, u64)> = matches
        .pairs
        .iter()
        .filter(|p| tags[p.alice].channel.basis() == entries[p.bob].2)
        .map(|p| (p.alice as u64, entries[p.bob].0))
        .collect();
    let sifted = sift(tags, pairs.iter().map(|p| p.0))?;
    link.send(MessageBody::MatchResult { pairs })?;
    report.sifted_bits = sifted.len() as u64;
    report.basis_balance = sifted.basis_balance();

    let picked = sample_positions(sifted.len(), params.sample_fraction, derive_seed(params.seed, 1))?;
    if picked.is_empty() {
        return abort(link, report, sifted, AbortReason::InsufficientKey);
    }
    link.send(MessageBody::QberSampleRequest {
        indices: picked.iter().map(|&i| i as u64).collect(),
    })?;
    let theirs = match link.recv()? {
        MessageBody::QberSampleReveal { bits } if bits.len() == picked.len() => bits,
        MessageBody::QberSampleReveal { bits } => {
            return Err(Error::ProtocolViolation(format!(
                "asked for {} sample bits, got {}",
                picked.len(),
                bits.len()
            )))
        }
        other => return Err(unexpected("QBER_SAMPLE_REVEAL", &other)),
    };
    let mine: Vec<u8> = picked.iter().map(|&i| sifted.bits[i]).collect();
    link.send(MessageBody::QberSampleReveal {
        bits: BitArray(mine.clone()),
    })?;
    let errors = mine.iter().zip(theirs.bits()).filter(|(a, b)| a != b).count();
    let q_est = errors as f64 / picked.len() as f64;
    let verdict = security_check_with(q_est, params.abort_threshold);
    report.sample_bits = picked.len() as u64;
    report.qber_estimate = q_est;
    report.s_estimate = verdict.s_estimate;
    report.v_estimate = verdict.v_estimate;
    link.send(MessageBody::SecurityVerdict {
        qber_estimate: q_est,
        s_estimate: verdict.s_estimate,
        v_estimate: verdict.v_estimate,
        proceed: verdict.proceed(),
    })?;
    if let Some(reason) = verdict.abort {
        return abort(link, report, sifted, reason);
    }

    let mut key = sifted.clone();
    key.remove_positions(&picked);
    if key.is_empty() {
        return abort(link, report, sifted, AbortReason::InsufficientKey);
    }
    report.reconciled_bits = key.len() as u64;
    let cascade = CascadeParams {
        qber_estimate: q_est,
        passes: params.cascade_passes,
        seed: params.session_id,
    };
    let ec = cascade_reconcile(link, Role::Reference, &key.bits, &cascade)?;
    report.leak_ec = ec.leak_bits;
    if !ec.verified {
        return abort(link, report, sifted, AbortReason::ReconciliationFailed);
    }

    let n = key.len() as u64;
    let l = final_key_length(n, q_est, ec.leak_bits, params.margin_bits, params.rate_formula)?;
    if l == 0 {
        return abort(link, report, sifted, AbortReason::InsufficientKey);
    }
    let pa_seed = derive_seed(params.seed, 2);
    link.send(MessageBody::PaSeed {
        seed: pa_seed,
        output_bits: l,
    })?;
    let final_key = toeplitz_hash(&ec.corrected_key, &ToeplitzSeed::expand(pa_seed, key.len(), l as usize)?)?;
    report.final_key_bits = l;
    report.pa_seed = Some(pa_seed);
    Ok(SessionOutcome {
        final_key,
        sifted,
        report,
    })
}

pub fn bob_session<T: Transport>(link: &mut Link<T>, tags: &[Timetag]) -> Result<SessionOutcome> {
    let mut report = SessionReport::new(link.session_id());
    let init = match link.recv()? {
        MessageBody::SessionInit(init) => init,
        other => return Err(unexpected("SESSION_INIT", &other)),
    };
    validate_init(&init)?;
    link.send(MessageBody::Timetags {
        entries: tags
            .iter()
            .enumerate()
            .map(|(i, t)| (i as u64, t.timestamp_ps, t.channel.basis()))
            .collect(),
    })?;

    let pairs = match link.recv()? {
        MessageBody::MatchResult { pairs } => pairs,
        other => return Err(unexpected("MATCH_RESULT", &other)),
    };
    let sifted = sift(tags, pairs.iter().map(|p| p.1))?;
    report.sifted_bits = sifted.len() as u64;
    report.basis_balance = sifted.basis_balance();

    let picked: Vec<usize> = match link.recv()? {
        MessageBody::QberSampleRequest { indices } => {
            let picked: Vec<usize> = indices.iter().map(|&i| i as usize).collect();
            if !picked.windows(2).all(|w| w[0] < w[1]) || picked.last().is_some_and(|&i| i >= sifted.len()) {
                return Err(Error::ProtocolViolation("invalid sample positions".into()));
            }
            picked
        }
        MessageBody::Abort { reason } => return Ok(aborted(report, sifted, reason)),
        other => return Err(unexpected("QBER_SAMPLE_REQUEST", &other)),
    };
    let mine: Vec<u8> = picked.iter().map(|&i| sifted.bits[i]).collect();
    link.send(MessageBody::QberSampleReveal {
        bits: BitArray(mine.clone()),
    })?;
    let theirs = match link.recv()? {
        MessageBody::QberSampleReveal { bits } if bits.len() == picked.len() => bits,
        other => return Err(unexpected("QBER_SAMPLE_REVEAL", &other)),
    };
    let errors = mine.iter().zip(theirs.bits()).filter(|(a, b)| a != b).count();
    let q_est = errors as f64 / picked.len().max(1) as f64;
    report.sample_bits = picked.len() as u64;
    report.qber_estimate = q_est;

    match link.recv()? {
        MessageBody::SecurityVerdict {
            qber_estimate,
            s_estimate,
            v_estimate,
            proceed,
        } => {
            if qber_estimate != q_est {
                return Err(Error::ProtocolViolation(format!(
                    "verdict QBER {qber_estimate} disagrees with the sample ({q_est})"
                )));
            }
            report.s_estimate = s_estimate;
            report.v_estimate = v_estimate;
            if !proceed {
                return match link.recv()? {
                    MessageBody::Abort { reason } => Ok(aborted(report, sifted, reason)),
                    other => Err(unexpected("ABORT", &other)),
                };
            }
        }
        other => return Err(unexpected("SECURITY_VERDICT", &other)),
    }

    let mut key = sifted.clone();
    key.remove_positions(&picked);
    if key.is_empty() {
        return match link.recv()? {
            MessageBody::Abort { reason } => Ok(aborted(report, sifted, reason)),
            other => Err(unexpected("ABORT", &other)),
        };
    }
    report.reconciled_bits = key.len() as u64;
    let cascade = CascadeParams {
        qber_estimate: q_est,
        passes: init.cascade_passes,
        seed: link.session_id(),
    };
    let ec = cascade_reconcile(link, Role::Corrector, &key.bits, &cascade)?;
    report.leak_ec = ec.leak_bits;
    report.cascade_corrections = ec.corrections;

    let (pa_seed, l) = match link.recv()? {
        MessageBody::PaSeed { seed, output_bits } => (seed, output_bits),
        MessageBody::Abort { reason } => return Ok(aborted(report, sifted, reason)),
        other => return Err(unexpected("PA_SEED", &other)),
    };
    if !ec.verified {
        return Err(Error::ProtocolViolation("PA_SEED after failed verification".into()));
    }
    let l_usize = usize::try_from(l).map_err(|_| Error::ProtocolViolation(format!("output length {l}")))?;
    let final_key = toeplitz_hash(&ec.corrected_key, &ToeplitzSeed::expand(pa_seed, key.len(), l_usize)?)
        .map_err(|e| Error::ProtocolViolation(format!("PA_SEED: {e}")))?;
    report.final_key_bits = l;
    report.pa_seed = Some(pa_seed);
    Ok(SessionOutcome {
        final_key,
        sifted,
        report,
    })
}

#[derive(Debug, Clone)]
pub struct SessionResult {
    pub alice_key: Vec<u8>,
    pub bob_key: Vec<u8>,
    /// Alice's report, with the full-key QBER filled in.
    pub report: SessionReport,
    pub bob_report: SessionReport,
    pub alice_sifted: SiftedKey,
    pub bob_sifted: SiftedKey,
    pub transcript: Vec<TranscriptEntry>,
}

/// Runs both actors on their own threads over an in-process channel.
pub fn run_session(alice_tags: &[Timetag], bob_tags: &[Timetag], params: &SessionParams) -> Result<SessionResult> {
    let tap = Transcript::new();
    let (ta, tb) = in_process_pair(Some(tap.clone()));
    let session = params.session_id;
    let (alice, bob) = std::thread::scope(|scope| {
        let bob = scope.spawn(move || {
            let mut link = Link::new(tb, session);
            bob_session(&mut link, bob_tags)
        });
        let mut link = Link::new(ta, session);
        let alice = alice_session(&mut link, alice_tags, params);
        // Unblocks Bob if Alice failed mid-session.
        drop(link);
        (alice, bob.join().expect("Bob's actor panicked"))
    });
    let (alice, bob) = (alice?, bob?);
    let mut report = alice.report;
    if alice.sifted.len() == bob.sifted.len() && !alice.sifted.is_empty() {
        let errors = alice
            .sifted
            .bits
            .iter()
            .zip(&bob.sifted.bits)
            .filter(|(a, b)| a != b)
            .count();
        report.qber_full = Some(errors as f64 / alice.sifted.len() as f64);
    }
    Ok(SessionResult {
        alice_key: alice.final_key,
        bob_key: bob.final_key,
        report,
        bob_report: bob.report,
        alice_sifted: alice.sifted,
        bob_sifted: bob.sifted,
        transcript: tap.entries(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::transport::TcpTransport;
    use crate::sourcesim::{detect, simulate_pairs, DetectorConfig, Party, Scheme, SourceConfig};
    use std::net::TcpListener;

    fn streams(p: f64, seed: u64) -> (Vec<Timetag>, Vec<Timetag>) {
        let cfg = SourceConfig::new(Scheme::Present, 1.0, 0.5, seed).with_werner(p).unwrap();
        let s = detect(&simulate_pairs(&cfg).unwrap(), &cfg, &DetectorConfig::ideal()).unwrap();
        (s.timetags(Party::Alice), s.timetags(Party::Bob))
    }

    /// Finds key material anywhere it must not appear: any bit array outside
    /// sample reveals and EC replies, and any port label in basis messages.
    fn hygiene_violations(transcript: &[TranscriptEntry]) -> Vec<String> {
        let mut bad = Vec::new();
        for e in transcript {
            let line = e.message.to_line();
            let v: serde_json::Value = serde_json::from_str(&line).unwrap();
            let ty = v["type"].as_str().unwrap().to_owned();
            let allowed = ty == "QBER_SAMPLE_REVEAL" || ty == "EC_PARITY_REPLY";
            if !allowed && line.contains("\"base64\"") {
                bad.push(format!("{ty} carries a bit array"));
            }
            if ty == "TIMETAGS" {
                for entry in v["payload"]["entries"].as_array().unwrap() {
                    let t = entry.as_array().unwrap();
                    if t.len() != 3 || !matches!(t[2].as_str(), Some("Z") | Some("X")) {
                        bad.push(format!("TIMETAGS entry {entry}"));
                    }
                }
            }
        }
        bad
    }

    #[test]
    fn ideal_session_agrees() {
        let (a, b) = streams(1.0, 1);
        let r = run_session(&a, &b, &SessionParams::new(11, 5)).unwrap();
        assert_eq!(r.alice_sifted.bits, r.bob_sifted.bits);
        assert_eq!(r.alice_sifted.bases, r.bob_sifted.bases);
        assert_eq!(r.report.qber_estimate, 0.0);
        assert_eq!(r.report.qber_full, Some(0.0));
        assert_eq!(r.report.aborted, None);
        assert!(r.report.final_key_bits > 0);
        assert!(r.report.final_key_bits <= r.report.sifted_bits);
        assert_eq!(r.alice_key.len() as u64, r.report.final_key_bits);
        assert_eq!(r.alice_key, r.bob_key);
        assert!(hygiene_violations(&r.transcript).is_empty());
    }

    #[test]
    fn noisy_session_reconciles() {
        let (a, b) = streams(0.9, 2);
        let r = run_session(&a, &b, &SessionParams::new(12, 6)).unwrap();
        assert_eq!(r.report.aborted, None);
        assert!(r.report.leak_ec > 0);
        assert!(r.bob_report.cascade_corrections > 0);
        assert_eq!(r.alice_key, r.bob_key);
        // Every parity on the wire is accounted for.
        let on_wire: usize = r
            .transcript
            .iter()
            .filter_map(|e| match &e.message.body {
                MessageBody::EcParityReply { parities } => Some(parities.len()),
                _ => None,
            })
            .sum();
        assert_eq!(on_wire as u64, r.report.leak_ec);
        assert_eq!(r.bob_report.leak_ec, r.report.leak_ec);
        assert!(hygiene_violations(&r.transcript).is_empty());
    }

    #[test]
    fn high_error_rate_aborts_cleanly() {
        let (a, b) = streams(0.7, 3);
        let r = run_session(&a, &b, &SessionParams::new(13, 7)).unwrap();
        assert_eq!(r.report.aborted, Some(AbortReason::QberThreshold));
        assert_eq!(r.bob_report.aborted, Some(AbortReason::QberThreshold));
        assert!(r.alice_key.is_empty() && r.bob_key.is_empty());
        assert_eq!(r.report.final_key_bits, 0);
        let last = r.transcript.last().unwrap();
        assert_eq!(last.message.body, MessageBody::Abort { reason: AbortReason::QberThreshold });
        assert!(!r.transcript.iter().any(|e| e.message.body.is_error_correction()));
    }

    #[test]
    fn no_detections_is_insufficient_key() {
        let r = run_session(&[], &[], &SessionParams::new(14, 0)).unwrap();
        assert_eq!(r.report.aborted, Some(AbortReason::InsufficientKey));
        assert_eq!(r.bob_report.aborted, Some(AbortReason::InsufficientKey));
    }

    #[test]
    fn tcp_matches_in_process() {
        let (a, b) = streams(0.95, 4);
        let params = SessionParams::new(15, 8);
        let local = run_session(&a, &b, &params).unwrap();

        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let bob = std::thread::spawn(move || {
            let mut link = Link::new(TcpTransport::connect(addr).unwrap(), 15);
            bob_session(&mut link, &b).unwrap()
        });
        let (stream, _) = listener.accept().unwrap();
        let mut link = Link::new(TcpTransport::new(stream).unwrap(), 15);
        let alice = alice_session(&mut link, &a, &params).unwrap();
        let bob = bob.join().unwrap();
        assert_eq!(alice.final_key, local.alice_key);
        assert_eq!(bob.final_key, local.bob_key);
    }

    #[test]
    fn rejects_bad_init() {
        let mut params = SessionParams::new(1, 1);
        params.sample_fraction = 1.0;
        assert!(run_session(&[], &[], &params).is_err());
    }
}
