//! Classical-channel messages and their line-oriented wire form.
//!
//! Each message is one JSON object per line:
//!
//! ```text
//! {"session_id":7,"seq":3,"type":"QBER_SAMPLE_REVEAL","payload":{"bits":{"len":12,"base64":"..."}}}
//! ```
//!
//! Timestamps are integer picoseconds. Bit arrays are packed most-significant
//! bit first and base64 encoded, with the bit count carried alongside.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::sourcesim::Basis;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BitArray(pub Vec<u8>);

impl BitArray {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }
}

/// Packs 0/1 values into bytes, most significant bit first.
pub fn pack_bits(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b & 1 == 1 {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], len: usize) -> Result<Vec<u8>> {
    if bytes.len() != len.div_ceil(8) {
        return Err(Error::ProtocolViolation(format!(
            "{} packed bytes cannot hold exactly {len} bits",
            bytes.len()
        )));
    }
    Ok((0..len).map(|i| (bytes[i / 8] >> (7 - i % 8)) & 1).collect())
}

#[derive(Serialize, Deserialize)]
struct WireBits {
    len: usize,
    base64: String,
}

impl Serialize for BitArray {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        WireBits {
            len: self.0.len(),
            base64: STANDARD.encode(pack_bits(&self.0)),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for BitArray {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = WireBits::deserialize(d)?;
        let bytes = STANDARD.decode(w.base64).map_err(serde::de::Error::custom)?;
        unpack_bits(&bytes, w.len)
            .map(BitArray)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AbortReason {
    QberThreshold,
    BellBound,
    ReconciliationFailed,
    InsufficientKey,
}

impl AbortReason {
    pub fn as_str(self) -> &'static str {
        match self {
            AbortReason::QberThreshold => "QBER_THRESHOLD",
            AbortReason::BellBound => "BELL_BOUND",
            AbortReason::ReconciliationFailed => "RECONCILIATION_FAILED",
            AbortReason::InsufficientKey => "INSUFFICIENT_KEY",
        }
    }
}

/// Parameters Alice announces at the start of a session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionInit {
    pub window_ps: u64,
    pub sample_fraction: f64,
    pub abort_threshold: f64,
    pub cascade_passes: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageBody {
    SessionInit(SessionInit),
    /// Bob's detections as `(index, timestamp_ps, basis)`; no port information.
    Timetags { entries: Vec<(u64, u64, Basis)> },
    /// Matched `(alice_index, bob_index)` pairs whose bases agree.
    MatchResult { pairs: Vec<(u64, u64)> },
    /// Sifted-key positions to disclose for error estimation.
    QberSampleRequest { indices: Vec<u64> },
    QberSampleReveal { bits: BitArray },
    SecurityVerdict {
        qber_estimate: f64,
        s_estimate: f64,
        v_estimate: f64,
        proceed: bool,
    },
    /// Parity queries as `(pass, start, end)` half-open ranges in the pass's
    /// permuted order.
    EcParityRequest { ranges: Vec<(u8, u32, u32)> },
    EcParityReply { parities: BitArray },
    EcVerify { hash_seed: u64, hash: u64 },
    EcVerifyResult { ok: bool },
    PaSeed { seed: u64, output_bits: u64 },
    Abort { reason: AbortReason },
}

impl MessageBody {
    pub fn type_name(&self) -> &'static str {
        match self {
            MessageBody::SessionInit(_) => "SESSION_INIT",
            MessageBody::Timetags { .. } => "TIMETAGS",
            MessageBody::MatchResult { .. } => "MATCH_RESULT",
            MessageBody::QberSampleRequest { .. } => "QBER_SAMPLE_REQUEST",
            MessageBody::QberSampleReveal { .. } => "QBER_SAMPLE_REVEAL",
            MessageBody::SecurityVerdict { .. } => "SECURITY_VERDICT",
            MessageBody::EcParityRequest { .. } => "EC_PARITY_REQUEST",
            MessageBody::EcParityReply { .. } => "EC_PARITY_REPLY",
            MessageBody::EcVerify { .. } => "EC_VERIFY",
            MessageBody::EcVerifyResult { .. } => "EC_VERIFY_RESULT",
            MessageBody::PaSeed { .. } => "PA_SEED",
            MessageBody::Abort { .. } => "ABORT",
        }
    }

    pub fn is_error_correction(&self) -> bool {
        self.type_name().starts_with("EC_")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalMessage {
    pub session_id: u64,
    pub seq: u64,
    #[serde(flatten)]
    pub body: MessageBody,
}

impl ClassicalMessage {
    /// One line of the wire format, without the trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("messages always serialize")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        serde_json::from_str(line.trim_end())
            .map_err(|e| Error::ProtocolViolation(format!("malformed message: {e}")))
    }
}
