//! Monte-Carlo photon-pair emission and detection.
//!
//! Pairs are a homogeneous Poisson process. In the two-source schemes each
//! pair carries a fair random tag naming the source that emitted it, and the
//! tag alone fixes the measurement basis of both photons. In the conventional
//! scheme a single source feeds a beam splitter on each side that picks the
//! basis independently.

use std::fmt;
use std::io::{self, BufRead, Read, Write};
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::coinc::{self, DEFAULT_WINDOW_PS};
use crate::error::{Error, Result};
use crate::polmath::{
    joint_outcome_distribution, projector_probability, werner_state, ChshCounts,
    ChshSettings, FixedBasis, FringeScan, OutcomeCounts, PauliEigenstate, WernerParameter,
};

pub const PS_PER_SECOND: f64 = 1e12;

/// Analyzer angle of the Z (H/V) measurement.
pub const Z_ANALYZER_DEG: f64 = 0.0;
/// Analyzer angle of the X (D/A) measurement; a wave plate at 22.5°.
pub const X_ANALYZER_DEG: f64 = 45.0;

// RNG stream identifiers; each concern of a session draws from its own stream.
const STREAM_PAIRS: u64 = 1;
const STREAM_DETECT: u64 = 2;
const STREAM_DARK_ALICE: u64 = 3;
const STREAM_DARK_BOB: u64 = 4;
const STREAM_PROJECTIVE: u64 = 0x100;

pub(crate) fn session_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives an independent seed for sub-session `index` of a parent seed
/// (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Two time-multiplexed sources, one per basis.
    Present,
    /// One source, basis chosen by a beam splitter at each party.
    Conventional,
    /// Same statistics as `Present`; sources distinguished by wavelength.
    WdmPresent,
}

impl Scheme {
    pub fn source_count(self) -> u32 {
        match self {
            Scheme::Present | Scheme::WdmPresent => 2,
            Scheme::Conventional => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Present => "present",
            Scheme::Conventional => "conventional",
            Scheme::WdmPresent => "wdm_present",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "present" => Ok(Scheme::Present),
            "conventional" => Ok(Scheme::Conventional),
            "wdm_present" | "wdm-present" => Ok(Scheme::WdmPresent),
            other => Err(Error::input(format!("unknown scheme {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub pump_power_mw: f64,
    /// Detected pairs per second, per milliwatt of pump, per nanometer of
    /// filter bandwidth, for one source.
    pub brightness_hz_per_mw_nm: f64,
    pub filter_bandwidth_nm: f64,
    pub werner_p: WernerParameter,
    pub scheme: Scheme,
    pub duration_s: f64,
    pub seed: u64,
}

impl SourceConfig {
    pub const DEFAULT_BRIGHTNESS: f64 = 0.04e6;
    pub const DEFAULT_BANDWIDTH_NM: f64 = 3.0;

    pub fn new(scheme: Scheme, pump_power_mw: f64, duration_s: f64, seed: u64) -> Self {
        SourceConfig {
            pump_power_mw,
            brightness_hz_per_mw_nm: Self::DEFAULT_BRIGHTNESS,
            filter_bandwidth_nm: Self::DEFAULT_BANDWIDTH_NM,
            werner_p: WernerParameter::new(1.0).expect("1 is a valid Werner weight"),
            scheme,
            duration_s,
            seed,
        }
    }

    pub fn with_werner(mut self, p: f64) -> Result<Self> {
        self.werner_p = WernerParameter::new(p)?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pump_power_mw > 0.0 && self.pump_power_mw.is_finite()) {
            return Err(Error::input(format!("pump power {} mW must be > 0", self.pump_power_mw)));
        }
        if !(self.brightness_hz_per_mw_nm > 0.0 && self.brightness_hz_per_mw_nm.is_finite()) {
            return Err(Error::input("brightness must be > 0"));
        }
        if !(self.filter_bandwidth_nm > 0.0 && self.filter_bandwidth_nm.is_finite()) {
            return Err(Error::input("filter bandwidth must be > 0"));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::input(format!("duration {} s must be > 0", self.duration_s)));
        }
        Ok(())
    }

    /// Pair rate of one source, in pairs per second.
    pub fn pair_rate_per_source(&self) -> f64 {
        self.brightness_hz_per_mw_nm * self.pump_power_mw * self.filter_bandwidth_nm
    }

    /// Pair rate summed over all sources of the scheme.
    pub fn total_pair_rate(&self) -> f64 {
        self.pair_rate_per_source() * f64::from(self.scheme.source_count())
    }

    fn duration_ps(&self) -> f64 {
        self.duration_s * PS_PER_SECOND
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub efficiency: f64,
    pub dark_rate_hz: f64,
    pub jitter_sigma_ps: f64,
    pub dead_time_ps: u64,
    pub bs_transmittance_alice: f64,
    pub bs_transmittance_bob: f64,
    pub bs_excess_loss: f64,
}

impl DetectorConfig {
    /// Lossless, noiseless detectors and ideal 50:50 splitters.
    pub fn ideal() -> Self {
        DetectorConfig {
            efficiency: 1.0,
            dark_rate_hz: 0.0,
            jitter_sigma_ps: 0.0,
            dead_time_ps: 0,
            bs_transmittance_alice: 0.5,
            bs_transmittance_bob: 0.5,
            bs_excess_loss: 0.0,
        }
    }

    /// Typical silicon SPAD figures; the splitter values reproduce a 1.3:1
    /// Z:X imbalance in the conventional scheme.
    pub fn paper_like() -> Self {
        DetectorConfig {
            efficiency: 0.965,
            dark_rate_hz: 100.0,
            jitter_sigma_ps: 350.0,
            dead_time_ps: 22_000,
            bs_transmittance_alice: 0.533,
            bs_transmittance_bob: 0.533,
            bs_excess_loss: 0.10,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ideal" => Ok(Self::ideal()),
            "paper-like" | "paper_like" => Ok(Self::paper_like()),
            other => Err(Error::Config(format!("unknown detector preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("efficiency", self.efficiency),
            ("bs_transmittance_alice", self.bs_transmittance_alice),
            ("bs_transmittance_bob", self.bs_transmittance_bob),
            ("bs_excess_loss", self.bs_excess_loss),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::input(format!("{name} = {p} is not a probability")));
            }
        }
        if !(self.dark_rate_hz >= 0.0 && self.dark_rate_hz.is_finite()) {
            return Err(Error::input("dark rate must be ≥ 0"));
        }
        if !(self.jitter_sigma_ps >= 0.0 && self.jitter_sigma_ps.is_finite()) {
            return Err(Error::input("jitter must be ≥ 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SourceTag {
    Eps1,
    Eps2,
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairEvent {
    pub emission_time_ps: u64,
    pub source: SourceTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Party {
    Alice,
    Bob,
}

impl Party {
    pub fn code(self) -> u8 {
        match self {
            Party::Alice => 0,
            Party::Bob => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Party::Alice),
            1 => Ok(Party::Bob),
            other => Err(Error::input(format!("invalid party code {other}"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Party::Alice => "alice",
            Party::Bob => "bob",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Basis {
    Z,
    X,
}

impl Basis {
    pub fn analyzer_angle(self) -> f64 {
        match self {
            Basis::Z => Z_ANALYZER_DEG,
            Basis::X => X_ANALYZER_DEG,
        }
    }
}

/// A detector channel: basis and PBS port. Transmitted ports (H, D) encode
/// bit 0, reflected ports (V, A) encode bit 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    H,
    V,
    D,
    A,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::H, Channel::V, Channel::D, Channel::A];

    pub fn new(basis: Basis, bit: u8) -> Self {
        match (basis, bit) {
            (Basis::Z, 0) => Channel::H,
            (Basis::Z, _) => Channel::V,
            (Basis::X, 0) => Channel::D,
            (Basis::X, _) => Channel::A,
        }
    }

    pub fn basis(self) -> Basis {
        match self {
            Channel::H | Channel::V => Basis::Z,
            Channel::D | Channel::A => Basis::X,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Channel::H | Channel::D => 0,
            Channel::V | Channel::A => 1,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Channel::ALL
            .get(usize::from(code))
            .copied()
            .ok_or_else(|| Error::input(format!("invalid channel code {code}")))
    }

    pub fn label(self) -> &'static str {
        match self {
            Channel::H => "H",
            Channel::V => "V",
            Channel::D => "D",
            Channel::A => "A",
        }
    }

    /// Label in the wavelength-multiplexed variant, where λ1/λ2 carry the
    /// Z-basis pair and λ3/λ4 the X-basis pair.
    pub fn wdm_label(self, party: Party) -> &'static str {
        match (party, self.basis(), self.bit()) {
            (Party::Alice, Basis::Z, 0) => "λ1-H",
            (Party::Alice, Basis::Z, _) => "λ1-V",
            (Party::Alice, Basis::X, 0) => "λ3-D",
            (Party::Alice, Basis::X, _) => "λ3-A",
            (Party::Bob, Basis::Z, 0) => "λ2-H",
            (Party::Bob, Basis::Z, _) => "λ2-V",
            (Party::Bob, Basis::X, 0) => "λ4-D",
            (Party::Bob, Basis::X, _) => "λ4-A",
        }
    }
}

impl FromStr for Channel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "H" => Ok(Channel::H),
            "V" => Ok(Channel::V),
            "D" => Ok(Channel::D),
            "A" => Ok(Channel::A),
            other => Err(Error::input(format!("unknown channel {other:?}"))),
        }
    }
}

/// The protocol-visible part of a detection: who, where, when.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Timetag {
    pub party: Party,
    pub channel: Channel,
    pub timestamp_ps: u64,
}

/// Simulation ground truth for a click.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Truth {
    Pair(u64),
    Dark,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DetectionRecord {
    pub party: Party,
    pub channel: Channel,
    pub timestamp_ps: u64,
    pub truth: Truth,
}

impl DetectionRecord {
    pub fn timetag(&self) -> Timetag {
        Timetag {
            party: self.party,
            channel: self.channel,
            timestamp_ps: self.timestamp_ps,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionStreams {
    pub alice: Vec<DetectionRecord>,
    pub bob: Vec<DetectionRecord>,
}

impl DetectionStreams {
    pub fn timetags(&self, party: Party) -> Vec<Timetag> {
        let records = match party {
            Party::Alice => &self.alice,
            Party::Bob => &self.bob,
        };
        records.iter().map(DetectionRecord::timetag).collect()
    }
}

fn poisson_pairs(
    rate_hz: f64,
    duration_ps: f64,
    two_sources: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<PairEvent> {
    let mut out = Vec::with_capacity((rate_hz * duration_ps / PS_PER_SECOND * 1.01) as usize + 16);
    let gap = Exp::new(rate_hz / PS_PER_SECOND).expect("positive rate");
    let mut t = 0.0f64;
    loop {
        t += gap.sample(rng);
        if t >= duration_ps {
            break;
        }
        let source = if !two_sources {
            SourceTag::Single
        } else if rng.gen::<bool>() {
            SourceTag::Eps1
        } else {
            SourceTag::Eps2
        };
        out.push(PairEvent {
            emission_time_ps: t as u64,
            source,
        });
    }
    out
}

/// Emission events of one session, sorted by time. Deterministic in `cfg.seed`.
pub fn simulate_pairs(cfg: &SourceConfig) -> Result<Vec<PairEvent>> {
    cfg.validate()?;
    let mut rng = session_rng(cfg.seed, STREAM_PAIRS);
    Ok(poisson_pairs(
        cfg.total_pair_rate(),
        cfg.duration_ps(),
        cfg.scheme.source_count() == 2,
        &mut rng,
    ))
}

/// How each photon of a pair is analyzed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Measurement {
    /// Key generation: Z at 0°, X at 45°, basis chosen by the scheme.
    Keyed,
    /// Both parties at fixed analyzer angles; every click is reported on the
    /// H (transmitted) or V (reflected) channel.
    Fixed { alice_deg: f64, bob_deg: f64 },
}

/// Cumulative port distribution `[tt, tt+tr, tt+tr+rt]`.
#[derive(Clone, Copy)]
struct PortSampler([f64; 3]);

impl PortSampler {
    fn new(p: &SourceConfig, alice_deg: f64, bob_deg: f64) -> Self {
        let j = joint_outcome_distribution(&werner_state(p.werner_p), alice_deg, bob_deg);
        let total = j.total();
        PortSampler([
            j.tt / total,
            (j.tt + j.tr) / total,
            (j.tt + j.tr + j.rt) / total,
        ])
    }

    /// Returns (alice_bit, bob_bit) with 0 = transmitted.
    fn sample(&self, u: f64) -> (u8, u8) {
        if u < self.0[0] {
            (0, 0)
        } else if u < self.0[1] {
            (0, 1)
        } else if u < self.0[2] {
            (1, 0)
        } else {
            (1, 1)
        }
    }
}

/// Detection streams for both parties under key-generation analyzers.
pub fn detect(pairs: &[PairEvent], cfg: &SourceConfig, det: &DetectorConfig) -> Result<DetectionStreams> {
    detect_with(pairs, cfg, det, Measurement::Keyed)
}

pub fn detect_with(
    pairs: &[PairEvent],
    cfg: &SourceConfig,
    det: &DetectorConfig,
    measurement: Measurement,
) -> Result<DetectionStreams> {
    cfg.validate()?;
    det.validate()?;
    if pairs
        .windows(2)
        .any(|w| w[1].emission_time_ps < w[0].emission_time_ps)
    {
        return Err(Error::input("pair events are not sorted by emission time"));
    }

    let bases = [Basis::Z, Basis::X];
    let mut samplers = [[PortSampler([0.0; 3]); 2]; 2];
    for (i, a) in bases.iter().enumerate() {
        for (j, b) in bases.iter().enumerate() {
            samplers[i][j] = match measurement {
                Measurement::Keyed => PortSampler::new(cfg, a.analyzer_angle(), b.analyzer_angle()),
                Measurement::Fixed { alice_deg, bob_deg } => PortSampler::new(cfg, alice_deg, bob_deg),
            };
        }
    }
    let fixed = matches!(measurement, Measurement::Fixed { .. });

    let mut rng = session_rng(cfg.seed, STREAM_DETECT);
    let jitter = (det.jitter_sigma_ps > 0.0)
        .then(|| Normal::new(0.0, det.jitter_sigma_ps).expect("finite jitter"));
    let stamp = |t: u64, rng: &mut ChaCha8Rng| -> u64 {
        match &jitter {
            Some(n) => (t as f64 + n.sample(rng)).round().max(0.0) as u64,
            None => t,
        }
    };

    let expected = pairs.len() + 16;
    let mut alice = Vec::with_capacity(expected);
    let mut bob = Vec::with_capacity(expected);
    let survive = 1.0 - det.bs_excess_loss;

    for (id, pair) in pairs.iter().enumerate() {
        let (basis_a, basis_b, alive_a, alive_b) = if fixed {
            (Basis::Z, Basis::Z, true, true)
        } else {
            match (cfg.scheme, pair.source) {
                (Scheme::Conventional, _) | (_, SourceTag::Single) => {
                    let ba = if rng.gen::<f64>() < det.bs_transmittance_alice { Basis::Z } else { Basis::X };
                    let bb = if rng.gen::<f64>() < det.bs_transmittance_bob { Basis::Z } else { Basis::X };
                    let la = rng.gen::<f64>() < survive;
                    let lb = rng.gen::<f64>() < survive;
                    (ba, bb, la, lb)
                }
                (_, SourceTag::Eps1) => (Basis::Z, Basis::Z, true, true),
                (_, SourceTag::Eps2) => (Basis::X, Basis::X, true, true),
            }
        };
        let (bit_a, bit_b) = samplers[basis_a as usize][basis_b as usize].sample(rng.gen());
        let truth = Truth::Pair(id as u64);
        if alive_a && rng.gen::<f64>() < det.efficiency {
            alice.push(DetectionRecord {
                party: Party::Alice,
                channel: Channel::new(basis_a, bit_a),
                timestamp_ps: stamp(pair.emission_time_ps, &mut rng),
                truth,
            });
        }
        if alive_b && rng.gen::<f64>() < det.efficiency {
            bob.push(DetectionRecord {
                party: Party::Bob,
                channel: Channel::new(basis_b, bit_b),
                timestamp_ps: stamp(pair.emission_time_ps, &mut rng),
                truth,
            });
        }
    }

    for (party, records, stream) in [
        (Party::Alice, &mut alice, STREAM_DARK_ALICE),
        (Party::Bob, &mut bob, STREAM_DARK_BOB),
    ] {
        add_dark_counts(records, party, cfg, det, fixed, stream);
        apply_dead_time(records, det.dead_time_ps);
    }
    Ok(DetectionStreams { alice, bob })
}

fn add_dark_counts(
    records: &mut Vec<DetectionRecord>,
    party: Party,
    cfg: &SourceConfig,
    det: &DetectorConfig,
    fixed: bool,
    stream: u64,
) {
    let mean = det.dark_rate_hz * cfg.duration_s;
    if mean <= 0.0 {
        return;
    }
    let mut rng = session_rng(cfg.seed, stream);
    let poisson = Poisson::new(mean).expect("positive mean");
    let channels: &[Channel] = if fixed {
        &[Channel::H, Channel::V]
    } else {
        &Channel::ALL
    };
    let span = cfg.duration_ps();
    for &channel in channels {
        let n = poisson.sample(&mut rng) as u64;
        for _ in 0..n {
            records.push(DetectionRecord {
                party,
                channel,
                timestamp_ps: (rng.gen::<f64>() * span) as u64,
                truth: Truth::Dark,
            });
        }
    }
}

/// Non-paralyzable dead time per channel, then a global time sort.
///
/// A click is kept only if it is at least `max(dead_time, 1)` ps after the
/// previous kept click on the same channel.
fn apply_dead_time(records: &mut Vec<DetectionRecord>, dead_time_ps: u64) {
    records.sort_by_key(|r| (r.channel, r.timestamp_ps));
    let min_gap = dead_time_ps.max(1);
    let mut last: Option<(Channel, u64)> = None;
    records.retain(|r| {
        let keep = match last {
            Some((ch, t)) if ch == r.channel => r.timestamp_ps - t >= min_gap,
            _ => true,
        };
        if keep {
            last = Some((r.channel, r.timestamp_ps));
        }
        keep
    });
    records.sort_by_key(|r| (r.timestamp_ps, r.channel));
}

/// Simulates one source for `duration` with both analyzers fixed and returns
/// the four port-combination coincidence counts.
pub fn analyzer_session(
    cfg: &SourceConfig,
    det: &DetectorConfig,
    alice_deg: f64,
    bob_deg: f64,
) -> Result<OutcomeCounts> {
    cfg.validate()?;
    let mut rng = session_rng(cfg.seed, STREAM_PAIRS);
    let pairs = poisson_pairs(cfg.pair_rate_per_source(), cfg.duration_ps(), false, &mut rng);
    let streams = detect_with(&pairs, cfg, det, Measurement::Fixed { alice_deg, bob_deg })?;
    let set = coinc::match_coincidences(&streams.alice, &streams.bob, DEFAULT_WINDOW_PS)?;
    let mut counts = OutcomeCounts::default();
    for pair in &set.pairs {
        let a = streams.alice[pair.alice].channel.bit();
        let b = streams.bob[pair.bob].channel.bit();
        match (a, b) {
            (0, 0) => counts.tt += 1.0,
            (0, _) => counts.tr += 1.0,
            (_, 0) => counts.rt += 1.0,
            _ => counts.rr += 1.0,
        }
    }
    Ok(counts)
}

/// Fringe scan: Alice fixed in `fixed_basis`, Bob's half-wave plate stepped
/// through `hwp_angles` (analyzer at twice the plate angle), `dwell_s`
/// seconds per point. Records transmitted–transmitted coincidences.
pub fn fringe_scan(
    cfg: &SourceConfig,
    det: &DetectorConfig,
    fixed_basis: FixedBasis,
    hwp_angles: &[f64],
    dwell_s: f64,
) -> Result<FringeScan> {
    if hwp_angles.is_empty() {
        return Err(Error::input("fringe scan needs at least one angle"));
    }
    let basis_index = FixedBasis::ALL
        .iter()
        .position(|b| *b == fixed_basis)
        .expect("basis listed") as u64;
    let mut samples = Vec::with_capacity(hwp_angles.len());
    for (k, &theta) in hwp_angles.iter().enumerate() {
        let point = SourceConfig {
            duration_s: dwell_s,
            seed: derive_seed(cfg.seed, basis_index << 32 | k as u64),
            ..*cfg
        };
        let counts = analyzer_session(&point, det, fixed_basis.analyzer_angle(), 2.0 * theta)?;
        samples.push((theta, counts.tt));
    }
    FringeScan::new(samples, fixed_basis)
}

/// The 16-setting CHSH scan, `dwell_s` seconds per setting.
pub fn chsh_scan(
    cfg: &SourceConfig,
    det: &DetectorConfig,
    settings: &ChshSettings,
    dwell_s: f64,
) -> Result<ChshCounts> {
    let mut counts = ChshCounts::new();
    for (k, (a, b)) in ChshSettings::combinations().enumerate() {
        let point = SourceConfig {
            duration_s: dwell_s,
            seed: derive_seed(cfg.seed, 0xC45A_0000 + k as u64),
            ..*cfg
        };
        let c = analyzer_session(&point, det, settings.alice_angle(a), settings.bob_angle(b))?;
        counts.insert((a, b), c);
    }
    Ok(counts)
}

/// Ideal projective measurement of one source: a Poisson count with mean
/// `dwell × pair rate × Tr[ρ·Π_a⊗Π_b]`.
pub fn projective_sample(
    cfg: &SourceConfig,
    projectors: (PauliEigenstate, PauliEigenstate),
    dwell_s: f64,
) -> Result<u64> {
    cfg.validate()?;
    if !(dwell_s >= 0.0 && dwell_s.is_finite()) {
        return Err(Error::input("dwell must be ≥ 0"));
    }
    let index = PauliEigenstate::pairs()
        .position(|p| p == projectors)
        .expect("every pair is enumerated") as u64;
    let prob = projector_probability(&werner_state(cfg.werner_p), projectors.0, projectors.1);
    let mean = dwell_s * cfg.pair_rate_per_source() * prob;
    if mean <= 1e-12 {
        return Ok(0);
    }
    let mut rng = session_rng(cfg.seed, STREAM_PROJECTIVE + index);
    Ok(Poisson::new(mean).expect("positive mean").sample(&mut rng) as u64)
}

/// Bytes per record of the binary timetag format: `u8 party, u8 channel,
/// u64 timestamp_ps`, little-endian.
pub const TIMETAG_RECORD_BYTES: usize = 10;

pub fn write_timetags_binary<W: Write>(mut w: W, tags: impl IntoIterator<Item = Timetag>) -> io::Result<()> {
    for t in tags {
        let mut buf = [0u8; TIMETAG_RECORD_BYTES];
        buf[0] = t.party.code();
        buf[1] = t.channel.code();
        buf[2..].copy_from_slice(&t.timestamp_ps.to_le_bytes());
        w.write_all(&buf)?;
    }
    w.flush()
}

pub fn read_timetags_binary<R: Read>(mut r: R) -> Result<Vec<Timetag>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::input(format!("reading timetags: {e}")))?;
    if bytes.len() % TIMETAG_RECORD_BYTES != 0 {
        return Err(Error::input(format!(
            "timetag file length {} is not a multiple of {TIMETAG_RECORD_BYTES}",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(TIMETAG_RECORD_BYTES)
        .map(|c| {
            Ok(Timetag {
                party: Party::from_code(c[0])?,
                channel: Channel::from_code(c[1])?,
                timestamp_ps: u64::from_le_bytes(c[2..].try_into().expect("8 bytes")),
            })
        })
        .collect()
}

pub fn write_timetags_csv<W: Write>(mut w: W, tags: impl IntoIterator<Item = Timetag>) -> io::Result<()> {
    writeln!(w, "party,channel,timestamp_ps")?;
    for t in tags {
        writeln!(w, "{},{},{}", t.party.name(), t.channel.label(), t.timestamp_ps)?;
    }
    w.flush()
}

pub fn read_timetags_csv<R: BufRead>(r: R) -> Result<Vec<Timetag>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::input(format!("reading CSV: {e}")))?;
        if n == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        let [party, channel, ts] = fields[..] else {
            return Err(Error::input(format!("line {}: expected 3 fields", n + 1)));
        };
        let party = match party {
            "alice" => Party::Alice,
            "bob" => Party::Bob,
            other => return Err(Error::input(format!("line {}: unknown party {other:?}", n + 1))),
        };
        out.push(Timetag {
            party,
            channel: channel.parse()?,
            timestamp_ps: ts
                .parse()
                .map_err(|e| Error::input(format!("line {}: {e}", n + 1)))?,
        });
    }
    Ok(out)
}

/// Splits a merged timetag list into per-party streams, preserving order.
pub fn split_by_party(tags: &[Timetag]) -> (Vec<Timetag>, Vec<Timetag>) {
    tags.iter().partition(|t| t.party == Party::Alice)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ideal(scheme: Scheme, pump: f64, duration: f64, seed: u64) -> SourceConfig {
        SourceConfig::new(scheme, pump, duration, seed)
    }

    #[test]
    fn pair_count_matches_rate() {
        let cfg = ideal(Scheme::Conventional, 3.0, 1.0, 11);
        assert_eq!(cfg.total_pair_rate(), 360_000.0);
        let n = simulate_pairs(&cfg).unwrap().len() as f64;
        assert!((n - 360_000.0).abs() < 4.0 * 600.0, "n = {n}");
    }

    #[test]
    fn short_window_is_poisson() {
        let runs = 100_000u64;
        let mut empty = 0u64;
        let mut total = 0u64;
        for seed in 0..runs {
            let cfg = ideal(Scheme::Conventional, 3.0, 1e-6, seed);
            let n = simulate_pairs(&cfg).unwrap().len() as u64;
            total += n;
            empty += u64::from(n == 0);
        }
        let frac = empty as f64 / runs as f64;
        let expected = (-0.36f64).exp();
        let sigma = (expected * (1.0 - expected) / runs as f64).sqrt();
        assert!((frac - expected).abs() < 4.0 * sigma, "empty fraction {frac}");
        let mean = total as f64 / runs as f64;
        assert!((mean - 0.36).abs() < 4.0 * (0.36 / runs as f64).sqrt());
    }

    #[test]
    fn source_tags_are_fair() {
        let cfg = ideal(Scheme::Present, 1.0, 1e6 / 240_000.0, 5);
        let pairs = simulate_pairs(&cfg).unwrap();
        let eps1 = pairs.iter().filter(|p| p.source == SourceTag::Eps1).count() as f64;
        let frac = eps1 / pairs.len() as f64;
        let sigma = (0.25 / pairs.len() as f64).sqrt();
        assert!((frac - 0.5).abs() < 3.0 * sigma, "EPS1 fraction {frac}");
    }

    #[test]
    fn ideal_detection_is_perfectly_correlated() {
        let cfg = ideal(Scheme::Present, 1.0, 0.01, 3);
        let pairs = simulate_pairs(&cfg).unwrap();
        let s = detect(&pairs, &cfg, &DetectorConfig::ideal()).unwrap();
        assert_eq!(s.alice.len(), pairs.len());
        assert_eq!(s.bob.len(), pairs.len());
        for (a, b) in s.alice.iter().zip(&s.bob) {
            assert_eq!(a.timestamp_ps, b.timestamp_ps);
            assert_eq!(a.channel, b.channel);
            assert_eq!(a.truth, b.truth);
        }
    }

    #[test]
    fn werner_noise_sets_error_fraction() {
        let cfg = ideal(Scheme::Present, 1.0, 1e6 / 240_000.0, 8).with_werner(0.9).unwrap();
        let pairs = simulate_pairs(&cfg).unwrap();
        let s = detect(&pairs, &cfg, &DetectorConfig::ideal()).unwrap();
        let errors = s
            .alice
            .iter()
            .zip(&s.bob)
            .filter(|(a, b)| a.channel.bit() != b.channel.bit())
            .count() as f64;
        let q = errors / s.alice.len() as f64;
        assert!((q - 0.05).abs() < 0.001, "q = {q}");
    }

    #[test]
    fn conventional_splitters_halve_same_basis() {
        let cfg = ideal(Scheme::Conventional, 2.0, 0.5, 21);
        let pairs = simulate_pairs(&cfg).unwrap();
        let s = detect(&pairs, &cfg, &DetectorConfig::ideal()).unwrap();
        let same = s
            .alice
            .iter()
            .zip(&s.bob)
            .filter(|(a, b)| a.channel.basis() == b.channel.basis())
            .count() as f64;
        let n = pairs.len() as f64;
        assert!((same - 0.5 * n).abs() < 3.0 * (0.25 * n).sqrt());
    }

    #[test]
    fn unsorted_pairs_rejected() {
        let cfg = ideal(Scheme::Present, 1.0, 1.0, 0);
        let pairs = [
            PairEvent { emission_time_ps: 10, source: SourceTag::Eps1 },
            PairEvent { emission_time_ps: 5, source: SourceTag::Eps2 },
        ];
        assert!(matches!(detect(&pairs, &cfg, &DetectorConfig::ideal()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn determinism() {
        let cfg = ideal(Scheme::Conventional, 2.0, 0.01, 77);
        let det = DetectorConfig::paper_like();
        let a = detect(&simulate_pairs(&cfg).unwrap(), &cfg, &det).unwrap();
        let b = detect(&simulate_pairs(&cfg).unwrap(), &cfg, &det).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn projective_sampler() {
        let cfg = ideal(Scheme::Present, 1.0, 1.0, 4);
        let dwell = 1000.0 / cfg.pair_rate_per_source();
        let n = projective_sample(&cfg, (PauliEigenstate::H, PauliEigenstate::H), dwell).unwrap() as f64;
        assert!((n - 500.0).abs() < 4.0 * 500f64.sqrt());
        assert_eq!(projective_sample(&cfg, (PauliEigenstate::H, PauliEigenstate::V), dwell).unwrap(), 0);
        assert_eq!(projective_sample(&cfg, (PauliEigenstate::R, PauliEigenstate::R), dwell).unwrap(), 0);
    }

    #[test]
    fn fringe_scan_rejects_empty() {
        let cfg = ideal(Scheme::Present, 1.0, 1.0, 4);
        assert!(fringe_scan(&cfg, &DetectorConfig::ideal(), FixedBasis::H, &[], 0.01).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ideal(Scheme::Present, 0.0, 1.0, 0).validate().is_err());
        assert!(ideal(Scheme::Present, 1.0, 0.0, 0).validate().is_err());
        let det = DetectorConfig { efficiency: 1.2, ..DetectorConfig::ideal() };
        assert!(det.validate().is_err());
        assert!(DetectorConfig::preset("nope").is_err());
    }

    #[test]
    fn binary_and_csv_round_trip() {
        let cfg = ideal(Scheme::Present, 1.0, 0.001, 9);
        let det = DetectorConfig::paper_like();
        let s = detect(&simulate_pairs(&cfg).unwrap(), &cfg, &det).unwrap();
        let tags: Vec<Timetag> = s.timetags(Party::Alice).into_iter().chain(s.timetags(Party::Bob)).collect();
        let mut bin = Vec::new();
        write_timetags_binary(&mut bin, tags.iter().copied()).unwrap();
        assert_eq!(bin.len(), tags.len() * TIMETAG_RECORD_BYTES);
        assert_eq!(read_timetags_binary(&bin[..]).unwrap(), tags);
        let mut csv = Vec::new();
        write_timetags_csv(&mut csv, tags.iter().copied()).unwrap();
        assert_eq!(read_timetags_csv(&csv[..]).unwrap(), tags);
        let (a, b) = split_by_party(&tags);
        assert_eq!(a, s.timetags(Party::Alice));
        assert_eq!(b, s.timetags(Party::Bob));
        assert!(read_timetags_binary(&bin[..7]).is_err());
    }
}
