//! Two-qubit polarization-state mathematics.
//!
//! States live in the product basis `|HH⟩, |HV⟩, |VH⟩, |VV⟩` (Alice first).
//! Every angle accepted by this module is a *polarizer-equivalent analyzer
//! angle* in degrees; a half-wave plate at θ in front of a PBS corresponds to
//! an analyzer at 2θ, and that doubling is applied by callers that speak in
//! wave-plate angles (the source simulator and the harness).

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3, Vector4};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HERMITIAN_TOL: f64 = 1e-12;
pub const TRACE_TOL: f64 = 1e-12;
pub const EIGENVALUE_TOL: f64 = 1e-10;

const C0: Complex64 = Complex64::new(0.0, 0.0);
const C1: Complex64 = Complex64::new(1.0, 0.0);

/// A validated two-qubit density matrix.
///
/// Construction checks hermiticity, unit trace and positivity, so every value
/// of this type can be fed to the probability functions without rechecking.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(Matrix4<Complex64>);

impl DensityMatrix {
    pub fn new(m: Matrix4<Complex64>) -> Result<Self> {
        let mut herm_err = 0.0f64;
        for i in 0..4 {
            for j in 0..4 {
                herm_err = herm_err.max((m[(i, j)] - m[(j, i)].conj()).norm());
            }
        }
        if herm_err > HERMITIAN_TOL {
            return Err(Error::input(format!(
                "density matrix is not Hermitian (max deviation {herm_err:e})"
            )));
        }
        let tr = m.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(Error::input(format!("density matrix trace is {tr}, not 1")));
        }
        let min_eig = hermitian_eigenvalues(&m)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -EIGENVALUE_TOL {
            return Err(Error::input(format!(
                "density matrix has negative eigenvalue {min_eig:e}"
            )));
        }
        Ok(DensityMatrix(m))
    }

    /// Symmetrizes and trace-normalizes `m` before validating it. Useful for
    /// matrices assembled by floating-point arithmetic.
    pub fn from_approximate(m: Matrix4<Complex64>) -> Result<Self> {
        let h = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
        let tr = h.trace().re;
        if !(tr.is_finite() && tr > 0.0) {
            return Err(Error::Degenerate(format!("matrix trace {tr} not positive")));
        }
        Self::new(h / Complex64::new(tr, 0.0))
    }

    /// `|ψ⟩⟨ψ|` for a (not necessarily normalized) state vector.
    pub fn from_pure(psi: &Vector4<Complex64>) -> Result<Self> {
        let norm = psi.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::input("zero state vector"));
        }
        let v = psi / Complex64::new(norm, 0.0);
        Self::from_approximate(v * v.adjoint())
    }

    pub fn maximally_mixed() -> Self {
        DensityMatrix(Matrix4::identity() * Complex64::new(0.25, 0.0))
    }

    pub fn matrix(&self) -> &Matrix4<Complex64> {
        &self.0
    }

    pub fn element(&self, row: usize, col: usize) -> Complex64 {
        self.0[(row, col)]
    }

    /// Eigenvalues in descending order.
    pub fn eigenvalues(&self) -> [f64; 4] {
        let mut ev = hermitian_eigenvalues(&self.0);
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    pub fn purity(&self) -> f64 {
        (self.0 * self.0).trace().re
    }

    /// `Re Tr[ρ·op]`.
    pub fn expectation(&self, op: &Matrix4<Complex64>) -> f64 {
        (self.0 * op).trace().re
    }

    /// Trace distance `½‖ρ − σ‖₁`.
    pub fn trace_distance(&self, other: &DensityMatrix) -> f64 {
        let diff = self.0 - other.0;
        0.5 * hermitian_eigenvalues(&diff)
            .iter()
            .map(|e| e.abs())
            .sum::<f64>()
    }

    /// Row-major `(re, im)` pairs, the report serialization.
    pub fn to_pairs(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(16);
        for i in 0..4 {
            for j in 0..4 {
                let z = self.0[(i, j)];
                out.push((z.re, z.im));
            }
        }
        out
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        if pairs.len() != 16 {
            return Err(Error::input(format!(
                "expected 16 matrix elements, got {}",
                pairs.len()
            )));
        }
        let m = Matrix4::from_fn(|i, j| {
            let (re, im) = pairs[4 * i + j];
            Complex64::new(re, im)
        });
        Self::new(m)
    }
}

impl Serialize for DensityMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_pairs().serialize(s)
    }
}

impl<'de> Deserialize<'de> for DensityMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let pairs = Vec::<(f64, f64)>::deserialize(d)?;
        DensityMatrix::from_pairs(&pairs).map_err(serde::de::Error::custom)
    }
}

fn hermitian_eigenvalues(m: &Matrix4<Complex64>) -> [f64; 4] {
    let ev = m.symmetric_eigen().eigenvalues;
    [ev[0], ev[1], ev[2], ev[3]]
}

/// Replaces the eigenvalues of a Hermitian matrix by `f(λ)`.
fn map_eigenvalues(m: &Matrix4<Complex64>, f: impl Fn(f64) -> f64) -> Matrix4<Complex64> {
    let eig = m.symmetric_eigen();
    let mut out = Matrix4::zeros();
    for k in 0..4 {
        let v = eig.eigenvectors.column(k);
        out += v * v.adjoint() * Complex64::new(f(eig.eigenvalues[k]), 0.0);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BellState {
    PhiPlus,
    PhiMinus,
    PsiPlus,
    PsiMinus,
}

impl FromStr for BellState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Φ+" | "phi+" | "PhiPlus" => Ok(BellState::PhiPlus),
            "Φ−" | "Φ-" | "phi-" | "PhiMinus" => Ok(BellState::PhiMinus),
            "Ψ+" | "psi+" | "PsiPlus" => Ok(BellState::PsiPlus),
            "Ψ−" | "Ψ-" | "psi-" | "PsiMinus" => Ok(BellState::PsiMinus),
            other => Err(Error::input(format!("unknown Bell state label {other:?}"))),
        }
    }
}

impl BellState {
    pub fn ket(self) -> Vector4<Complex64> {
        let h = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        match self {
            BellState::PhiPlus => Vector4::new(h, C0, C0, h),
            BellState::PhiMinus => Vector4::new(h, C0, C0, -h),
            BellState::PsiPlus => Vector4::new(C0, h, h, C0),
            BellState::PsiMinus => Vector4::new(C0, h, -h, C0),
        }
    }
}

pub fn bell_state(label: BellState) -> DensityMatrix {
    let v = label.ket();
    DensityMatrix(v * v.adjoint())
}

/// Mixing weight of the Werner family; equals the two-photon fringe
/// visibility of the state it builds.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct WernerParameter(f64);

impl WernerParameter {
    pub fn new(p: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&p) {
            Ok(WernerParameter(p))
        } else {
            Err(Error::input(format!("Werner parameter {p} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for WernerParameter {
    type Error = Error;
    fn try_from(p: f64) -> Result<Self> {
        WernerParameter::new(p)
    }
}

impl From<WernerParameter> for f64 {
    fn from(p: WernerParameter) -> f64 {
        p.0
    }
}

/// `p·|Φ+⟩⟨Φ+| + (1−p)·I/4`
pub fn werner_state(p: WernerParameter) -> DensityMatrix {
    let bell = bell_state(BellState::PhiPlus).0;
    let mixed = DensityMatrix::maximally_mixed().0;
    DensityMatrix(bell * Complex64::new(p.0, 0.0) + mixed * Complex64::new(1.0 - p.0, 0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Port {
    Transmitted,
    Reflected,
}

impl Port {
    pub fn sign(self) -> f64 {
        match self {
            Port::Transmitted => 1.0,
            Port::Reflected => -1.0,
        }
    }
}

/// A linear analyzer: polarizer-equivalent angle plus the PBS output port.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyzerSetting {
    angle: f64,
    pub port: Port,
}

impl AnalyzerSetting {
    pub fn new(angle_deg: f64, port: Port) -> Self {
        AnalyzerSetting {
            angle: normalize_angle(angle_deg),
            port,
        }
    }

    /// Angle normalized to `[0°, 180°)`.
    pub fn angle(&self) -> f64 {
        self.angle
    }

    /// The polarization state this setting projects onto.
    pub fn ket(&self) -> Vector2<Complex64> {
        match self.port {
            Port::Transmitted => linear_ket(self.angle),
            Port::Reflected => linear_ket(self.angle + 90.0),
        }
    }
}

pub fn normalize_angle(deg: f64) -> f64 {
    let a = deg.rem_euclid(180.0);
    if a >= 180.0 {
        0.0
    } else {
        a
    }
}

fn linear_ket(angle_deg: f64) -> Vector2<Complex64> {
    let t = angle_deg.to_radians();
    Vector2::new(Complex64::new(t.cos(), 0.0), Complex64::new(t.sin(), 0.0))
}

fn kron(a: &Vector2<Complex64>, b: &Vector2<Complex64>) -> Vector4<Complex64> {
    Vector4::new(a[0] * b[0], a[0] * b[1], a[1] * b[0], a[1] * b[1])
}

fn projection_probability(rho: &DensityMatrix, v: &Vector4<Complex64>) -> f64 {
    (v.adjoint() * rho.0 * v)[(0, 0)].re.max(0.0)
}

/// Probabilities of the four PBS output-port combinations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointOutcome {
    pub tt: f64,
    pub tr: f64,
    pub rt: f64,
    pub rr: f64,
}

impl JointOutcome {
    pub fn get(&self, alice: Port, bob: Port) -> f64 {
        match (alice, bob) {
            (Port::Transmitted, Port::Transmitted) => self.tt,
            (Port::Transmitted, Port::Reflected) => self.tr,
            (Port::Reflected, Port::Transmitted) => self.rt,
            (Port::Reflected, Port::Reflected) => self.rr,
        }
    }

    /// In `tt, tr, rt, rr` order.
    pub fn as_array(&self) -> [f64; 4] {
        [self.tt, self.tr, self.rt, self.rr]
    }

    pub fn total(&self) -> f64 {
        self.tt + self.tr + self.rt + self.rr
    }

    pub fn correlation(&self) -> f64 {
        (self.tt + self.rr - self.tr - self.rt) / self.total()
    }
}

/// `P_xy = Tr[ρ·(Π_α(x) ⊗ Π_β(y))]` for analyzers at `alpha_deg` (Alice) and
/// `beta_deg` (Bob).
pub fn joint_outcome_distribution(rho: &DensityMatrix, alpha_deg: f64, beta_deg: f64) -> JointOutcome {
    let p = |x: Port, y: Port| {
        let a = AnalyzerSetting::new(alpha_deg, x).ket();
        let b = AnalyzerSetting::new(beta_deg, y).ket();
        projection_probability(rho, &kron(&a, &b))
    };
    JointOutcome {
        tt: p(Port::Transmitted, Port::Transmitted),
        tr: p(Port::Transmitted, Port::Reflected),
        rt: p(Port::Reflected, Port::Transmitted),
        rr: p(Port::Reflected, Port::Reflected),
    }
}

/// `E = P_tt + P_rr − P_tr − P_rt`.
pub fn correlation_coefficient(rho: &DensityMatrix, alpha_deg: f64, beta_deg: f64) -> f64 {
    let j = joint_outcome_distribution(rho, alpha_deg, beta_deg);
    j.tt + j.rr - j.tr - j.rt
}

/// One of the four analyzer orientations a party uses in a CHSH scan: the two
/// measurement angles and their orthogonal complements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChshAnalyzer {
    First,
    FirstPerp,
    Second,
    SecondPerp,
}

impl ChshAnalyzer {
    pub const ALL: [ChshAnalyzer; 4] = [
        ChshAnalyzer::First,
        ChshAnalyzer::FirstPerp,
        ChshAnalyzer::Second,
        ChshAnalyzer::SecondPerp,
    ];

    fn is_first(self) -> bool {
        matches!(self, ChshAnalyzer::First | ChshAnalyzer::FirstPerp)
    }

    fn sign(self) -> f64 {
        match self {
            ChshAnalyzer::First | ChshAnalyzer::Second => 1.0,
            ChshAnalyzer::FirstPerp | ChshAnalyzer::SecondPerp => -1.0,
        }
    }
}

/// Analyzer angles `(a, a′)` for Alice and `(b, b′)` for Bob.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChshSettings {
    pub a: f64,
    pub a_prime: f64,
    pub b: f64,
    pub b_prime: f64,
}

impl ChshSettings {
    /// Optimal settings for `|Φ+⟩`: a=0°, a′=45°, b=22.5°, b′=67.5°.
    pub const STANDARD: ChshSettings = ChshSettings {
        a: 0.0,
        a_prime: 45.0,
        b: 22.5,
        b_prime: 67.5,
    };

    pub fn alice_angle(&self, which: ChshAnalyzer) -> f64 {
        Self::angle(self.a, self.a_prime, which)
    }

    pub fn bob_angle(&self, which: ChshAnalyzer) -> f64 {
        Self::angle(self.b, self.b_prime, which)
    }

    fn angle(first: f64, second: f64, which: ChshAnalyzer) -> f64 {
        match which {
            ChshAnalyzer::First => first,
            ChshAnalyzer::FirstPerp => first + 90.0,
            ChshAnalyzer::Second => second,
            ChshAnalyzer::SecondPerp => second + 90.0,
        }
    }

    /// All 16 (Alice, Bob) analyzer combinations.
    pub fn combinations() -> impl Iterator<Item = (ChshAnalyzer, ChshAnalyzer)> {
        ChshAnalyzer::ALL
            .into_iter()
            .flat_map(|a| ChshAnalyzer::ALL.into_iter().map(move |b| (a, b)))
    }
}

impl Default for ChshSettings {
    fn default() -> Self {
        Self::STANDARD
    }
}

/// Coincidence counts of the four port combinations at one setting. Stored
/// as `f64` so exact probabilities can be fed through the same estimator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub tt: f64,
    pub tr: f64,
    pub rt: f64,
    pub rr: f64,
}

impl OutcomeCounts {
    pub fn total(&self) -> f64 {
        self.tt + self.tr + self.rt + self.rr
    }

    fn signed_sum(&self) -> f64 {
        self.tt + self.rr - self.tr - self.rt
    }
}

impl From<JointOutcome> for OutcomeCounts {
    fn from(j: JointOutcome) -> Self {
        OutcomeCounts {
            tt: j.tt,
            tr: j.tr,
            rt: j.rt,
            rr: j.rr,
        }
    }
}

pub type ChshCounts = HashMap<(ChshAnalyzer, ChshAnalyzer), OutcomeCounts>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChshEstimate {
    pub s: f64,
    pub stderr: f64,
    /// `E(a,b), E(a,b′), E(a′,b), E(a′,b′)`.
    pub correlations: [f64; 4],
}

/// `S = |E(a,b) − E(a,b′) + E(a′,b) + E(a′,b′)|` from a 16-setting scan.
///
/// Each correlator pools the four settings that share its angle pair; a count
/// at an orthogonal analyzer enters with its outcome sign flipped.
pub fn chsh_from_counts(counts: &ChshCounts) -> Result<ChshEstimate> {
    for key in ChshSettings::combinations() {
        let c = counts
            .get(&key)
            .ok_or_else(|| Error::input(format!("CHSH scan is missing setting {key:?}")))?;
        let fields = [c.tt, c.tr, c.rt, c.rr];
        if fields.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::input(format!("negative or non-finite counts at {key:?}")));
        }
        if c.total() <= 0.0 {
            return Err(Error::Degenerate(format!("zero coincidences at setting {key:?}")));
        }
    }
    let correlator = |alice_first: bool, bob_first: bool| {
        let (mut num, mut total) = (0.0, 0.0);
        for ((a, b), c) in counts.iter() {
            if a.is_first() == alice_first && b.is_first() == bob_first {
                num += a.sign() * b.sign() * c.signed_sum();
                total += c.total();
            }
        }
        let e = num / total;
        (e, ((1.0 - e * e).max(0.0) / total).sqrt())
    };
    let (e_ab, s1) = correlator(true, true);
    let (e_abp, s2) = correlator(true, false);
    let (e_apb, s3) = correlator(false, true);
    let (e_apbp, s4) = correlator(false, false);
    Ok(ChshEstimate {
        s: (e_ab - e_abp + e_apb + e_apbp).abs(),
        stderr: (s1 * s1 + s2 * s2 + s3 * s3 + s4 * s4).sqrt(),
        correlations: [e_ab, e_abp, e_apb, e_apbp],
    })
}

/// The 16-setting table of exact outcome probabilities for `rho`.
pub fn exact_chsh_counts(rho: &DensityMatrix, settings: &ChshSettings) -> ChshCounts {
    ChshSettings::combinations()
        .map(|(a, b)| {
            let j = joint_outcome_distribution(rho, settings.alice_angle(a), settings.bob_angle(b));
            ((a, b), OutcomeCounts::from(j))
        })
        .collect()
}

/// The basis Alice holds fixed while Bob's wave plate rotates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FixedBasis {
    H,
    V,
    D,
    A,
}

impl FixedBasis {
    pub const ALL: [FixedBasis; 4] = [FixedBasis::H, FixedBasis::V, FixedBasis::D, FixedBasis::A];

    pub fn analyzer_angle(self) -> f64 {
        match self {
            FixedBasis::H => 0.0,
            FixedBasis::V => 90.0,
            FixedBasis::D => 45.0,
            FixedBasis::A => 135.0,
        }
    }
}

impl fmt::Display for FixedBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Coincidence counts against Bob's half-wave-plate angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FringeScan {
    samples: Vec<(f64, f64)>,
    fixed_basis: FixedBasis,
}

impl FringeScan {
    pub fn new(samples: Vec<(f64, f64)>, fixed_basis: FixedBasis) -> Result<Self> {
        if samples.len() < 8 {
            return Err(Error::input(format!(
                "fringe scan needs at least 8 samples, got {}",
                samples.len()
            )));
        }
        if samples
            .iter()
            .any(|&(a, c)| !a.is_finite() || !c.is_finite() || c < 0.0)
        {
            return Err(Error::input("fringe scan has negative or non-finite entries"));
        }
        let (lo, hi) = samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(a, _)| {
                (lo.min(a), hi.max(a))
            });
        if hi - lo < 90.0 {
            return Err(Error::input(format!(
                "fringe scan spans {:.3}° of wave-plate angle, needs 90°",
                hi - lo
            )));
        }
        Ok(FringeScan {
            samples,
            fixed_basis,
        })
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    pub fn fixed_basis(&self) -> FixedBasis {
        self.fixed_basis
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FringeFit {
    pub visibility: f64,
    pub amplitude: f64,
    /// Radians.
    pub phase: f64,
    /// RMS of the fit residuals, in counts.
    pub residual: f64,
}

/// Least-squares fit of `C(θ) = A·(1 + V·cos(4θ + φ))` over wave-plate angle θ.
///
/// Linear in `(A, A·V·cos φ, −A·V·sin φ)`, so it is solved directly from the
/// normal equations.
pub fn visibility_fit(scan: &FringeScan) -> Result<FringeFit> {
    let mut phases: Vec<f64> = scan
        .samples
        .iter()
        .map(|&(theta, _)| theta.rem_euclid(90.0))
        .collect();
    phases.sort_by(f64::total_cmp);
    phases.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    if phases.len() > 1 && (phases[phases.len() - 1] - 90.0 - phases[0]).abs() < 1e-9 {
        phases.pop();
    }
    if phases.len() < 4 {
        return Err(Error::Underdetermined(format!(
            "only {} distinct fringe phases",
            phases.len()
        )));
    }

    let basis = |theta: f64| {
        let x = (4.0 * theta).to_radians();
        Vector3::new(1.0, x.cos(), x.sin())
    };
    let mut normal = Matrix3::<f64>::zeros();
    let mut rhs = Vector3::<f64>::zeros();
    for &(theta, count) in &scan.samples {
        let row = basis(theta);
        normal += row * row.transpose();
        rhs += row * count;
    }
    let coef = normal
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Underdetermined("singular fringe design matrix".into()))?;
    let amplitude = coef[0];
    if !(amplitude > 0.0) {
        return Err(Error::Degenerate(format!("fitted mean count {amplitude} ≤ 0")));
    }
    let modulation = coef[1].hypot(coef[2]);
    let phase = (-coef[2]).atan2(coef[1]);
    let sse: f64 = scan
        .samples
        .iter()
        .map(|&(theta, count)| {
            let r = count - basis(theta).dot(&coef);
            r * r
        })
        .sum();
    Ok(FringeFit {
        visibility: (modulation / amplitude).clamp(0.0, 1.0),
        amplitude,
        phase,
        residual: (sse / scan.samples.len() as f64).sqrt(),
    })
}

/// The six single-qubit Pauli eigenstates used for tomography.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PauliEigenstate {
    H,
    V,
    D,
    A,
    R,
    L,
}

impl PauliEigenstate {
    pub const ALL: [PauliEigenstate; 6] = [
        PauliEigenstate::H,
        PauliEigenstate::V,
        PauliEigenstate::D,
        PauliEigenstate::A,
        PauliEigenstate::R,
        PauliEigenstate::L,
    ];

    pub fn ket(self) -> Vector2<Complex64> {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let r = |x: f64| Complex64::new(x, 0.0);
        match self {
            PauliEigenstate::H => Vector2::new(C1, C0),
            PauliEigenstate::V => Vector2::new(C0, C1),
            PauliEigenstate::D => Vector2::new(r(h), r(h)),
            PauliEigenstate::A => Vector2::new(r(h), r(-h)),
            PauliEigenstate::R => Vector2::new(r(h), Complex64::new(0.0, h)),
            PauliEigenstate::L => Vector2::new(r(h), Complex64::new(0.0, -h)),
        }
    }

    /// Index of the Pauli operator this is an eigenstate of (1=Z, 2=X, 3=Y)
    /// and the eigenvalue sign.
    fn pauli(self) -> (usize, f64) {
        match self {
            PauliEigenstate::H => (1, 1.0),
            PauliEigenstate::V => (1, -1.0),
            PauliEigenstate::D => (2, 1.0),
            PauliEigenstate::A => (2, -1.0),
            PauliEigenstate::R => (3, 1.0),
            PauliEigenstate::L => (3, -1.0),
        }
    }

    /// All 36 Alice⊗Bob projector pairs.
    pub fn pairs() -> impl Iterator<Item = (PauliEigenstate, PauliEigenstate)> {
        Self::ALL
            .into_iter()
            .flat_map(|a| Self::ALL.into_iter().map(move |b| (a, b)))
    }
}

/// `Tr[ρ·(|a⟩⟨a| ⊗ |b⟩⟨b|)]`.
pub fn projector_probability(rho: &DensityMatrix, a: PauliEigenstate, b: PauliEigenstate) -> f64 {
    projection_probability(rho, &kron(&a.ket(), &b.ket()))
}

pub type TomographyCounts = HashMap<(PauliEigenstate, PauliEigenstate), f64>;

fn pauli_matrix(index: usize) -> nalgebra::Matrix2<Complex64> {
    let i = Complex64::new(0.0, 1.0);
    match index {
        0 => nalgebra::Matrix2::new(C1, C0, C0, C1),
        1 => nalgebra::Matrix2::new(C1, C0, C0, -C1),
        2 => nalgebra::Matrix2::new(C0, C1, C1, C0),
        3 => nalgebra::Matrix2::new(C0, -i, i, C0),
        _ => unreachable!("Pauli index {index}"),
    }
}

/// Reconstructs a density matrix from the 36-projector measurement set.
///
/// Counts are normalized within each of the nine basis pairs, the two-qubit
/// Stokes parameters are read off by linear inversion (single-party
/// parameters averaged over the partner's three bases), and the result is
/// projected onto the physical set by clipping negative eigenvalues and
/// rescaling the rest to unit trace.
pub fn tomography_reconstruct(counts: &TomographyCounts) -> Result<DensityMatrix> {
    let mut probs: HashMap<(PauliEigenstate, PauliEigenstate), f64> = HashMap::new();
    for (a, b) in PauliEigenstate::pairs() {
        let c = counts
            .get(&(a, b))
            .ok_or_else(|| Error::input(format!("tomography is missing projector pair ({a:?},{b:?})")))?;
        if !c.is_finite() || *c < 0.0 {
            return Err(Error::input(format!("invalid count {c} at ({a:?},{b:?})")));
        }
    }
    for (a, b) in PauliEigenstate::pairs() {
        let (ia, _) = a.pauli();
        let (ib, _) = b.pauli();
        let total: f64 = PauliEigenstate::pairs()
            .filter(|(x, y)| x.pauli().0 == ia && y.pauli().0 == ib)
            .map(|k| counts[&k])
            .sum();
        if total <= 0.0 {
            return Err(Error::Degenerate(format!(
                "no coincidences in basis pair containing ({a:?},{b:?})"
            )));
        }
        probs.insert((a, b), counts[&(a, b)] / total);
    }

    // stokes[i][j] = ⟨σ_i ⊗ σ_j⟩
    let mut stokes = [[0.0f64; 4]; 4];
    stokes[0][0] = 1.0;
    for ((a, b), p) in &probs {
        let (ia, sa) = a.pauli();
        let (ib, sb) = b.pauli();
        stokes[ia][ib] += sa * sb * p;
        stokes[ia][0] += sa * p / 3.0;
        stokes[0][ib] += sb * p / 3.0;
    }

    let mut m = Matrix4::<Complex64>::zeros();
    for (i, row) in stokes.iter().enumerate() {
        for (j, &t) in row.iter().enumerate() {
            m += pauli_matrix(i).kronecker(&pauli_matrix(j)) * Complex64::new(t / 4.0, 0.0);
        }
    }
    let h = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    project_to_physical(&h)
}

/// Nearest-PSD projection: negative eigenvalues are set to zero and the
/// remaining spectrum is rescaled to unit trace.
pub fn project_to_physical(m: &Matrix4<Complex64>) -> Result<DensityMatrix> {
    let eig = m.symmetric_eigen();
    let positive: f64 = eig.eigenvalues.iter().map(|&e| e.max(0.0)).sum();
    if !(positive > 0.0) {
        return Err(Error::Degenerate("reconstructed matrix has no positive spectrum".into()));
    }
    DensityMatrix::from_approximate(map_eigenvalues(m, |e| e.max(0.0) / positive))
}

/// State fidelity. Uses `⟨ψ|ρ|ψ⟩` when the target is pure and the Uhlmann
/// form otherwise.
pub fn fidelity(rho: &DensityMatrix, target: &DensityMatrix) -> f64 {
    if target.purity() > 1.0 - 1e-9 {
        rho.expectation(&target.0).clamp(0.0, 1.0)
    } else {
        uhlmann_fidelity(rho, target)
    }
}

/// `(Tr√(√ρ σ √ρ))²`.
pub fn uhlmann_fidelity(rho: &DensityMatrix, sigma: &DensityMatrix) -> f64 {
    let sqrt_rho = map_eigenvalues(&rho.0, |e| e.max(0.0).sqrt());
    let inner = sqrt_rho * sigma.0 * sqrt_rho;
    let inner = (inner + inner.adjoint()) * Complex64::new(0.5, 0.0);
    let root_trace: f64 = hermitian_eigenvalues(&inner)
        .iter()
        .map(|e| e.max(0.0).sqrt())
        .sum();
    (root_trace * root_trace).clamp(0.0, 1.0)
}

/// `1 − 2Q` inverted: the QBER of a state with visibility `v`.
pub fn qber_from_visibility(v: f64) -> f64 {
    (1.0 - v) / 2.0
}

/// Bit-error probability of same-basis coincidences at the key-basis
/// analyzers (Z at 0°, X at 45°).
pub fn same_basis_error_probability(rho: &DensityMatrix, analyzer_deg: f64) -> f64 {
    let j = joint_outcome_distribution(rho, analyzer_deg, analyzer_deg);
    (j.tr + j.rt) / j.total()
}
