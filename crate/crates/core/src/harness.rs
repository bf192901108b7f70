//! Experiment orchestration: configuration, pump-power sweeps, scheme
//! comparison, source characterization, fits and CSV output.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coinc::{coincidence_matrix, match_coincidences, qber, sifted_rate, CoincidenceMatrix};
use crate::error::{Error, Result};
use crate::polmath::{
    bell_state, chsh_from_counts, fidelity, tomography_reconstruct, visibility_fit, BellState, ChshEstimate,
    ChshSettings, DensityMatrix, FixedBasis, FringeFit, PauliEigenstate, TomographyCounts,
};
use crate::postproc::RateFormula;
use crate::protocol::{run_session, SessionParams, SessionReport};
use crate::sourcesim::{
    chsh_scan, derive_seed, detect, fringe_scan, projective_sample, simulate_pairs, DetectionStreams, DetectorConfig,
    Party, Scheme, SourceConfig,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub schemes: Vec<Scheme>,
    pub seeds: Vec<u64>,
    pub duration_s: f64,
    pub output_dir: String,
    pub rate_formula: RateFormula,
    /// Peak coincidences per fringe point when measuring V for sweep rows;
    /// 0 skips the fringe scans.
    pub visibility_counts: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            schemes: vec![Scheme::Present, Scheme::Conventional],
            seeds: vec![1],
            duration_s: 0.1,
            output_dir: "out".into(),
            rate_formula: RateFormula::default(),
            visibility_counts: 2000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub start_mw: f64,
    pub stop_mw: f64,
    pub step_mw: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            start_mw: 1.0,
            stop_mw: 13.0,
            step_mw: 3.0,
        }
    }
}

impl SweepSection {
    pub fn points(&self) -> Vec<f64> {
        let n = ((self.stop_mw - self.start_mw) / self.step_mw + 1e-9).floor() as usize;
        (0..=n).map(|k| self.start_mw + k as f64 * self.step_mw).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSection {
    pub brightness_hz_per_mw_nm: f64,
    pub filter_bandwidth_nm: f64,
    pub werner_p: f64,
}

impl Default for SourceSection {
    fn default() -> Self {
        SourceSection {
            brightness_hz_per_mw_nm: SourceConfig::DEFAULT_BRIGHTNESS,
            filter_bandwidth_nm: SourceConfig::DEFAULT_BANDWIDTH_NM,
            werner_p: 1.0,
        }
    }
}

/// A named preset with optional per-field overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub preset: String,
    pub efficiency: Option<f64>,
    pub dark_rate_hz: Option<f64>,
    pub jitter_sigma_ps: Option<f64>,
    pub dead_time_ps: Option<u64>,
    pub bs_transmittance_alice: Option<f64>,
    pub bs_transmittance_bob: Option<f64>,
    pub bs_excess_loss: Option<f64>,
}

impl Default for DetectorSection {
    fn default() -> Self {
        DetectorSection {
            preset: "ideal".into(),
            efficiency: None,
            dark_rate_hz: None,
            jitter_sigma_ps: None,
            dead_time_ps: None,
            bs_transmittance_alice: None,
            bs_transmittance_bob: None,
            bs_excess_loss: None,
        }
    }
}

impl DetectorSection {
    pub fn resolve(&self) -> Result<DetectorConfig> {
        let mut d = DetectorConfig::preset(&self.preset)?;
        d.efficiency = self.efficiency.unwrap_or(d.efficiency);
        d.dark_rate_hz = self.dark_rate_hz.unwrap_or(d.dark_rate_hz);
        d.jitter_sigma_ps = self.jitter_sigma_ps.unwrap_or(d.jitter_sigma_ps);
        d.dead_time_ps = self.dead_time_ps.unwrap_or(d.dead_time_ps);
        d.bs_transmittance_alice = self.bs_transmittance_alice.unwrap_or(d.bs_transmittance_alice);
        d.bs_transmittance_bob = self.bs_transmittance_bob.unwrap_or(d.bs_transmittance_bob);
        d.bs_excess_loss = self.bs_excess_loss.unwrap_or(d.bs_excess_loss);
        d.validate().map_err(|e| Error::Config(format!("[detector]: {e}")))?;
        Ok(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSection {
    pub window_ps: u64,
    pub sample_fraction: f64,
    pub abort_threshold: f64,
    pub cascade_passes: u32,
    pub margin_bits: u64,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        let p = SessionParams::new(0, 0);
        ProtocolSection {
            window_ps: p.window_ps,
            sample_fraction: p.sample_fraction,
            abort_threshold: p.abort_threshold,
            cascade_passes: p.cascade_passes,
            margin_bits: p.margin_bits,
        }
    }
}

/// Count targets are expected coincidences: the fringe maximum per point,
/// the total per CHSH setting, and the mean per tomography setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CharacterizationSection {
    pub pump_mw: f64,
    pub fringe_points: usize,
    pub fringe_counts: f64,
    pub chsh_counts: f64,
    pub tomography_counts: f64,
}

impl Default for CharacterizationSection {
    fn default() -> Self {
        CharacterizationSection {
            pump_mw: 1.0,
            fringe_points: 21,
            fringe_counts: 1e4,
            chsh_counts: 1e4,
            tomography_counts: 1e4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub sweep: SweepSection,
    pub source: SourceSection,
    pub detector: DetectorSection,
    pub protocol: ProtocolSection,
    pub characterization: CharacterizationSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let s = &self.sweep;
        if !(s.step_mw > 0.0) {
            return bad(format!("sweep step {} must be > 0", s.step_mw));
        }
        if !(s.start_mw > 0.0 && s.start_mw <= s.stop_mw) {
            return bad(format!("sweep needs 0 < start ≤ stop, got {}..{}", s.start_mw, s.stop_mw));
        }
        if !(self.experiment.duration_s > 0.0 && self.experiment.duration_s.is_finite()) {
            return bad(format!("duration {} must be > 0", self.experiment.duration_s));
        }
        if self.experiment.schemes.is_empty() || self.experiment.seeds.is_empty() {
            return bad("at least one scheme and one seed are required".into());
        }
        if !(self.experiment.visibility_counts >= 0.0) {
            return bad("visibility_counts must be ≥ 0".into());
        }
        if !(self.source.brightness_hz_per_mw_nm > 0.0 && self.source.filter_bandwidth_nm > 0.0) {
            return bad("brightness and filter bandwidth must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.source.werner_p) {
            return bad(format!("werner_p {} outside [0, 1]", self.source.werner_p));
        }
        let c = &self.characterization;
        if c.fringe_points < 8 || !(c.pump_mw > 0.0) {
            return bad("characterization needs ≥ 8 fringe points and pump_mw > 0".into());
        }
        if !(c.fringe_counts > 0.0 && c.chsh_counts > 0.0 && c.tomography_counts > 0.0) {
            return bad("characterization count targets must be > 0".into());
        }
        self.detector.resolve()?;
        check_protocol(&self.protocol)?;
        Ok(())
    }

    pub fn source_config(&self, scheme: Scheme, pump_mw: f64, seed: u64) -> Result<SourceConfig> {
        let mut cfg = SourceConfig::new(scheme, pump_mw, self.experiment.duration_s, seed);
        cfg.brightness_hz_per_mw_nm = self.source.brightness_hz_per_mw_nm;
        cfg.filter_bandwidth_nm = self.source.filter_bandwidth_nm;
        let cfg = cfg.with_werner(self.source.werner_p)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn session_params(&self, session_id: u64) -> SessionParams {
        let p = &self.protocol;
        SessionParams {
            session_id,
            window_ps: p.window_ps,
            sample_fraction: p.sample_fraction,
            abort_threshold: p.abort_threshold,
            cascade_passes: p.cascade_passes,
            margin_bits: p.margin_bits,
            rate_formula: self.experiment.rate_formula,
            seed: derive_seed(session_id, 0x5E55),
        }
    }
}

fn check_protocol(p: &ProtocolSection) -> Result<()> {
    if p.window_ps == 0 {
        return Err(Error::Config("window_ps must be > 0".into()));
    }
    if !(p.sample_fraction > 0.0 && p.sample_fraction < 1.0) {
        return Err(Error::Config(format!("sample_fraction {} outside (0, 1)", p.sample_fraction)));
    }
    if !(0.0..=1.0).contains(&p.abort_threshold) {
        return Err(Error::Config(format!("abort_threshold {} outside [0, 1]", p.abort_threshold)));
    }
    if !(1..=255).contains(&p.cascade_passes) {
        return Err(Error::Config(format!("cascade_passes {} outside 1..=255", p.cascade_passes)));
    }
    Ok(())
}

/// Seed of the run at sweep point `pump_index` for `scheme`.
pub fn run_seed(seed: u64, pump_index: usize, scheme: Scheme) -> u64 {
    let code = match scheme {
        Scheme::Present => 1,
        Scheme::Conventional => 2,
        Scheme::WdmPresent => 3,
    };
    derive_seed(derive_seed(seed, pump_index as u64), code)
}

/// Simulated detections of one run.
pub fn simulate_streams(cfg: &ExperimentConfig, scheme: Scheme, pump_mw: f64, seed: u64) -> Result<DetectionStreams> {
    let source = cfg.source_config(scheme, pump_mw, seed)?;
    let det = cfg.detector.resolve()?;
    detect(&simulate_pairs(&source)?, &source, &det)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub pump_mw: f64,
    pub scheme: Scheme,
    pub seed: u64,
    pub duration_s: f64,
    pub raw_coincidences: u64,
    pub sifted_coincidences: u64,
    pub r_sif_bps: f64,
    /// Erroneous over all same-basis coincidences.
    pub qber: f64,
    pub qber_estimate: f64,
    /// Mean fringe visibility over the H, V, D, A scans; NaN when skipped.
    pub v_avg: f64,
    pub s_est: f64,
    /// `cc_HH + cc_VV`
    pub z_count: u64,
    /// `cc_DD + cc_AA`
    pub x_count: u64,
    pub leak_ec: u64,
    pub r_ec_bps: f64,
    pub final_key_bits: u64,
    pub r_final_bps: f64,
    pub aborted: Option<String>,
}

impl SweepRow {
    pub fn balance_ratio(&self) -> f64 {
        self.z_count as f64 / self.x_count as f64
    }
}

/// Everything one sweep point produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub row: SweepRow,
    pub matrix: CoincidenceMatrix,
    pub report: SessionReport,
}

pub fn run_point(cfg: &ExperimentConfig, scheme: Scheme, pump_mw: f64, seed: u64) -> Result<RunOutput> {
    let source = cfg.source_config(scheme, pump_mw, seed)?;
    let det = cfg.detector.resolve()?;
    let streams = detect(&simulate_pairs(&source)?, &source, &det)?;
    let set = match_coincidences(&streams.alice, &streams.bob, cfg.protocol.window_ps)?;
    let matrix = coincidence_matrix(&set, &streams.alice, &streams.bob)?;
    let duration = cfg.experiment.duration_s;
    let session = run_session(
        &streams.timetags(Party::Alice),
        &streams.timetags(Party::Bob),
        &cfg.session_params(seed),
    )?;
    let report = session.report;
    let v_avg = if cfg.experiment.visibility_counts > 0.0 {
        mean_visibility(&source, &det, cfg.characterization.fringe_points, cfg.experiment.visibility_counts)?
    } else {
        f64::NAN
    };
    let (z_count, x_count) = matrix.correct_basis_counts();
    let row = SweepRow {
        pump_mw,
        scheme,
        seed,
        duration_s: duration,
        raw_coincidences: matrix.total(),
        sifted_coincidences: matrix.sifted(),
        r_sif_bps: sifted_rate(&matrix, duration)?,
        qber: qber(&matrix).unwrap_or(f64::NAN),
        qber_estimate: report.qber_estimate,
        v_avg,
        s_est: report.s_estimate,
        z_count,
        x_count,
        leak_ec: report.leak_ec,
        r_ec_bps: report.reconciled_bits as f64 / duration,
        final_key_bits: report.final_key_bits,
        r_final_bps: report.final_key_bits as f64 / duration,
        aborted: report.aborted.map(|r| r.as_str().to_owned()),
    };
    Ok(RunOutput { row, matrix, report })
}

fn fringe_angles(points: usize) -> Vec<f64> {
    (0..points).map(|k| 90.0 * k as f64 / (points - 1) as f64).collect()
}

/// Dwell giving `counts` expected coincidences at probability `prob` per pair.
fn dwell_for(source: &SourceConfig, det: &DetectorConfig, counts: f64, prob: f64) -> f64 {
    counts / (source.pair_rate_per_source() * det.efficiency * det.efficiency * prob)
}

fn fringe_fits(
    source: &SourceConfig,
    det: &DetectorConfig,
    points: usize,
    peak_counts: f64,
) -> Result<Vec<(FixedBasis, FringeFit)>> {
    let angles = fringe_angles(points);
    let dwell = dwell_for(source, det, peak_counts, 0.5);
    FixedBasis::ALL
        .iter()
        .map(|&b| {
            let scan = fringe_scan(source, det, b, &angles, dwell)?;
            Ok((b, visibility_fit(&scan)?))
        })
        .collect()
}

fn mean_visibility(source: &SourceConfig, det: &DetectorConfig, points: usize, peak_counts: f64) -> Result<f64> {
    let fits = fringe_fits(source, det, points, peak_counts)?;
    Ok(fits.iter().map(|(_, f)| f.visibility).sum::<f64>() / fits.len() as f64)
}

/// One run per (pump, scheme, seed), in that nesting order. Runs execute in
/// parallel; the output order does not depend on scheduling.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for (i, pump) in cfg.sweep.points().into_iter().enumerate() {
        for &scheme in &cfg.experiment.schemes {
            for &seed in &cfg.experiment.seeds {
                jobs.push((pump, scheme, run_seed(seed, i, scheme)));
            }
        }
    }
    jobs.into_par_iter()
        .map(|(pump, scheme, seed)| run_point(cfg, scheme, pump, seed).map(|o| o.row))
        .collect()
}

fn csv_header(kind: &str, cfg: &ExperimentConfig) -> String {
    format!(
        "# bbm92 {kind} schema v{CSV_SCHEMA_VERSION}\n# tool_version={TOOL_VERSION} config_sha256={}\n",
        cfg.hash()
    )
}

fn opt(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        x.to_string()
    }
}

pub fn sweep_csv(cfg: &ExperimentConfig, rows: &[SweepRow]) -> String {
    let mut out = csv_header("sweep", cfg);
    out.push_str(
        "pump_mw,scheme,seed,duration_s,raw_coincidences,sifted_coincidences,r_sif_bps,qber,qber_estimate,\
         v_avg,s_est,z_count,x_count,zx_ratio,leak_ec,r_ec_bps,final_key_bits,r_final_bps,aborted\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.pump_mw,
            r.scheme,
            r.seed,
            r.duration_s,
            r.raw_coincidences,
            r.sifted_coincidences,
            r.r_sif_bps,
            opt(r.qber),
            r.qber_estimate,
            opt(r.v_avg),
            r.s_est,
            r.z_count,
            r.x_count,
            opt(r.balance_ratio()),
            r.leak_ec,
            r.r_ec_bps,
            r.final_key_bits,
            r.r_final_bps,
            r.aborted.as_deref().unwrap_or(""),
        );
    }
    out
}

pub fn write_file(path: impl AsRef<Path>, contents: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope.
    pub stderr: f64,
}

/// Ordinary least squares.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() {
        return Err(Error::input(format!("{} x values but {} y values", xs.len(), ys.len())));
    }
    let n = xs.len();
    if n < 3 {
        return Err(Error::input(format!("linear fit needs ≥ 3 points, got {n}")));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::input("linear fit needs at least two distinct x values"));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    Ok(LinearFit {
        slope,
        intercept,
        stderr: (ssr / (nf - 2.0) / sxx).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparePoint {
    pub pump_mw: f64,
    pub scheme: Scheme,
    pub r_sif_bps: f64,
    pub baseline_r_sif_bps: f64,
    /// Scheme rate over the conventional rate.
    pub ratio: f64,
    pub qber: f64,
    pub qber_diff: f64,
    pub balance: f64,
    pub baseline_balance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeFit {
    pub scheme: Scheme,
    pub rate_vs_pump: LinearFit,
    pub qber_vs_pump: Option<LinearFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub points: Vec<ComparePoint>,
    pub fits: Vec<SchemeFit>,
}

struct Aggregate {
    r_sif: f64,
    qber: f64,
    z: u64,
    x: u64,
}

fn aggregate(rows: &[&SweepRow]) -> Aggregate {
    let n = rows.len() as f64;
    let sifted: u64 = rows.iter().map(|r| r.sifted_coincidences).sum();
    let errors: f64 = rows.iter().map(|r| r.qber * r.sifted_coincidences as f64).sum();
    Aggregate {
        r_sif: rows.iter().map(|r| r.r_sif_bps).sum::<f64>() / n,
        qber: if sifted > 0 { errors / sifted as f64 } else { f64::NAN },
        z: rows.iter().map(|r| r.z_count).sum(),
        x: rows.iter().map(|r| r.x_count).sum(),
    }
}

/// Compares every scheme against the conventional one, pump by pump (seeds
/// pooled), and fits rate and QBER against pump power for each scheme.
pub fn compare_rows(rows: &[SweepRow]) -> Result<Comparison> {
    let mut schemes: Vec<Scheme> = rows.iter().map(|r| r.scheme).collect();
    schemes.sort();
    schemes.dedup();
    if !schemes.contains(&Scheme::Conventional) || schemes.len() < 2 {
        return Err(Error::input(
            "comparison needs the conventional scheme and at least one other",
        ));
    }
    let grid = |s: Scheme| {
        let mut g: Vec<f64> = rows.iter().filter(|r| r.scheme == s).map(|r| r.pump_mw).collect();
        g.sort_by(f64::total_cmp);
        g.dedup();
        g
    };
    let base_grid = grid(Scheme::Conventional);
    for &s in &schemes {
        if grid(s) != base_grid {
            return Err(Error::input(format!("{s} and conventional were swept over different pump grids")));
        }
    }
    let at = |s: Scheme, pump: f64| -> Vec<&SweepRow> {
        rows.iter().filter(|r| r.scheme == s && r.pump_mw == pump).collect()
    };
    let mut points = Vec::new();
    for &s in schemes.iter().filter(|&&s| s != Scheme::Conventional) {
        for &pump in &base_grid {
            let a = aggregate(&at(s, pump));
            let b = aggregate(&at(Scheme::Conventional, pump));
            points.push(ComparePoint {
                pump_mw: pump,
                scheme: s,
                r_sif_bps: a.r_sif,
                baseline_r_sif_bps: b.r_sif,
                ratio: a.r_sif / b.r_sif,
                qber: a.qber,
                qber_diff: a.qber - b.qber,
                balance: a.z as f64 / a.x as f64,
                baseline_balance: b.z as f64 / b.x as f64,
            });
        }
    }
    let mut fits = Vec::new();
    if base_grid.len() >= 3 {
        for &s in &schemes {
            let aggs: Vec<Aggregate> = base_grid.iter().map(|&p| aggregate(&at(s, p))).collect();
            let rates: Vec<f64> = aggs.iter().map(|a| a.r_sif).collect();
            let qbers: Vec<f64> = aggs.iter().map(|a| a.qber).collect();
            fits.push(SchemeFit {
                scheme: s,
                rate_vs_pump: linear_fit(&base_grid, &rates)?,
                qber_vs_pump: if qbers.iter().all(|q| q.is_finite()) {
                    Some(linear_fit(&base_grid, &qbers)?)
                } else {
                    None
                },
            });
        }
    }
    Ok(Comparison { points, fits })
}

/// Runs the sweep and compares schemes.
pub fn compare_schemes(cfg: &ExperimentConfig) -> Result<(Vec<SweepRow>, Comparison)> {
    let schemes = &cfg.experiment.schemes;
    if !schemes.contains(&Scheme::Conventional) || !schemes.iter().any(|&s| s != Scheme::Conventional) {
        return Err(Error::Config(
            "compare needs the conventional scheme and at least one other in [experiment].schemes".into(),
        ));
    }
    let rows = run_experiment(cfg)?;
    let cmp = compare_rows(&rows)?;
    Ok((rows, cmp))
}

pub fn comparison_csv(cfg: &ExperimentConfig, cmp: &Comparison) -> String {
    let mut out = csv_header("comparison", cfg);
    out.push_str("pump_mw,scheme,r_sif_bps,conventional_r_sif_bps,ratio,qber,qber_diff,zx_ratio,conventional_zx_ratio\n");
    for p in &cmp.points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            p.pump_mw,
            p.scheme,
            p.r_sif_bps,
            p.baseline_r_sif_bps,
            p.ratio,
            opt(p.qber),
            opt(p.qber_diff),
            p.balance,
            p.baseline_balance
        );
    }
    out.push_str("#\n# scheme,rate_slope_bps_per_mw,rate_slope_stderr,rate_intercept_bps,qber_slope_per_mw,qber_slope_stderr\n");
    for f in &cmp.fits {
        let (qs, qe) = f
            .qber_vs_pump
            .map(|q| (q.slope.to_string(), q.stderr.to_string()))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "# {},{},{},{},{},{}",
            f.scheme, f.rate_vs_pump.slope, f.rate_vs_pump.stderr, f.rate_vs_pump.intercept, qs, qe
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisVisibility {
    pub basis: FixedBasis,
    pub fit: FringeFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterizationReport {
    pub werner_p: f64,
    pub visibilities: Vec<BasisVisibility>,
    pub chsh: ChshEstimate,
    pub fidelity: f64,
    pub density_matrix: DensityMatrix,
    pub tool_version: String,
    pub config_sha256: String,
}

/// Fringe scans in all four bases, the 16-setting CHSH scan and 36-setting
/// tomography of one source at `[characterization].pump_mw`.
pub fn run_characterization(cfg: &ExperimentConfig, seed: u64) -> Result<CharacterizationReport> {
    cfg.validate()?;
    let c = &cfg.characterization;
    let det = cfg.detector.resolve()?;
    let source = cfg.source_config(Scheme::Conventional, c.pump_mw, derive_seed(seed, 0xC0))?;

    let visibilities = fringe_fits(&source, &det, c.fringe_points, c.fringe_counts)?
        .into_iter()
        .map(|(basis, fit)| BasisVisibility { basis, fit })
        .collect();

    let chsh_source = SourceConfig {
        seed: derive_seed(seed, 0xC1),
        ..source
    };
    let chsh_counts = chsh_scan(
        &chsh_source,
        &det,
        &ChshSettings::STANDARD,
        dwell_for(&chsh_source, &det, c.chsh_counts, 1.0),
    )?;
    let chsh = chsh_from_counts(&chsh_counts)?;

    let tomo_source = SourceConfig {
        seed: derive_seed(seed, 0xC2),
        ..source
    };
    let dwell = c.tomography_counts / (tomo_source.pair_rate_per_source() * 0.25);
    let mut counts = TomographyCounts::new();
    for pair in PauliEigenstate::pairs() {
        counts.insert(pair, projective_sample(&tomo_source, pair, dwell)? as f64);
    }
    let rho = tomography_reconstruct(&counts)?;
    let fid = fidelity(&rho, &bell_state(BellState::PhiPlus));

    Ok(CharacterizationReport {
        werner_p: cfg.source.werner_p,
        visibilities,
        chsh,
        fidelity: fid,
        density_matrix: rho,
        tool_version: TOOL_VERSION.into(),
        config_sha256: cfg.hash(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quick(schemes: Vec<Scheme>) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.experiment.schemes = schemes;
        cfg.experiment.duration_s = 0.02;
        cfg.experiment.visibility_counts = 0.0;
        cfg.sweep = SweepSection {
            start_mw: 1.0,
            stop_mw: 3.0,
            step_mw: 1.0,
        };
        cfg
    }

    #[test]
    fn sweep_points() {
        let s = SweepSection {
            start_mw: 1.0,
            stop_mw: 13.0,
            step_mw: 3.0,
        };
        assert_eq!(s.points(), vec![1.0, 4.0, 7.0, 10.0, 13.0]);
        let s = SweepSection {
            start_mw: 0.1,
            stop_mw: 0.3,
            step_mw: 0.1,
        };
        assert_eq!(s.points().len(), 3);
    }

    #[test]
    fn config_round_trip_and_errors() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            [experiment]
            schemes = ["present", "conventional"]
            seeds = [3, 4]
            duration_s = 0.5
            rate_formula = "asymptotic_two_basis"
            [sweep]
            start_mw = 2.0
            stop_mw = 6.0
            step_mw = 2.0
            [detector]
            preset = "paper-like"
            bs_excess_loss = 0.0
            "#,
        )
        .unwrap();
        assert_eq!(cfg.experiment.seeds, vec![3, 4]);
        assert_eq!(cfg.experiment.rate_formula, RateFormula::AsymptoticTwoBasis);
        assert_eq!(cfg.detector.resolve().unwrap().bs_excess_loss, 0.0);
        assert_eq!(cfg.detector.resolve().unwrap().efficiency, 0.965);
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.hash().len(), 64);

        for bad in [
            "[sweep]\nstep_mw = 0.0",
            "[sweep]\nstart_mw = 5.0\nstop_mw = 1.0",
            "[experiment]\nduration_s = 0.0",
            "[experiment]\nunknown = 1",
            "[detector]\npreset = \"nope\"",
            "[protocol]\nsample_fraction = 1.5",
        ] {
            assert!(matches!(ExperimentConfig::from_toml(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn ideal_point_row() {
        let cfg = quick(vec![Scheme::Present]);
        let out = run_point(&cfg, Scheme::Present, 1.0, 7).unwrap();
        assert_eq!(out.row.qber, 0.0);
        assert_eq!(out.row.aborted, None);
        assert!(out.row.final_key_bits > 0);
        assert_eq!(out.report.sifted_bits, out.matrix.sifted());
        let (z, x) = (out.row.z_count as f64, out.row.x_count as f64);
        let n = z + x;
        assert!((z / n - 0.5).abs() <= 3.0 * (0.25 / n).sqrt());
    }

    #[test]
    fn experiment_is_ordered_and_deterministic() {
        let cfg = quick(vec![Scheme::Present, Scheme::Conventional]);
        let rows = run_experiment(&cfg).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].scheme, Scheme::Present);
        assert_eq!(rows[1].scheme, Scheme::Conventional);
        assert_eq!(rows[2].pump_mw, 2.0);
        let csv = sweep_csv(&cfg, &rows);
        assert_eq!(csv, sweep_csv(&cfg, &run_experiment(&cfg).unwrap()));
        assert!(csv.starts_with("# bbm92 sweep schema v1\n# tool_version="));
        assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 7);
    }

    #[test]
    fn comparison_requires_both_schemes() {
        assert!(compare_schemes(&quick(vec![Scheme::Present])).is_err());
        let rows = run_experiment(&quick(vec![Scheme::Present, Scheme::Conventional])).unwrap();
        let cmp = compare_rows(&rows).unwrap();
        assert_eq!(cmp.points.len(), 3);
        assert_eq!(cmp.fits.len(), 2);
        let mut uneven = rows.clone();
        uneven.retain(|r| !(r.scheme == Scheme::Conventional && r.pump_mw == 3.0));
        assert!(compare_rows(&uneven).is_err());
    }

    #[test]
    fn linear_fit_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let f = linear_fit(&xs, &[3.0, 5.0, 7.0, 9.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12 && f.stderr < 1e-12);
        assert_eq!(linear_fit(&xs, &[4.0; 4]).unwrap().slope, 0.0);
        assert!(linear_fit(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(linear_fit(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn io_errors_name_the_file() {
        let err = ExperimentConfig::load("/nonexistent/dir/cfg.toml").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/cfg.toml"), "{err}");
    }

    proptest! {
        #[test]
        fn fit_recovers_lines(a in -10.0f64..10.0, b in -10.0f64..10.0, n in 3usize..30) {
            let xs: Vec<f64> = (0..n).map(|i| i as f64 * 0.5).collect();
            let ys: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let f = linear_fit(&xs, &ys).unwrap();
            prop_assert!((f.slope - a).abs() < 1e-9);
            prop_assert!((f.intercept - b).abs() < 1e-9);
        }
    }
}
