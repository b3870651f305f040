//! Experiment drivers: HOM delay scans, the CNOT truth table and
//! Mach-Zehnder fringe scans, each in analytic and Monte Carlo form.
//!
//! Scan points run in parallel. Point `k` draws only from substream `k` of
//! the master seed and results are collected in point order, so output is
//! independent of scheduling.

use std::f64::consts::TAU;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuits::{
    build_cnot, build_hom, build_mzi, postselect_logical_distribution, to_unitary,
};
use crate::detector::{apply_detector, preset, DetectorModel};
use crate::error::{domain, Error, Result};
use crate::fit::{levenberg_marquardt, linear_least_squares};
use crate::fock::{partially_distinguishable_distribution, FockState, ModeUnitary, OverlapModel};
use crate::seeding::{child, substream, SimRng};
use crate::tcspc::{
    count_coincidences, delayed_window_accidentals, generate_pair_arrivals,
    generate_unpaired_arrivals, route_pairs, route_singles, Estimate, RoutingTable, SourceModel,
};
use crate::timestamps::{TimestampStream, PS_PER_S};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Expected counts computed in closed form.
    Analytic,
    /// Counts from the full event-level pipeline.
    #[serde(rename = "mc")]
    MonteCarlo,
}

/// Calibrated defaults that reproduce the reference measurements.
pub mod calibration {
    /// Photon survival through the chip, input plus output facets.
    pub const COUPLING_EFFICIENCY: f64 = 0.7;
    /// Off-dip true coincidence rate targeted with the Si SPAD pair.
    pub const SI_SPAD_OFF_DIP_RATE_HZ: f64 = 275.0;
    pub const SI_SPAD_EFFICIENCY: f64 = 0.45;
    /// Uncorrelated photons per arm at the chip input. Sets the singles rates
    /// so that the SSPD accidental floor at a 1 ns window is about 0.01 Hz.
    pub const UNPAIRED_RATE_HZ: f64 = 40_000.0;
    /// Wavepacket overlap ceiling seen in the HOM dip.
    pub const HOM_MAX_OVERLAP: f64 = 0.926;
    /// Wavepacket overlap inside the Mach-Zehnder: contrast (1 + I)/(3 − I) = 0.818.
    pub const FRINGE_OVERLAP: f64 = 0.80;
    /// Overlap at which the analytic CNOT logical fidelity is 0.904.
    pub const CNOT_OVERLAP: f64 = 0.881_188;
    pub const COHERENCE_TIME_PS: f64 = 1.0;
    pub const SSPD_WINDOW_PS: u64 = 1_000;
    /// Wider window for the Si SPAD pair; with the shared source this puts
    /// its accidental floor near 6 Hz.
    pub const SI_SPAD_WINDOW_PS: u64 = 30_000;
    pub const SSPD_ACQUISITION_S: f64 = 60.0;
    pub const SI_SPAD_ACQUISITION_S: f64 = 40.0;
    pub const FRINGE_ACQUISITION_S: f64 = 20.0;

    /// Pair rate giving [`SI_SPAD_OFF_DIP_RATE_HZ`] true coincidences off the
    /// dip: `R · c² · ½ · η²`.
    pub fn pair_rate_hz() -> f64 {
        SI_SPAD_OFF_DIP_RATE_HZ
            / (COUPLING_EFFICIENCY
                * COUPLING_EFFICIENCY
                * 0.5
                * SI_SPAD_EFFICIENCY
                * SI_SPAD_EFFICIENCY)
    }
}

/// The calibrated two-arm source with overlap ceiling `max_overlap`.
pub fn calibrated_source(max_overlap: f64) -> SourceModel {
    SourceModel {
        pair_rate_hz: calibration::pair_rate_hz(),
        unpaired_rate_hz: calibration::UNPAIRED_RATE_HZ,
        coupling_efficiency: calibration::COUPLING_EFFICIENCY,
        overlap: OverlapModel {
            max_overlap,
            coherence_time_ps: calibration::COHERENCE_TIME_PS,
        },
    }
}

/// Evenly spaced grid including both ends.
pub fn linspace(start: f64, stop: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![start],
        n => (0..n)
            .map(|k| start + (stop - start) * k as f64 / (n - 1) as f64)
            .collect(),
    }
}

fn check_strictly_increasing(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::Config(format!("{what} must be finite")));
    }
    if xs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!("{what} must be strictly increasing")));
    }
    Ok(())
}

fn check_acquisition(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Config(format!(
            "acquisition time must be positive, got {t}"
        )));
    }
    Ok(())
}

/// Offsets used for the delayed-window accidental estimate.
pub fn accidental_offsets_ps(window_ps: u64) -> Vec<i64> {
    let step = (20 * window_ps).max(1_000_000) as i64;
    (1..=5).flat_map(|k| [k * step, -k * step]).collect()
}

/// Fraction of true coincidences inside the window, for Gaussian jitter on
/// both channels.
pub fn window_efficiency(window_ps: u64, d1: &DetectorModel, d2: &DetectorModel) -> f64 {
    let s1 = d1.jitter_sigma_ps();
    let s2 = d2.jitter_sigma_ps();
    let sigma = (s1 * s1 + s2 * s2).sqrt();
    libm::erf(window_ps as f64 / 2.0 / (sigma * std::f64::consts::SQRT_2))
}

/// Counts and accidental estimates from one Monte Carlo acquisition.
struct PointCounts {
    coincidences: u64,
    accidentals: f64,
}

/// Source → circuit routing → detectors for one acquisition of length `t_s`.
fn simulate_two_port(
    src: &SourceModel,
    table: &RoutingTable,
    detectors: &[DetectorModel; 2],
    t_s: f64,
    rng: &mut SimRng,
) -> Result<[TimestampStream; 2]> {
    let mut src_rng = child(rng);
    let mut route_rng = child(rng);
    let mut det_rngs = [child(rng), child(rng)];
    let (pa, pb) = generate_pair_arrivals(src, t_s, &mut src_rng)?;
    let (ua, ub) = generate_unpaired_arrivals(src, t_s, &mut src_rng)?;
    let (p1, p2) = route_pairs(&pa, &pb, table, &mut route_rng)?;
    let (s1, s2) = route_singles(&ua, &ub, table, &mut route_rng)?;
    let c1 = apply_detector(&p1.merge(&s1), &detectors[0], t_s, &mut det_rngs[0])?;
    let c2 = apply_detector(&p2.merge(&s2), &detectors[1], t_s, &mut det_rngs[1])?;
    Ok([c1, c2])
}

fn count_point(clicks: &[TimestampStream; 2], window_ps: u64, t_s: f64) -> Result<PointCounts> {
    let coincidences = count_coincidences(&clicks[0], &clicks[1], window_ps, 0, t_s).count;
    let offsets = accidental_offsets_ps(window_ps);
    let mut acc = 0u64;
    for &off in &offsets {
        acc += delayed_window_accidentals(&clicks[0], &clicks[1], window_ps, off, t_s)?.count;
    }
    Ok(PointCounts {
        coincidences,
        accidentals: acc as f64 / offsets.len() as f64,
    })
}

/// Expected singles rate at each detector for the two-arm source routed by `u`.
fn singles_rates(
    src: &SourceModel,
    u: &ModeUnitary,
    inputs: &[usize],
    outputs: (usize, usize),
    detectors: &[DetectorModel; 2],
) -> [f64; 2] {
    let flux_per_arm = (src.pair_rate_hz + src.unpaired_rate_hz) * src.coupling_efficiency;
    let route = |o: usize| {
        inputs
            .iter()
            .map(|&i| u.single_photon_prob(o, i))
            .sum::<f64>()
    };
    [
        detectors[0].efficiency * flux_per_arm * route(outputs.0) + detectors[0].dark_hz,
        detectors[1].efficiency * flux_per_arm * route(outputs.1) + detectors[1].dark_hz,
    ]
}

/// Expected coincidence and accidental rates for a two-photon input routed by `table`.
fn expected_coincidence_rate(
    src: &SourceModel,
    table: &RoutingTable,
    singles: [f64; 2],
    detectors: &[DetectorModel; 2],
    window_ps: u64,
) -> (f64, f64) {
    let c = src.coupling_efficiency;
    let true_rate = src.pair_rate_hz
        * c
        * c
        * table.pair.split
        * detectors[0].efficiency
        * detectors[1].efficiency
        * window_efficiency(window_ps, &detectors[0], &detectors[1]);
    let acc = singles[0] * singles[1] * window_ps as f64 / PS_PER_S;
    (true_rate + acc, acc)
}

// ---------------------------------------------------------------------------
// HOM dip
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomScanConfig {
    pub delays_ps: Vec<f64>,
    pub acquisition_s: f64,
    pub source: SourceModel,
    pub detectors: [DetectorModel; 2],
    pub window_ps: u64,
    pub mode: Mode,
    pub seed: u64,
}

impl HomScanConfig {
    /// Calibrated scan for a pair of identical `detector` presets.
    pub fn calibrated(detector: &str) -> Result<Self> {
        let d = preset(detector)?;
        let (window_ps, acquisition_s) = match detector {
            "si_spad" => (
                calibration::SI_SPAD_WINDOW_PS,
                calibration::SI_SPAD_ACQUISITION_S,
            ),
            _ => (calibration::SSPD_WINDOW_PS, calibration::SSPD_ACQUISITION_S),
        };
        Ok(HomScanConfig {
            delays_ps: linspace(-3.0, 3.0, 13),
            acquisition_s,
            source: calibrated_source(calibration::HOM_MAX_OVERLAP),
            detectors: [d.clone(), d],
            window_ps,
            mode: Mode::MonteCarlo,
            seed: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.delays_ps.len() < 5 {
            return Err(Error::Config(format!(
                "a HOM scan needs at least 5 delay points, got {}",
                self.delays_ps.len()
            )));
        }
        check_strictly_increasing(&self.delays_ps, "delays")?;
        check_acquisition(self.acquisition_s)?;
        if self.window_ps == 0 {
            return Err(Error::Config("coincidence window must be positive".into()));
        }
        self.source.validate()?;
        for d in &self.detectors {
            d.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DipPoint {
    pub delay_ps: f64,
    pub count: f64,
    /// √count.
    pub error: f64,
    /// Accidental coincidences contained in `count` (estimated).
    pub accidentals: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DipCurve {
    pub points: Vec<DipPoint>,
    pub acquisition_s: f64,
    pub detector_label: String,
    pub window_ps: u64,
}

impl DipCurve {
    /// Builds a curve from `(delay, count)` pairs with Poisson errors.
    pub fn from_counts(points: &[(f64, f64)], acquisition_s: f64, label: &str) -> Self {
        DipCurve {
            points: points
                .iter()
                .map(|&(delay_ps, count)| DipPoint {
                    delay_ps,
                    count,
                    error: count.sqrt(),
                    accidentals: 0.0,
                })
                .collect(),
            acquisition_s,
            detector_label: label.to_string(),
            window_ps: 0,
        }
    }

    /// Mean accidental count per point.
    pub fn mean_accidentals(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        self.points.iter().map(|p| p.accidentals).sum::<f64>() / self.points.len() as f64
    }

    /// The curve with the mean accidental level subtracted from every point.
    /// Errors keep the raw Poisson values.
    pub fn accidental_subtracted(&self) -> DipCurve {
        let acc = self.mean_accidentals();
        let mut out = self.clone();
        for p in &mut out.points {
            p.count -= acc;
            p.accidentals = 0.0;
        }
        out
    }

    /// `delay_ps,count,error,duration_s`
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["delay_ps", "count", "error", "duration_s"])?;
        for p in &self.points {
            out.write_record([
                p.delay_ps.to_string(),
                p.count.to_string(),
                p.error.to_string(),
                self.acquisition_s.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn run_hom_scan(cfg: &HomScanConfig) -> Result<DipCurve> {
    cfg.validate()?;
    let u = to_unitary(&build_hom())?;
    let t = cfg.acquisition_s;
    let points = cfg
        .delays_ps
        .par_iter()
        .enumerate()
        .map(|(k, &delay)| -> Result<DipPoint> {
            let table =
                RoutingTable::from_circuit(&u, (0, 1), (0, 1), cfg.source.overlap.overlap(delay))?;
            let (count, accidentals) = match cfg.mode {
                Mode::Analytic => {
                    let singles = singles_rates(&cfg.source, &u, &[0, 1], (0, 1), &cfg.detectors);
                    let (rate, acc) = expected_coincidence_rate(
                        &cfg.source,
                        &table,
                        singles,
                        &cfg.detectors,
                        cfg.window_ps,
                    );
                    (rate * t, acc * t)
                }
                Mode::MonteCarlo => {
                    let mut rng = substream(cfg.seed, k as u64);
                    let clicks =
                        simulate_two_port(&cfg.source, &table, &cfg.detectors, t, &mut rng)?;
                    let c = count_point(&clicks, cfg.window_ps, t)?;
                    (c.coincidences as f64, c.accidentals)
                }
            };
            Ok(DipPoint {
                delay_ps: delay,
                count,
                error: count.sqrt(),
                accidentals,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DipCurve {
        points,
        acquisition_s: t,
        detector_label: cfg.detectors[0].label.clone(),
        window_ps: cfg.window_ps,
    })
}

/// Gaussian dip parameters, `N(τ) = B·(1 − V·exp(−((τ − τ₀)/w)²))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DipFit {
    pub visibility: Estimate,
    pub center_ps: Estimate,
    pub width_ps: Estimate,
    /// Off-dip counts per point.
    pub baseline: Estimate,
    pub chi2: f64,
    pub dof: usize,
}

/// Poisson weights with zero-count points given a one-count uncertainty.
fn poisson_sigmas(counts: impl Iterator<Item = f64>) -> Vec<f64> {
    counts.map(|n| n.max(1.0).sqrt()).collect()
}

pub fn fit_dip(curve: &DipCurve) -> Result<DipFit> {
    let n = curve.points.len();
    if n < 5 {
        return Err(Error::Fit(format!(
            "dip fit needs at least 5 points, got {n}"
        )));
    }
    let xs: Vec<f64> = curve.points.iter().map(|p| p.delay_ps).collect();
    let ys: Vec<f64> = curve.points.iter().map(|p| p.count).collect();
    let max = ys.iter().cloned().fold(f64::MIN, f64::max);
    if !(max > 0.0) {
        return Err(Error::Fit("dip fit needs a positive baseline".into()));
    }
    let sig: Vec<f64> = curve
        .points
        .iter()
        .map(|p| if p.error > 0.0 { p.error } else { 1.0 })
        .collect();

    let b0 = (ys[0] + ys[n - 1]) / 2.0;
    let b0 = if b0 > 0.0 { b0 } else { max };
    let (imin, &ymin) = ys
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    let v0 = (1.0 - ymin / b0).clamp(0.0, 1.0);
    let half = b0 * (1.0 - v0 / 2.0);
    let below: Vec<f64> = xs
        .iter()
        .zip(&ys)
        .filter(|(_, &y)| y < half)
        .map(|(&x, _)| x)
        .collect();
    let spacing = (xs[n - 1] - xs[0]) / (n - 1) as f64;
    let w0 = match (below.first(), below.last()) {
        (Some(a), Some(b)) if b > a => (b - a + spacing) / (2.0 * (2f64.ln()).sqrt()),
        _ => spacing,
    };

    let model = |x: f64, p: &[f64], g: &mut [f64]| {
        let (b, v, c, w) = (p[0], p[1], p[2], p[3]);
        let u = (x - c) / w;
        let e = (-u * u).exp();
        g[0] = 1.0 - v * e;
        g[1] = -b * e;
        g[2] = -b * v * e * 2.0 * u / w;
        g[3] = -b * v * e * 2.0 * u * u / w;
        b * (1.0 - v * e)
    };
    let fit = levenberg_marquardt(&xs, &ys, &sig, &[b0, v0, xs[imin], w0], 1000, model)
        .map_err(|e| Error::Fit(format!("dip fit: {e}")))?;
    let est = |k: usize| Estimate {
        value: fit.params[k],
        error: fit.errors[k],
    };
    let mut width = est(3);
    width.value = width.value.abs();
    Ok(DipFit {
        baseline: est(0),
        visibility: est(1),
        center_ps: est(2),
        width_ps: width,
        chi2: fit.chi2,
        dof: fit.dof,
    })
}

// ---------------------------------------------------------------------------
// CNOT truth table
// ---------------------------------------------------------------------------

/// Rows are inputs |00⟩..|11⟩, columns outputs, each row a conditional distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthTable {
    pub rows: [[f64; 4]; 4],
}

/// Output index an ideal CNOT produces for each input.
pub const CNOT_IDEAL: [usize; 4] = [0, 1, 3, 2];

pub const LOGICAL_LABELS: [&str; 4] = ["00", "01", "10", "11"];

/// Mean probability of the ideal output over the four basis inputs.
pub fn logical_fidelity(t: &TruthTable) -> Result<f64> {
    for (i, row) in t.rows.iter().enumerate() {
        if row.iter().any(|p| !(0.0..=1.0 + 1e-9).contains(p)) {
            return domain(format!("truth table row {i} has an entry outside [0, 1]"));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return domain(format!("truth table row {i} sums to {s}, not 1"));
        }
    }
    Ok(CNOT_IDEAL
        .iter()
        .enumerate()
        .map(|(i, &j)| t.rows[i][j])
        .sum::<f64>()
        / 4.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnotConfig {
    /// Pair wavepacket overlap I.
    pub overlap: f64,
    pub mode: Mode,
    pub detector: DetectorModel,
    /// Target number of post-selected events per input in Monte Carlo mode.
    pub post_selected_events: u64,
    pub window_ps: u64,
    pub seed: u64,
}

impl CnotConfig {
    pub fn ideal() -> Self {
        CnotConfig {
            overlap: 1.0,
            mode: Mode::Analytic,
            detector: preset("sspd").expect("built-in preset"),
            post_selected_events: 1000,
            window_ps: calibration::SSPD_WINDOW_PS,
            seed: 0,
        }
    }

    pub fn calibrated(detector: &str) -> Result<Self> {
        Ok(CnotConfig {
            overlap: calibration::CNOT_OVERLAP,
            mode: Mode::MonteCarlo,
            detector: preset(detector)?,
            ..CnotConfig::ideal()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::Config(format!(
                "overlap {} outside [0, 1]",
                self.overlap
            )));
        }
        if self.post_selected_events == 0 {
            return Err(Error::Config(
                "post_selected_events must be positive".into(),
            ));
        }
        self.detector.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnotResult {
    pub table: TruthTable,
    /// Post-selection probability per input, before detector losses.
    pub success_probabilities: [f64; 4],
    pub fidelity: f64,
    /// Post-selected events per input (Monte Carlo) .
    pub events: [u64; 4],
    pub shots: [u64; 4],
    /// Inputs for which nothing passed post-selection.
    pub degenerate: [bool; 4],
}

impl CnotResult {
    /// `input,p00,p01,p10,p11,success_probability,events`
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "input",
            "p00",
            "p01",
            "p10",
            "p11",
            "success_probability",
            "events",
        ])?;
        for (i, label) in LOGICAL_LABELS.iter().enumerate() {
            let mut rec = vec![label.to_string()];
            rec.extend(self.table.rows[i].iter().map(|p| p.to_string()));
            rec.push(self.success_probabilities[i].to_string());
            rec.push(self.events[i].to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Analytic truth table of the CNOT for pair overlap `overlap`.
pub fn cnot_analytic(overlap: f64) -> Result<(TruthTable, [f64; 4], [bool; 4])> {
    let (spec, enc) = build_cnot();
    let u = to_unitary(&spec)?;
    let mut rows = [[0.0; 4]; 4];
    let mut success = [0.0; 4];
    let mut degenerate = [false; 4];
    for k in 0..4 {
        let dist = partially_distinguishable_distribution(&u, &enc.basis_input(k)?, overlap)?;
        let l = postselect_logical_distribution(&dist, &enc)?;
        rows[k] = l.probabilities;
        success[k] = l.success_probability;
        degenerate[k] = l.degenerate;
    }
    Ok((TruthTable { rows }, success, degenerate))
}

pub fn run_cnot_truth_table(cfg: &CnotConfig) -> Result<CnotResult> {
    cfg.validate()?;
    let (analytic, success, degenerate) = cnot_analytic(cfg.overlap)?;
    match cfg.mode {
        Mode::Analytic => {
            let fidelity = if degenerate.iter().any(|&d| d) {
                f64::NAN
            } else {
                logical_fidelity(&analytic)?
            };
            Ok(CnotResult {
                table: analytic,
                success_probabilities: success,
                fidelity,
                events: [0; 4],
                shots: [0; 4],
                degenerate,
            })
        }
        Mode::MonteCarlo => cnot_monte_carlo(cfg, success),
    }
}

/// Shot-by-shot sampling of the post-selected gate with threshold detectors
/// on every mode.
fn cnot_monte_carlo(cfg: &CnotConfig, success: [f64; 4]) -> Result<CnotResult> {
    let (spec, enc) = build_cnot();
    let u = to_unitary(&spec)?;
    let eta = cfg.detector.efficiency;
    let p_dark = (cfg.detector.dark_hz * cfg.window_ps as f64 / PS_PER_S).min(1.0);
    let rows = (0..4usize)
        .into_par_iter()
        .map(|k| -> Result<([f64; 4], u64, u64)> {
            let dist =
                partially_distinguishable_distribution(&u, &enc.basis_input(k)?, cfg.overlap)?;
            let states: Vec<FockState> = dist.keys().cloned().collect();
            let weights: Vec<f64> = dist.values().map(|p| p.max(0.0)).collect();
            let sampler = WeightedAliasIndex::new(weights)
                .map_err(|e| Error::Domain(format!("outcome distribution: {e}")))?;
            let per_shot = success[k] * eta * eta;
            if !(per_shot > 0.0) {
                return Ok(([0.0; 4], 0, 0));
            }
            let shots = (cfg.post_selected_events as f64 / per_shot).ceil() as u64;
            let mut rng = substream(cfg.seed, k as u64);
            let mut counts = [0u64; 4];
            let mut clicks = vec![0u32; enc.mode_count];
            for _ in 0..shots {
                let state = &states[sampler.sample(&mut rng)];
                for (m, &n) in state.occupations().iter().enumerate() {
                    let photon_click = n > 0 && rng.random_bool(1.0 - (1.0 - eta).powi(n as i32));
                    let dark_click = p_dark > 0.0 && rng.random_bool(p_dark);
                    clicks[m] = u32::from(photon_click || dark_click);
                }
                let pattern = FockState::new(clicks.clone())?;
                if let Some(j) = enc.decode(&pattern) {
                    counts[j] += 1;
                }
            }
            let total: u64 = counts.iter().sum();
            let mut row = [0.0; 4];
            if total > 0 {
                for j in 0..4 {
                    row[j] = counts[j] as f64 / total as f64;
                }
            }
            Ok((row, total, shots))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut table = TruthTable {
        rows: [[0.0; 4]; 4],
    };
    let mut events = [0; 4];
    let mut shots = [0; 4];
    let mut degenerate = [false; 4];
    for (k, (row, n, s)) in rows.into_iter().enumerate() {
        table.rows[k] = row;
        events[k] = n;
        shots[k] = s;
        degenerate[k] = n == 0;
    }
    let fidelity = if degenerate.iter().any(|&d| d) {
        f64::NAN
    } else {
        logical_fidelity(&table)?
    };
    Ok(CnotResult {
        table,
        success_probabilities: success,
        fidelity,
        events,
        shots,
        degenerate,
    })
}

/// Overlap at which the analytic logical fidelity equals `target`, by bisection.
pub fn calibrate_cnot_overlap(target: f64) -> Result<f64> {
    let f = |i: f64| -> Result<f64> { logical_fidelity(&cnot_analytic(i)?.0) };
    let (f_lo, f_hi) = (f(0.0)?, f(1.0)?);
    if !(f_lo <= target && target <= f_hi) {
        return domain(format!(
            "target fidelity {target} outside reachable range [{f_lo:.4}, {f_hi:.4}]"
        ));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if f(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

// ---------------------------------------------------------------------------
// Mach-Zehnder fringes
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FringeKind {
    /// One photon into mode 0; singles on the mode-0 detector.
    SinglePhoton,
    /// One photon into each mode; cross-output coincidences.
    TwoPhoton,
}

impl FringeKind {
    /// Angular frequency of the fringe in φ.
    pub fn harmonic(self) -> f64 {
        match self {
            FringeKind::SinglePhoton => 1.0,
            FringeKind::TwoPhoton => 2.0,
        }
    }

    pub fn period(self) -> f64 {
        TAU / self.harmonic()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FringeConfig {
    pub phases_rad: Vec<f64>,
    /// Heater voltages the phases came from, if the scan was set in volts.
    pub voltages_v: Option<Vec<f64>>,
    pub kind: FringeKind,
    pub acquisition_s: f64,
    pub source: SourceModel,
    pub detectors: [DetectorModel; 2],
    pub window_ps: u64,
    pub mode: Mode,
    pub seed: u64,
}

impl FringeConfig {
    pub fn calibrated(kind: FringeKind, detector: &str) -> Result<Self> {
        let d = preset(detector)?;
        let n = 32;
        Ok(FringeConfig {
            phases_rad: (0..n).map(|k| TAU * k as f64 / n as f64).collect(),
            voltages_v: None,
            kind,
            acquisition_s: calibration::FRINGE_ACQUISITION_S,
            source: calibrated_source(calibration::FRINGE_OVERLAP),
            detectors: [d.clone(), d],
            window_ps: calibration::SSPD_WINDOW_PS,
            mode: Mode::MonteCarlo,
            seed: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.phases_rad.len();
        if n < 2 {
            return Err(Error::Config(
                "a fringe scan needs at least 2 points".into(),
            ));
        }
        check_strictly_increasing(&self.phases_rad, "phases")?;
        if let Some(v) = &self.voltages_v {
            if v.len() != n {
                return Err(Error::Config("voltages and phases differ in length".into()));
            }
        }
        let per_period = n as f64 * self.kind.period() / coverage(&self.phases_rad);
        if per_period < 8.0 - 1e-9 {
            return Err(Error::Config(format!(
                "fringe scan has {per_period:.1} points per period, needs at least 8"
            )));
        }
        check_acquisition(self.acquisition_s)?;
        if self.window_ps == 0 {
            return Err(Error::Config("coincidence window must be positive".into()));
        }
        self.source.validate()?;
        for d in &self.detectors {
            d.validate()?;
        }
        Ok(())
    }
}

/// Phase range covered by a grid, counting half a spacing past each end.
fn coverage(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let span = xs[n - 1] - xs[0];
    span * n as f64 / (n - 1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FringePoint {
    pub phase_rad: f64,
    pub voltage_v: Option<f64>,
    pub count: f64,
    /// √count.
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FringeCurve {
    pub kind: FringeKind,
    pub points: Vec<FringePoint>,
    pub acquisition_s: f64,
    pub detector_label: String,
}

impl FringeCurve {
    pub fn from_counts(kind: FringeKind, points: &[(f64, f64)], acquisition_s: f64) -> Self {
        FringeCurve {
            kind,
            points: points
                .iter()
                .map(|&(phase_rad, count)| FringePoint {
                    phase_rad,
                    voltage_v: None,
                    count,
                    error: count.sqrt(),
                })
                .collect(),
            acquisition_s,
            detector_label: String::new(),
        }
    }

    /// `phase_rad,count,error,duration_s`, with a leading `voltage_v` column
    /// when the scan was set in volts.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let volts = self.points.iter().all(|p| p.voltage_v.is_some()) && !self.points.is_empty();
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["phase_rad", "count", "error", "duration_s"];
        if volts {
            header.insert(0, "voltage_v");
        }
        out.write_record(&header)?;
        for p in &self.points {
            let mut rec = vec![
                p.phase_rad.to_string(),
                p.count.to_string(),
                p.error.to_string(),
                self.acquisition_s.to_string(),
            ];
            if let (true, Some(v)) = (volts, p.voltage_v) {
                rec.insert(0, v.to_string());
            }
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Heater voltages from a CSV with a `voltage_v` column.
pub fn read_voltages_csv<R: Read>(r: R) -> Result<Vec<f64>> {
    let mut rd = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(r);
    let col = rd
        .headers()?
        .iter()
        .position(|h| h == "voltage_v")
        .ok_or_else(|| Error::Config("voltage CSV has no `voltage_v` column".into()))?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let field = rec.get(col).unwrap_or("");
        let v: f64 = field
            .parse()
            .map_err(|_| Error::Config(format!("bad voltage `{field}`")))?;
        out.push(v);
    }
    Ok(out)
}

pub fn run_fringe_scan(cfg: &FringeConfig) -> Result<FringeCurve> {
    cfg.validate()?;
    let t = cfg.acquisition_s;
    let i_max = cfg.source.overlap.max_overlap;
    let points = cfg
        .phases_rad
        .par_iter()
        .enumerate()
        .map(|(k, &phi)| -> Result<FringePoint> {
            let u = to_unitary(&build_mzi(phi))?;
            let table = RoutingTable::from_circuit(&u, (0, 1), (0, 1), i_max)?;
            let count = match (cfg.mode, cfg.kind) {
                (Mode::Analytic, FringeKind::TwoPhoton) => {
                    let singles = singles_rates(&cfg.source, &u, &[0, 1], (0, 1), &cfg.detectors);
                    expected_coincidence_rate(
                        &cfg.source,
                        &table,
                        singles,
                        &cfg.detectors,
                        cfg.window_ps,
                    )
                    .0 * t
                }
                (Mode::Analytic, FringeKind::SinglePhoton) => {
                    let flux = (cfg.source.pair_rate_hz + cfg.source.unpaired_rate_hz)
                        * cfg.source.coupling_efficiency;
                    let d = &cfg.detectors[0];
                    (d.efficiency * flux * u.single_photon_prob(0, 0) + d.dark_hz) * t
                }
                (Mode::MonteCarlo, FringeKind::TwoPhoton) => {
                    let mut rng = substream(cfg.seed, k as u64);
                    let clicks =
                        simulate_two_port(&cfg.source, &table, &cfg.detectors, t, &mut rng)?;
                    count_coincidences(&clicks[0], &clicks[1], cfg.window_ps, 0, t).count as f64
                }
                (Mode::MonteCarlo, FringeKind::SinglePhoton) => {
                    let mut rng = substream(cfg.seed, k as u64);
                    let mut src_rng = child(&mut rng);
                    let mut route_rng = child(&mut rng);
                    let mut det_rng = child(&mut rng);
                    // Arm B is blocked; only arm A photons enter the chip.
                    let (pa, _) = generate_pair_arrivals(&cfg.source, t, &mut src_rng)?;
                    let (ua, _) = generate_unpaired_arrivals(&cfg.source, t, &mut src_rng)?;
                    let none = TimestampStream::empty("blocked");
                    let arm_a = pa.merge(&ua);
                    let (d1, _) = route_singles(&arm_a, &none, &table, &mut route_rng)?;
                    apply_detector(&d1, &cfg.detectors[0], t, &mut det_rng)?.len() as f64
                }
            };
            Ok(FringePoint {
                phase_rad: phi,
                voltage_v: cfg.voltages_v.as_ref().map(|v| v[k]),
                count,
                error: count.sqrt(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FringeCurve {
        kind: cfg.kind,
        points,
        acquisition_s: t,
        detector_label: cfg.detectors[0].label.clone(),
    })
}

/// Sinusoid fit `N(φ) = B·(1 + C·cos(kφ + φ₀))` at the mode's fixed harmonic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FringeFit {
    pub contrast: Estimate,
    pub baseline: Estimate,
    pub phase_offset_rad: f64,
    pub chi2: f64,
    pub dof: usize,
}

fn fringe_data(curve: &FringeCurve) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let xs: Vec<f64> = curve.points.iter().map(|p| p.phase_rad).collect();
    if xs.len() < 4 {
        return Err(Error::Fit("fringe fit needs at least 4 points".into()));
    }
    if coverage(&xs) < curve.kind.period() - 1e-9 {
        return Err(Error::Fit(format!(
            "fringe scan covers {:.3} rad, less than one period ({:.3} rad)",
            coverage(&xs),
            curve.kind.period()
        )));
    }
    let ys: Vec<f64> = curve.points.iter().map(|p| p.count).collect();
    let sig = poisson_sigmas(ys.iter().copied());
    Ok((xs, ys, sig))
}

pub fn fringe_contrast(curve: &FringeCurve) -> Result<FringeFit> {
    let (xs, ys, sig) = fringe_data(curve)?;
    let k = curve.kind.harmonic();
    let fit = linear_least_squares(
        &xs,
        &ys,
        &sig,
        &[&|_| 1.0, &|x: f64| (k * x).cos(), &|x: f64| (k * x).sin()],
    )
    .map_err(|e| Error::Fit(format!("fringe fit: {e}")))?;
    let (b, a, s) = (fit.params[0], fit.params[1], fit.params[2]);
    if !(b > 0.0) {
        return Err(Error::Fit("fringe fit gave a non-positive baseline".into()));
    }
    let r = (a * a + s * s).sqrt();
    let cov = &fit.covariance;
    let c = r / b;
    let err = if r > 0.0 {
        let g = [-r / (b * b), a / (r * b), s / (r * b)];
        let mut var = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                var += g[i] * cov[(i, j)] * g[j];
            }
        }
        var.max(0.0).sqrt()
    } else {
        ((cov[(1, 1)] + cov[(2, 2)]) / 2.0).sqrt() / b
    };
    // a·cos + s·sin = r·cos(kφ + φ₀) with φ₀ = atan2(−s, a).
    Ok(FringeFit {
        contrast: Estimate {
            value: c,
            error: err,
        },
        baseline: Estimate {
            value: b,
            error: fit.errors[0],
        },
        phase_offset_rad: (-s).atan2(a),
        chi2: fit.chi2,
        dof: fit.dof,
    })
}

/// Fringe period from a sinusoid fit with free frequency.
pub fn fit_fringe_period(curve: &FringeCurve) -> Result<Estimate> {
    let (xs, ys, sig) = fringe_data(curve)?;
    let start = fringe_contrast(curve)?;
    let k0 = curve.kind.harmonic();
    let r0 = start.contrast.value * start.baseline.value;
    let p0 = [
        start.baseline.value,
        r0 * start.phase_offset_rad.cos(),
        -r0 * start.phase_offset_rad.sin(),
        k0,
    ];
    let fit = levenberg_marquardt(&xs, &ys, &sig, &p0, 1000, |x, p, g| {
        let (c, s) = ((p[3] * x).cos(), (p[3] * x).sin());
        g[0] = 1.0;
        g[1] = c;
        g[2] = s;
        g[3] = x * (-p[1] * s + p[2] * c);
        p[0] + p[1] * c + p[2] * s
    })
    .map_err(|e| Error::Fit(format!("fringe period fit: {e}")))?;
    let k = fit.params[3];
    if !(k > 0.0) {
        return Err(Error::Fit(format!(
            "fitted fringe frequency {k} is not positive"
        )));
    }
    Ok(Estimate {
        value: TAU / k,
        error: TAU * fit.errors[3] / (k * k),
    })
}

/// Analytic two-photon coincidence probability through the MZ at overlap `i`.
pub fn mzi_coincidence_prob(phi: f64, i: f64) -> Result<f64> {
    let u = to_unitary(&build_mzi(phi))?;
    Ok(RoutingTable::from_circuit(&u, (0, 1), (0, 1), i)?
        .pair
        .split)
}

/// Analytic contrast of the two-photon fringe for overlap `i`: (1 + I)/(3 − I).
pub fn two_photon_fringe_contrast(i: f64) -> f64 {
    (1.0 + i) / (3.0 - i)
}
