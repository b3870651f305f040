//! Single-photon detector model: efficiency, dark counts, timing jitter and
//! dead time, plus the built-in presets and efficiency-curve tables.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::timestamps::{merge_sorted, quantize, seconds_to_ps, TimestampStream, PS_PER_S};

/// FWHM / σ for a Gaussian.
pub const FWHM_PER_SIGMA: f64 = 2.3548;

/// Jitter draws are truncated at this many standard deviations.
pub const JITTER_CLIP_SIGMAS: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorModel {
    pub label: String,
    /// Detection efficiency η.
    pub efficiency: f64,
    /// Free-running dark count rate D, in Hz.
    pub dark_hz: f64,
    /// FWHM timing jitter Δt, in ps.
    pub jitter_fwhm_ps: f64,
    #[serde(default)]
    pub dead_time_ps: f64,
}

impl DetectorModel {
    pub fn new(
        label: impl Into<String>,
        efficiency: f64,
        dark_hz: f64,
        jitter_fwhm_ps: f64,
        dead_time_ps: f64,
    ) -> Result<Self> {
        let d = DetectorModel {
            label: label.into(),
            efficiency,
            dark_hz,
            jitter_fwhm_ps,
            dead_time_ps,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.efficiency) {
            return domain(format!(
                "{}: efficiency {} outside [0, 1]",
                self.label, self.efficiency
            ));
        }
        if !(self.dark_hz >= 0.0 && self.dark_hz.is_finite()) {
            return domain(format!("{}: dark rate must be >= 0", self.label));
        }
        if !(self.jitter_fwhm_ps > 0.0 && self.jitter_fwhm_ps.is_finite()) {
            return domain(format!("{}: jitter FWHM must be > 0", self.label));
        }
        if !(self.dead_time_ps >= 0.0 && self.dead_time_ps.is_finite()) {
            return domain(format!("{}: dead time must be >= 0", self.label));
        }
        Ok(())
    }

    pub fn jitter_sigma_ps(&self) -> f64 {
        self.jitter_fwhm_ps / FWHM_PER_SIGMA
    }
}

/// Names accepted by [`preset`].
pub const PRESET_NAMES: [&str; 2] = ["sspd", "si_spad"];

/// Built-in detector presets at the 804 nm operating point. The SSPD entry
/// uses its 830 nm characterization.
pub fn preset(name: &str) -> Result<DetectorModel> {
    match name {
        "sspd" => DetectorModel::new("sspd", 0.1, 20.0, 60.0, 0.0),
        "si_spad" => DetectorModel::new("si_spad", 0.45, 200.0, 350.0, 0.0),
        other => Err(Error::Lookup(format!(
            "unknown detector preset `{other}` (known: {})",
            PRESET_NAMES.join(", ")
        ))),
    }
}

/// η / (D · Δt), with Δt in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FigureOfMerit {
    Finite(f64),
    /// Zero dark rate.
    Unbounded,
}

impl FigureOfMerit {
    pub fn value(self) -> f64 {
        match self {
            FigureOfMerit::Finite(v) => v,
            FigureOfMerit::Unbounded => f64::INFINITY,
        }
    }
}

pub fn figure_of_merit(d: &DetectorModel) -> FigureOfMerit {
    if d.dark_hz == 0.0 {
        return FigureOfMerit::Unbounded;
    }
    FigureOfMerit::Finite(d.efficiency / (d.dark_hz * d.jitter_fwhm_ps / PS_PER_S))
}

/// Two-detector coincidence efficiency η².
pub fn eta_squared(d: &DetectorModel) -> f64 {
    d.efficiency * d.efficiency
}

/// Turns photon arrivals into detector clicks over `[0, duration_s]`.
///
/// Each arrival is detected with probability η and displaced by Gaussian
/// jitter (truncated at ±5σ); dark counts are added as a homogeneous Poisson
/// process; clicks are quantized to the card grid; a click is dropped if it
/// falls at or within `dead_time_ps` of the previous accepted click.
pub fn apply_detector<R: Rng + ?Sized>(
    arrivals: &TimestampStream,
    d: &DetectorModel,
    duration_s: f64,
    rng: &mut R,
) -> Result<TimestampStream> {
    d.validate()?;
    if !(duration_s >= 0.0) {
        return domain("duration must be non-negative");
    }
    let times = arrivals.times();
    if let Some(w) = times.windows(2).position(|w| w[1] < w[0]) {
        return domain(format!("arrival stream not sorted at index {}", w + 1));
    }
    let sigma = d.jitter_sigma_ps();
    let mut photon_clicks: Vec<u64> =
        Vec::with_capacity((times.len() as f64 * d.efficiency * 1.1) as usize + 8);
    for &t in times {
        if d.efficiency < 1.0 && !rng.random_bool(d.efficiency) {
            continue;
        }
        let z = loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= JITTER_CLIP_SIGMAS {
                break z;
            }
        };
        photon_clicks.push(quantize(t as f64 + sigma * z));
    }
    photon_clicks.sort_unstable();

    let darks = poisson_times(d.dark_hz, duration_s, rng)
        .into_iter()
        .map(|t| quantize(t as f64))
        .collect::<Vec<_>>();
    let merged = merge_sorted(&photon_clicks, &darks);

    let mut out = Vec::with_capacity(merged.len());
    let mut last: Option<u64> = None;
    for t in merged {
        let blocked = matches!(last, Some(l) if (t - l) as f64 <= d.dead_time_ps);
        if !blocked {
            out.push(t);
            last = Some(t);
        }
    }
    Ok(TimestampStream::from_sorted(d.label.clone(), out))
}

/// Event times of a homogeneous Poisson process of `rate_hz` on
/// `[0, duration_s]`, in integer ps, ascending.
pub fn poisson_times<R: Rng + ?Sized>(rate_hz: f64, duration_s: f64, rng: &mut R) -> Vec<u64> {
    if !(rate_hz > 0.0) || !(duration_s > 0.0) {
        return Vec::new();
    }
    let end = seconds_to_ps(duration_s) as f64;
    let gap = Exp::new(rate_hz / PS_PER_S).expect("positive rate");
    let mut out = Vec::with_capacity((rate_hz * duration_s * 1.05) as usize + 16);
    let mut t = 0.0;
    loop {
        t += gap.sample(rng);
        if t > end {
            break;
        }
        out.push(t as u64);
    }
    out
}

/// Reads detector models from CSV with header
/// `label,efficiency,dark_hz,jitter_fwhm_ps,dead_time_ps`.
pub fn read_presets_csv<R: Read>(r: R) -> Result<Vec<DetectorModel>> {
    let mut rd = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(r);
    let expected = [
        "label",
        "efficiency",
        "dark_hz",
        "jitter_fwhm_ps",
        "dead_time_ps",
    ];
    let headers = rd.headers()?.clone();
    if headers.iter().ne(expected.iter().copied()) {
        return Err(Error::Config(format!(
            "preset CSV header must be `{}`, found `{}`",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for row in rd.deserialize() {
        let d: DetectorModel = row?;
        d.validate()?;
        out.push(d);
    }
    Ok(out)
}

pub fn write_presets_csv<W: Write>(models: &[DetectorModel], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for m in models {
        out.serialize(m)?;
    }
    out.flush()?;
    Ok(())
}

/// System efficiency versus dark count rate at one wavelength, sorted by dark rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyCurve {
    pub wavelength_nm: f64,
    /// `(dark_hz, efficiency)` pairs.
    pub points: Vec<(f64, f64)>,
}

#[derive(Deserialize)]
struct CurveRow {
    wavelength_nm: f64,
    dark_hz: f64,
    efficiency: f64,
}

impl EfficiencyCurve {
    pub fn new(wavelength_nm: f64, mut points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return domain("efficiency curve needs at least one point");
        }
        if points
            .iter()
            .any(|&(dk, e)| !(dk >= 0.0) || !(0.0..=1.0).contains(&e))
        {
            return domain("efficiency curve points need dark_hz >= 0 and efficiency in [0, 1]");
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(EfficiencyCurve {
            wavelength_nm,
            points,
        })
    }

    /// Efficiency at `dark_hz`, linearly interpolated and clamped to the
    /// measured range.
    pub fn efficiency_at(&self, dark_hz: f64) -> f64 {
        let p = &self.points;
        if dark_hz <= p[0].0 {
            return p[0].1;
        }
        if dark_hz >= p[p.len() - 1].0 {
            return p[p.len() - 1].1;
        }
        let k = p.partition_point(|q| q.0 <= dark_hz);
        let (x0, y0) = p[k - 1];
        let (x1, y1) = p[k];
        y0 + (y1 - y0) * (dark_hz - x0) / (x1 - x0)
    }

    /// Reads a `wavelength_nm,dark_hz,efficiency` CSV, one curve per wavelength.
    pub fn read_csv<R: Read>(r: R) -> Result<Vec<EfficiencyCurve>> {
        let mut rd = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(r);
        let mut by_wl: BTreeMap<u64, (f64, Vec<(f64, f64)>)> = BTreeMap::new();
        for row in rd.deserialize() {
            let row: CurveRow = row?;
            by_wl
                .entry(row.wavelength_nm.to_bits())
                .or_insert_with(|| (row.wavelength_nm, Vec::new()))
                .1
                .push((row.dark_hz, row.efficiency));
        }
        let mut curves = by_wl
            .into_values()
            .map(|(wl, pts)| EfficiencyCurve::new(wl, pts))
            .collect::<Result<Vec<_>>>()?;
        curves.sort_by(|a, b| a.wavelength_nm.total_cmp(&b.wavelength_nm));
        Ok(curves)
    }
}

/// A preset moved to a different bias point on its efficiency curve.
pub fn preset_at_bias(name: &str, curve: &EfficiencyCurve, dark_hz: f64) -> Result<DetectorModel> {
    let mut d = preset(name)?;
    d.dark_hz = dark_hz;
    d.efficiency = curve.efficiency_at(dark_hz);
    d.validate()?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::substream;
    use approx::assert_relative_eq;

    #[test]
    fn presets() {
        let s = preset("si_spad").unwrap();
        assert_eq!(
            (s.efficiency, s.dark_hz, s.jitter_fwhm_ps),
            (0.45, 200.0, 350.0)
        );
        let s = preset("sspd").unwrap();
        assert_eq!(
            (s.efficiency, s.dark_hz, s.jitter_fwhm_ps),
            (0.1, 20.0, 60.0)
        );
        assert_eq!(s.dead_time_ps, 0.0);
        assert!(matches!(preset("xyz"), Err(Error::Lookup(_))));
    }

    #[test]
    fn fom_values() {
        let si = figure_of_merit(&preset("si_spad").unwrap()).value();
        let ss = figure_of_merit(&preset("sspd").unwrap()).value();
        assert_relative_eq!(si, 6.43e6, max_relative = 5e-3);
        assert_relative_eq!(ss, 8.3e7, max_relative = 5e-3);
        assert!(ss / si > 10.0);
        let unit = DetectorModel::new("u", 1.0, 1.0, 1e12, 0.0).unwrap();
        assert_relative_eq!(figure_of_merit(&unit).value(), 1.0);
        let quiet = DetectorModel::new("q", 0.5, 0.0, 50.0, 0.0).unwrap();
        assert_eq!(figure_of_merit(&quiet), FigureOfMerit::Unbounded);
    }

    #[test]
    fn eta_squared_values() {
        assert!((eta_squared(&preset("si_spad").unwrap()) - 0.203).abs() < 1e-3);
        assert_relative_eq!(
            eta_squared(&preset("sspd").unwrap()),
            0.01,
            max_relative = 1e-12
        );
        let off = DetectorModel::new("off", 0.0, 0.0, 1.0, 0.0).unwrap();
        assert_eq!(eta_squared(&off), 0.0);
    }

    #[test]
    fn invalid_models() {
        assert!(DetectorModel::new("x", 1.2, 0.0, 1.0, 0.0).is_err());
        assert!(DetectorModel::new("x", 0.2, -1.0, 1.0, 0.0).is_err());
        assert!(DetectorModel::new("x", 0.2, 0.0, 0.0, 0.0).is_err());
        assert!(DetectorModel::new("x", 0.2, 0.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn identity_detector() {
        let ideal = DetectorModel::new("ideal", 1.0, 0.0, 1e-9, 0.0).unwrap();
        let arrivals = TimestampStream::new("in", vec![0, 8, 400, 1_000_004, 5_000_000]).unwrap();
        let out = apply_detector(&arrivals, &ideal, 1e-5, &mut substream(1, 0)).unwrap();
        assert_eq!(out.times(), arrivals.times());

        let blind = DetectorModel::new("blind", 0.0, 0.0, 60.0, 0.0).unwrap();
        let out = apply_detector(&arrivals, &blind, 1e-5, &mut substream(1, 0)).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn dark_counts_follow_poisson() {
        let d = DetectorModel::new("dark", 0.0, 100.0, 60.0, 0.0).unwrap();
        let out = apply_detector(
            &TimestampStream::empty("in"),
            &d,
            100.0,
            &mut substream(9, 0),
        )
        .unwrap();
        let n = out.len() as f64;
        assert!((n - 1e4).abs() < 4.0 * 100.0, "dark clicks {n}");
        assert!(out
            .times()
            .iter()
            .all(|&t| t % 4 == 0 && t <= 100_000_000_000_000));
    }

    #[test]
    fn dead_time_blocks_followers() {
        let d = DetectorModel::new("dt", 1.0, 0.0, 1e-9, 100.0).unwrap();
        let arrivals = TimestampStream::new("in", vec![0, 40, 100, 104, 300]).unwrap();
        let out = apply_detector(&arrivals, &d, 1e-6, &mut substream(2, 0)).unwrap();
        assert_eq!(out.times(), &[0, 104, 300]);
    }

    #[test]
    fn preset_csv_round_trip() {
        let models = vec![preset("sspd").unwrap(), preset("si_spad").unwrap()];
        let mut buf = Vec::new();
        write_presets_csv(&models, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("label,efficiency,dark_hz,jitter_fwhm_ps,dead_time_ps\n"));
        assert_eq!(read_presets_csv(&buf[..]).unwrap(), models);
        assert!(read_presets_csv("name,eff\nx,1\n".as_bytes()).is_err());
        assert!(read_presets_csv(
            "label,efficiency,dark_hz,jitter_fwhm_ps,dead_time_ps\nbad,2.0,1,1,0\n".as_bytes()
        )
        .is_err());
    }

    #[test]
    fn efficiency_curve_interpolation() {
        let csv = "wavelength_nm,dark_hz,efficiency\n830,100,0.2\n830,20,0.1\n1550,20,0.01\n";
        let curves = EfficiencyCurve::read_csv(csv.as_bytes()).unwrap();
        assert_eq!(curves.len(), 2);
        let c830 = &curves[0];
        assert_eq!(c830.points, vec![(20.0, 0.1), (100.0, 0.2)]);
        assert_relative_eq!(c830.efficiency_at(60.0), 0.15);
        assert_eq!(c830.efficiency_at(1.0), 0.1);
        assert_eq!(c830.efficiency_at(1e6), 0.2);
        let d = preset_at_bias("sspd", c830, 100.0).unwrap();
        assert_eq!((d.efficiency, d.dark_hz), (0.2, 100.0));
        assert!(EfficiencyCurve::new(830.0, vec![(1.0, 1.5)]).is_err());
    }
}
