//! Executes a resolved configuration and writes its artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use qwg_core::circuits::phase_from_voltage;
use qwg_core::detector::{figure_of_merit, DetectorModel, EfficiencyCurve, FigureOfMerit};
use qwg_core::experiments::{
    fit_dip, fit_fringe_period, fringe_contrast, read_voltages_csv, run_cnot_truth_table,
    run_fringe_scan, run_hom_scan, CnotConfig, FringeConfig, HomScanConfig, LOGICAL_LABELS,
};
use qwg_core::seeding::entropy_seed;
use qwg_core::tcspc::{corrected_visibility, visibility};
use qwg_core::{Error, Result};

use crate::config::{DetectorRef, Experiment, Presets, RunConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// A configuration with every external reference pinned: detector inlined,
/// input files read, seed fixed. Re-running it reproduces the results exactly.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    pub detector: DetectorModel,
    pub seed: u64,
    pub seed_from_entropy: bool,
    pub out: Option<PathBuf>,
}

fn open(path: &Path, what: &str) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| Error::Config(format!("{what} {}: {e}", path.display())))
}

pub fn resolve(mut cfg: RunConfig, presets: &Presets) -> Result<Resolved> {
    let mut detector = match &cfg.detector {
        DetectorRef::Preset(name) => presets.get(name)?,
        DetectorRef::Inline(m) => m.clone(),
    };
    detector
        .validate()
        .map_err(|e| Error::Config(format!("detector: {e}")))?;

    if let Some(path) = cfg.fom.curve_file.take() {
        let dark = cfg.fom.bias_dark_hz.ok_or_else(|| {
            Error::Config("fom.bias_dark_hz is required with fom.curve_file".into())
        })?;
        let curves = EfficiencyCurve::read_csv(open(&path, "efficiency curve")?)?;
        let curve = match cfg.fom.wavelength_nm {
            Some(wl) => curves
                .iter()
                .find(|c| (c.wavelength_nm - wl).abs() < 1e-9)
                .ok_or_else(|| Error::Lookup(format!("fom.wavelength_nm: no curve at {wl} nm")))?,
            None => curves
                .first()
                .ok_or_else(|| Error::Config("efficiency curve file is empty".into()))?,
        };
        detector.dark_hz = dark;
        detector.efficiency = curve.efficiency_at(dark);
        detector
            .validate()
            .map_err(|e| Error::Config(format!("fom: detector at bias: {e}")))?;
        cfg.fom.bias_dark_hz = None;
        cfg.fom.wavelength_nm = None;
    }
    if let Some(path) = cfg.fringe.voltages_file.take() {
        cfg.fringe.voltages_v = Some(read_voltages_csv(open(&path, "voltage file")?)?);
    }

    let (seed, seed_from_entropy) = match cfg.seed {
        Some(s) => (s, false),
        None => (entropy_seed(), true),
    };
    cfg.seed = Some(seed);
    cfg.detector = DetectorRef::Inline(detector.clone());
    let out = cfg.out.take();
    Ok(Resolved {
        config: cfg,
        detector,
        seed,
        seed_from_entropy,
        out,
    })
}

/// Driver configuration built from a resolved run, validated up front so a
/// bad config writes nothing.
pub enum Plan {
    Hom(HomScanConfig),
    Cnot(CnotConfig),
    Fringe(FringeConfig),
    Fom(Vec<DetectorModel>),
}

pub fn plan(r: &Resolved, presets: &Presets) -> Result<Plan> {
    let c = &r.config;
    let d = r.detector.clone();
    let p = match c.experiment {
        Experiment::Hom => {
            let h = HomScanConfig {
                delays_ps: c.scan.grid(),
                acquisition_s: c.acquisition_s,
                source: c.source.clone(),
                detectors: [d.clone(), d],
                window_ps: c.window_ps,
                mode: c.mode,
                seed: r.seed,
            };
            h.validate()?;
            Plan::Hom(h)
        }
        Experiment::Cnot => {
            let k = CnotConfig {
                overlap: c.cnot.overlap,
                mode: c.mode,
                detector: d,
                post_selected_events: c.cnot.post_selected_events,
                window_ps: c.window_ps,
                seed: r.seed,
            };
            k.validate()?;
            Plan::Cnot(k)
        }
        Experiment::Fringe => {
            let phases = match (&c.fringe.voltages_v, c.fringe.alpha_rad_per_v2) {
                (Some(v), Some(alpha)) => v
                    .iter()
                    .map(|&x| phase_from_voltage(x, alpha))
                    .collect::<Result<Vec<_>>>()?,
                (Some(_), None) => {
                    return Err(Error::Config(
                        "fringe.alpha_rad_per_v2 is required with heater voltages".into(),
                    ))
                }
                (None, _) => c.scan.grid(),
            };
            let f = FringeConfig {
                phases_rad: phases,
                voltages_v: c.fringe.voltages_v.clone(),
                kind: c.fringe.kind,
                acquisition_s: c.acquisition_s,
                source: c.source.clone(),
                detectors: [d.clone(), d],
                window_ps: c.window_ps,
                mode: c.mode,
                seed: r.seed,
            };
            f.validate()?;
            Plan::Fringe(f)
        }
        Experiment::Fom => {
            let mut rows = vec![d.clone()];
            rows.extend(presets.all().filter(|m| m.label != d.label).cloned());
            Plan::Fom(rows)
        }
    };
    Ok(p)
}

/// Everything a run produces, held in memory until it is written.
pub struct Outcome {
    pub results_csv: Vec<u8>,
    pub columns: Vec<String>,
    pub rows: usize,
    pub fit: Option<Value>,
    pub summary: String,
}

fn fit_value<T: Serialize>(r: Result<T>) -> Value {
    match r {
        Ok(v) => serde_json::to_value(v).unwrap_or(Value::Null),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

fn columns(csv: &[u8]) -> Vec<String> {
    let first = csv.split(|&b| b == b'\n').next().unwrap_or(&[]);
    String::from_utf8_lossy(first)
        .trim()
        .split(',')
        .map(str::to_string)
        .collect()
}

fn fom_text(f: FigureOfMerit) -> String {
    match f {
        FigureOfMerit::Finite(v) => format!("{v:.2e}"),
        FigureOfMerit::Unbounded => "unbounded".into(),
    }
}

pub fn execute(plan: &Plan) -> Result<Outcome> {
    let mut csv = Vec::new();
    let mut summary = String::new();
    let (rows, fit) = match plan {
        Plan::Hom(cfg) => {
            let curve = run_hom_scan(cfg)?;
            curve.write_csv(&mut csv)?;
            let raw = fit_dip(&curve);
            let sub = fit_dip(&curve.accidental_subtracted());
            let n_max = curve
                .points
                .iter()
                .map(|p| p.count)
                .fold(f64::MIN, f64::max);
            let n_min = curve
                .points
                .iter()
                .map(|p| p.count)
                .fold(f64::MAX, f64::min);
            let acc = curve.mean_accidentals();
            if let Ok(f) = &raw {
                let _ = writeln!(
                    summary,
                    "raw visibility {:.4} ± {:.4}, width {:.3} ps",
                    f.visibility.value, f.visibility.error, f.width_ps.value
                );
            }
            if let Ok(f) = &sub {
                let _ = writeln!(
                    summary,
                    "accidental-subtracted visibility {:.4} ± {:.4}",
                    f.visibility.value, f.visibility.error
                );
            }
            let _ = writeln!(summary, "accidentals {:.4} Hz", acc / cfg.acquisition_s);
            let fit = json!({
                "dip_fit": fit_value(raw),
                "dip_fit_accidental_subtracted": fit_value(sub),
                "extrema_visibility": fit_value(visibility(n_max, n_min)),
                "extrema_visibility_corrected": fit_value(corrected_visibility(n_max, n_min, acc)),
                "accidentals_per_point": acc,
                "accidental_rate_hz": acc / cfg.acquisition_s,
            });
            (curve.points.len(), Some(fit))
        }
        Plan::Cnot(cfg) => {
            let r = run_cnot_truth_table(cfg)?;
            r.write_csv(&mut csv)?;
            let _ = writeln!(summary, "in \\ out   00     01     10     11");
            for (i, row) in r.table.rows.iter().enumerate() {
                let _ = writeln!(
                    summary,
                    "{}         {:.3}  {:.3}  {:.3}  {:.3}",
                    LOGICAL_LABELS[i], row[0], row[1], row[2], row[3]
                );
            }
            let _ = writeln!(summary, "logical fidelity {:.4}", r.fidelity);
            let fit = json!({
                "fidelity": if r.fidelity.is_finite() { json!(r.fidelity) } else { Value::Null },
                "truth_table": r.table.rows,
                "success_probabilities": r.success_probabilities,
                "events": r.events,
                "shots": r.shots,
                "degenerate": r.degenerate,
            });
            (4, Some(fit))
        }
        Plan::Fringe(cfg) => {
            let curve = run_fringe_scan(cfg)?;
            curve.write_csv(&mut csv)?;
            let contrast = fringe_contrast(&curve);
            let period = fit_fringe_period(&curve);
            if let Ok(c) = &contrast {
                let _ = writeln!(
                    summary,
                    "contrast {:.4} ± {:.4}",
                    c.contrast.value, c.contrast.error
                );
            }
            if let Ok(p) = &period {
                let _ = writeln!(summary, "period {:.4} ± {:.4} rad", p.value, p.error);
            }
            let fit = json!({
                "sinusoid": fit_value(contrast),
                "period_rad": fit_value(period),
            });
            (curve.points.len(), Some(fit))
        }
        Plan::Fom(models) => {
            let mut w = csv::Writer::from_writer(&mut csv);
            w.write_record([
                "label",
                "efficiency",
                "dark_hz",
                "jitter_fwhm_ps",
                "figure_of_merit",
                "eta_squared",
            ])?;
            for m in models {
                let f = figure_of_merit(m);
                w.write_record([
                    m.label.clone(),
                    m.efficiency.to_string(),
                    m.dark_hz.to_string(),
                    m.jitter_fwhm_ps.to_string(),
                    f.value().to_string(),
                    (m.efficiency * m.efficiency).to_string(),
                ])?;
                let _ = writeln!(
                    summary,
                    "{:<10} η={:<5} D={:<6} Hz Δt={:<5} ps  η/(DΔt) = {}",
                    m.label,
                    m.efficiency,
                    m.dark_hz,
                    m.jitter_fwhm_ps,
                    fom_text(f)
                );
            }
            w.flush()?;
            drop(w);
            let selected = figure_of_merit(&models[0]);
            for other in &models[1..] {
                let o = figure_of_merit(other);
                let _ = writeln!(
                    summary,
                    "{} / {} = {:.2}",
                    models[0].label,
                    other.label,
                    selected.value() / o.value()
                );
            }
            (models.len(), None)
        }
    };
    Ok(Outcome {
        columns: columns(&csv),
        results_csv: csv,
        rows,
        fit,
        summary,
    })
}

pub fn config_hash(cfg: &RunConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn manifest(r: &Resolved, presets: &Presets, outcome: &Outcome, wall_clock_s: f64) -> Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "tool": concat!("qwg ", env!("CARGO_PKG_VERSION")),
        "experiment": r.config.experiment.name(),
        "seed": r.seed,
        "seed_source": if r.seed_from_entropy { "entropy" } else { "config" },
        "config_sha256": config_hash(&r.config),
        "config": r.config,
        "detector": r.detector,
        "presets_file": presets.source,
        "results_columns": outcome.columns,
        "results_rows": outcome.rows,
        "fits": outcome.fit,
        "wall_clock_s": wall_clock_s,
    })
}

/// Output directory: `--out`, then the config's `out`, then
/// `$QWG_OUTPUT_DIR/<experiment>-<seed>`, then `runs/<experiment>-<seed>`.
pub fn output_dir(r: &Resolved, env_dir: Option<PathBuf>) -> PathBuf {
    r.out.clone().unwrap_or_else(|| {
        env_dir
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(format!("{}-{}", r.config.experiment.name(), r.seed))
    })
}

fn pretty(v: &Value) -> Vec<u8> {
    let mut text = serde_json::to_vec_pretty(v).expect("json values serialize");
    text.push(b'\n');
    text
}

pub struct Written {
    pub dir: PathBuf,
    pub summary: String,
}

pub fn run(r: &Resolved, presets: &Presets, dir: &Path) -> Result<Written> {
    let start = Instant::now();
    let plan = plan(r, presets)?;
    let outcome = execute(&plan)?;
    let m = manifest(r, presets, &outcome, start.elapsed().as_secs_f64());
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.csv"), &outcome.results_csv)?;
    if let Some(fit) = &outcome.fit {
        fs::write(dir.join("fit.json"), pretty(fit))?;
    }
    fs::write(dir.join("manifest.json"), pretty(&m))?;
    Ok(Written {
        dir: dir.to_path_buf(),
        summary: outcome.summary,
    })
}
