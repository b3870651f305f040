//! Run configuration. Layers are applied in order: built-in defaults, the
//! config file (TOML, or a manifest to replay), `key=value` overrides, flags.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::Error as _, Deserialize, Deserializer, Serialize};
use serde_json::{Map, Value};

use qwg_core::detector::{read_presets_csv, DetectorModel, PRESET_NAMES};
use qwg_core::experiments::{calibrated_source, calibration, linspace, FringeKind, Mode};
use qwg_core::tcspc::SourceModel;
use qwg_core::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Hom,
    Cnot,
    Fringe,
    Fom,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Hom => "hom",
            Experiment::Cnot => "cnot",
            Experiment::Fringe => "fringe",
            Experiment::Fom => "fom",
        }
    }
}

/// A preset name or an inline detector model.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum DetectorRef {
    Preset(String),
    Inline(DetectorModel),
}

impl<'de> Deserialize<'de> for DetectorRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match Value::deserialize(d)? {
            Value::String(s) => Ok(DetectorRef::Preset(s)),
            other => DetectorModel::deserialize(other)
                .map(DetectorRef::Inline)
                .map_err(D::Error::custom),
        }
    }
}

/// Scan grid: explicit `values`, or `points` evenly spaced from `start` to `stop`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scan {
    pub start: f64,
    pub stop: f64,
    pub points: usize,
    #[serde(default)]
    pub values: Option<Vec<f64>>,
}

impl Scan {
    pub fn grid(&self) -> Vec<f64> {
        match &self.values {
            Some(v) => v.clone(),
            None => linspace(self.start, self.stop, self.points),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FringeSection {
    pub kind: FringeKind,
    /// Heater voltages; phases become `alpha_rad_per_v2 · V²` and `scan` is ignored.
    #[serde(default)]
    pub voltages_v: Option<Vec<f64>>,
    /// CSV with a `voltage_v` column, read into `voltages_v`.
    #[serde(default)]
    pub voltages_file: Option<PathBuf>,
    #[serde(default)]
    pub alpha_rad_per_v2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnotSection {
    pub overlap: f64,
    pub post_selected_events: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FomSection {
    /// Efficiency-versus-dark-rate CSV used to move the detector's bias point.
    #[serde(default)]
    pub curve_file: Option<PathBuf>,
    #[serde(default)]
    pub bias_dark_hz: Option<f64>,
    /// Curve to use when the file holds several wavelengths.
    #[serde(default)]
    pub wavelength_nm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub mode: Mode,
    /// Drawn from entropy when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    pub detector: DetectorRef,
    pub acquisition_s: f64,
    pub window_ps: u64,
    pub source: SourceModel,
    pub scan: Scan,
    pub fringe: FringeSection,
    pub cnot: CnotSection,
    pub fom: FomSection,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Documented defaults; `calibrated` selects the calibrated reference setup.
    pub fn defaults(experiment: Experiment, calibrated: bool, detector: &str) -> Self {
        let si = detector == "si_spad";
        let (acquisition_s, scan) = match experiment {
            Experiment::Fringe => (
                if calibrated {
                    calibration::FRINGE_ACQUISITION_S
                } else {
                    5.0
                },
                Scan {
                    start: 0.0,
                    stop: TAU * 31.0 / 32.0,
                    points: 32,
                    values: None,
                },
            ),
            _ => (
                match (calibrated, si) {
                    (true, true) => calibration::SI_SPAD_ACQUISITION_S,
                    (true, false) => calibration::SSPD_ACQUISITION_S,
                    _ => 10.0,
                },
                Scan {
                    start: -3.0,
                    stop: 3.0,
                    points: 13,
                    values: None,
                },
            ),
        };
        let max_overlap = match experiment {
            Experiment::Fringe => calibration::FRINGE_OVERLAP,
            _ => calibration::HOM_MAX_OVERLAP,
        };
        RunConfig {
            experiment,
            mode: Mode::MonteCarlo,
            seed: None,
            detector: DetectorRef::Preset(detector.to_string()),
            acquisition_s,
            window_ps: if calibrated && si {
                calibration::SI_SPAD_WINDOW_PS
            } else {
                calibration::SSPD_WINDOW_PS
            },
            source: calibrated_source(max_overlap),
            scan,
            fringe: FringeSection {
                kind: FringeKind::TwoPhoton,
                voltages_v: None,
                voltages_file: None,
                alpha_rad_per_v2: None,
            },
            cnot: CnotSection {
                overlap: if calibrated {
                    calibration::CNOT_OVERLAP
                } else {
                    1.0
                },
                post_selected_events: 1000,
            },
            fom: FomSection {
                curve_file: None,
                bias_dark_hz: None,
                wavelength_nm: None,
            },
            out: None,
        }
    }
}

/// Detector presets: the built-ins, overridden or extended by a presets CSV.
#[derive(Clone, Debug)]
pub struct Presets {
    models: BTreeMap<String, DetectorModel>,
    pub source: Option<PathBuf>,
}

impl Presets {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut models = BTreeMap::new();
        for name in PRESET_NAMES {
            models.insert(name.to_string(), qwg_core::detector::preset(name)?);
        }
        if let Some(p) = path {
            let file = fs::File::open(p)
                .map_err(|e| Error::Config(format!("presets file {}: {e}", p.display())))?;
            for m in read_presets_csv(file)? {
                models.insert(m.label.clone(), m);
            }
        }
        Ok(Presets {
            models,
            source: path.map(Path::to_path_buf),
        })
    }

    pub fn get(&self, name: &str) -> Result<DetectorModel> {
        self.models.get(name).cloned().ok_or_else(|| {
            Error::Lookup(format!(
                "detector: unknown preset `{name}` (known: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.models.keys().map(String::as_str).collect()
    }

    pub fn all(&self) -> impl Iterator<Item = &DetectorModel> {
        self.models.values()
    }
}

/// Parses a config file. A manifest written by a previous run is accepted and
/// its recorded configuration replayed.
pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let value: Value = if is_json {
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?
    } else {
        let t: toml::Table = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
        serde_json::to_value(t).map_err(|e| Error::Config(e.to_string()))?
    };
    match value {
        Value::Object(mut m) if m.contains_key("schema_version") && m.contains_key("config") => {
            Ok(m.remove("config").expect("checked"))
        }
        v @ Value::Object(_) => Ok(v),
        _ => Err(Error::Config(format!(
            "config file {} must contain a table",
            path.display()
        ))),
    }
}

/// Parses `a.b.c=value`. The value is read as a TOML literal, falling back to
/// a bare string.
pub fn parse_override(arg: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{arg}` is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!(
            "override `{arg}` has an empty key segment"
        )));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .map(|v| serde_json::to_value(v).map_err(|e| Error::Config(e.to_string())))
        .transpose()?
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((path, value))
}

pub fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut cur = root;
    for (i, seg) in path.iter().enumerate() {
        let obj = match cur {
            Value::Object(m) => m,
            _ => {
                return Err(Error::Config(format!(
                    "cannot set `{}`: `{}` is not a table",
                    path.join("."),
                    path[..i].join(".")
                )))
            }
        };
        if i + 1 == path.len() {
            obj.insert(seg.clone(), value);
            return Ok(());
        }
        cur = obj
            .entry(seg.clone())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// Recursively overlays `top` onto `base`; tables merge, everything else replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Layers user settings over the defaults and deserializes, naming the key
/// path of any schema violation.
pub fn build(experiment: Experiment, calibrated: bool, user: Value) -> Result<RunConfig> {
    if let Some(e) = user.get("experiment") {
        if e != experiment.name() {
            return Err(Error::Config(format!(
                "experiment: config is for `{}`, not `{}`",
                e.as_str().unwrap_or("?"),
                experiment.name()
            )));
        }
    }
    let detector = user
        .get("detector")
        .and_then(Value::as_str)
        .unwrap_or("sspd")
        .to_string();
    let mut v = serde_json::to_value(RunConfig::defaults(experiment, calibrated, &detector))
        .map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut v, user);
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            Error::Config(e.into_inner().to_string())
        } else {
            Error::Config(format!("{path}: {}", e.into_inner()))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_parse_typed_values() {
        assert_eq!(
            parse_override("seed=42").unwrap(),
            (vec!["seed".into()], json!(42))
        );
        assert_eq!(parse_override("detector=sspd").unwrap().1, json!("sspd"));
        assert_eq!(
            parse_override("source.overlap.max_overlap=0.9").unwrap(),
            (
                vec!["source".into(), "overlap".into(), "max_overlap".into()],
                json!(0.9)
            )
        );
        assert_eq!(
            parse_override("scan.values=[1.0, 2.0]").unwrap().1,
            json!([1.0, 2.0])
        );
        assert!(parse_override("seed").is_err());
        assert!(parse_override("a..b=1").is_err());
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = build(Experiment::Hom, false, json!({"detector": "sspd"})).unwrap();
        assert_eq!(cfg.scan.grid().len(), 13);
        assert_eq!(cfg.window_ps, 1000);
        assert_eq!(cfg.mode, Mode::MonteCarlo);
        assert_eq!(cfg.seed, None);
    }

    #[test]
    fn calibrated_defaults_depend_on_detector() {
        let si = build(Experiment::Hom, true, json!({"detector": "si_spad"})).unwrap();
        assert_eq!(si.window_ps, calibration::SI_SPAD_WINDOW_PS);
        assert_eq!(si.acquisition_s, 40.0);
        let sspd = build(Experiment::Hom, true, json!({})).unwrap();
        assert_eq!(sspd.acquisition_s, 60.0);
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = build(Experiment::Hom, false, json!({"detecor": "sspd"})).unwrap_err();
        assert!(e.to_string().contains("detecor"), "{e}");
        let e = build(
            Experiment::Hom,
            false,
            json!({"source": {"pair_rate": 1.0}}),
        )
        .unwrap_err();
        assert!(
            e.to_string().contains("source") && e.to_string().contains("pair_rate"),
            "{e}"
        );
        let e = build(
            Experiment::Hom,
            false,
            json!({"detector": {"label": "x", "efficency": 0.1, "dark_hz": 1.0, "jitter_fwhm_ps": 1.0}}),
        )
        .unwrap_err();
        assert!(e.to_string().contains("efficency"), "{e}");
    }

    #[test]
    fn experiment_mismatch_rejected() {
        assert!(build(Experiment::Cnot, false, json!({"experiment": "hom"})).is_err());
    }

    #[test]
    fn merge_and_set_path() {
        let mut v = json!({"a": {"b": 1, "c": 2}});
        merge(&mut v, json!({"a": {"b": 5}, "d": 3}));
        assert_eq!(v, json!({"a": {"b": 5, "c": 2}, "d": 3}));
        set_path(&mut v, &["a".into(), "e".into()], json!(true)).unwrap();
        assert_eq!(v["a"]["e"], json!(true));
        assert!(set_path(&mut v, &["d".into(), "x".into()], json!(1)).is_err());
    }

    #[test]
    fn shipped_configs_parse() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for (file, exp) in [
            ("hom.toml", Experiment::Hom),
            ("cnot.toml", Experiment::Cnot),
            ("fringe.toml", Experiment::Fringe),
            ("fom.toml", Experiment::Fom),
        ] {
            let v = read_config_file(&root.join(file)).unwrap();
            build(exp, false, v).unwrap_or_else(|e| panic!("{file}: {e}"));
        }
        let p = Presets::load(Some(&root.join("../data/presets.csv"))).unwrap();
        assert_eq!(
            p.get("sspd").unwrap(),
            qwg_core::detector::preset("sspd").unwrap()
        );
    }

    #[test]
    fn unknown_preset() {
        let p = Presets::load(None).unwrap();
        assert!(matches!(p.get("apd"), Err(Error::Lookup(_))));
        assert_eq!(p.names(), vec!["si_spad", "sspd"]);
    }
}
