//! `qwg`: run simulated waveguide photon-counting experiments.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use qwg_core::experiments::Mode;
use qwg_core::Error;

use config::{build, parse_override, read_config_file, set_path, Experiment, Presets};

#[derive(Parser, Debug)]
#[command(
    name = "qwg",
    version,
    about = "Simulated photon-counting experiments on waveguide circuits"
)]
struct Cli {
    /// Extra detector presets (CSV: label,efficiency,dark_hz,jitter_fwhm_ps,dead_time_ps).
    #[arg(long, global = true, value_name = "CSV")]
    presets: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Hong-Ou-Mandel delay scan.
    Hom(RunArgs),
    /// CNOT truth table.
    Cnot(RunArgs),
    /// Mach-Zehnder phase scan.
    Fringe(RunArgs),
    /// Detector figure of merit η/(DΔt).
    Fom(RunArgs),
    /// Inspect detector presets.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand, Debug)]
enum PresetAction {
    List,
    Show { name: String },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Analytic,
    Mc,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML config, or a manifest.json from an earlier run to replay.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Start from the calibrated reference configuration.
    #[arg(long)]
    paper_defaults: bool,
    #[arg(long, value_name = "PRESET")]
    detector: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Output directory [default: $QWG_OUTPUT_DIR/<experiment>-<seed>].
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Config overrides such as `source.pair_rate_hz=2000` or `scan.points=21`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

/// Error printed as JSON on stderr, paired with a nonzero exit.
struct Failure {
    kind: &'static str,
    message: String,
    code: u8,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Domain(_) => "domain",
            Error::Capacity(_) => "capacity",
            Error::Lookup(_) => "lookup",
            Error::Undefined(_) => "undefined",
            Error::Fit(_) => "fit",
            Error::Config(_) => "config",
            Error::Csv(_) => "csv",
            Error::Io(_) => "io",
        };
        let code = match &e {
            Error::Config(_) | Error::Lookup(_) => 2,
            _ => 1,
        };
        Failure {
            kind,
            message: e.to_string(),
            code,
        }
    }
}

fn user_layer(a: &RunArgs) -> Result<Value, Error> {
    let mut v = match &a.config {
        Some(p) => read_config_file(p)?,
        None => json!({}),
    };
    for o in &a.overrides {
        let (path, value) = parse_override(o)?;
        set_path(&mut v, &path, value)?;
    }
    if let Some(d) = &a.detector {
        v["detector"] = json!(d);
    }
    if let Some(s) = a.seed {
        v["seed"] = json!(s);
    }
    if let Some(m) = a.mode {
        v["mode"] = serde_json::to_value(match m {
            ModeArg::Analytic => Mode::Analytic,
            ModeArg::Mc => Mode::MonteCarlo,
        })
        .expect("mode serializes");
    }
    if let Some(o) = &a.out {
        v["out"] = json!(o);
    }
    Ok(v)
}

fn run_experiment(experiment: Experiment, a: &RunArgs, presets: &Presets) -> Result<(), Error> {
    let cfg = build(experiment, a.paper_defaults, user_layer(a)?)?;
    let resolved = run::resolve(cfg, presets)?;
    // Validate everything before anything touches the filesystem.
    run::plan(&resolved, presets)?;
    let env_dir = std::env::var_os("QWG_OUTPUT_DIR").map(PathBuf::from);
    let dir = run::output_dir(&resolved, env_dir);
    let written = run::run(&resolved, presets, &dir)?;
    print!("{}", written.summary);
    println!(
        "seed {}{}; wrote {}",
        resolved.seed,
        if resolved.seed_from_entropy {
            " (from entropy)"
        } else {
            ""
        },
        written.dir.display()
    );
    Ok(())
}

fn presets_command(action: &PresetAction, presets: &Presets) -> Result<(), Error> {
    match action {
        PresetAction::List => {
            for m in presets.all() {
                println!(
                    "{:<10} efficiency {:<5} dark {:<6} Hz jitter {:<5} ps dead time {} ps",
                    m.label, m.efficiency, m.dark_hz, m.jitter_fwhm_ps, m.dead_time_ps
                );
            }
        }
        PresetAction::Show { name } => {
            let m = presets.get(name)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&m).expect("model serializes")
            );
        }
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), Error> {
    let presets = Presets::load(cli.presets.as_deref())?;
    match &cli.command {
        Command::Hom(a) => run_experiment(Experiment::Hom, a, &presets),
        Command::Cnot(a) => run_experiment(Experiment::Cnot, a, &presets),
        Command::Fringe(a) => run_experiment(Experiment::Fringe, a, &presets),
        Command::Fom(a) => run_experiment(Experiment::Fom, a, &presets),
        Command::Presets { action } => presets_command(action, &presets),
    }
}

fn fail(f: Failure) -> ExitCode {
    eprintln!(
        "{}",
        json!({ "error": { "kind": f.kind, "message": f.message } })
    );
    ExitCode::from(f.code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            return fail(Failure {
                kind: "usage",
                message: e.render().to_string().trim().to_string(),
                code: 2,
            })
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.into()),
    }
}
