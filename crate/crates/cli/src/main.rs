//! `gridstab` command-line driver.
//!
//! Each subcommand runs one study and writes plot-ready CSV/JSON files into
//! the output directory. Exit codes: 0 ok, 1 runtime failure, 2 input error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gridstab::study::{self, ScenarioConfig, StudyError, StudyOutput};

#[derive(Debug, Parser)]
#[command(name = "gridstab", version, about = "Voltage and frequency stability studies for EV-loaded transmission grids")]
struct Cli {
    /// Bundled case name (ieee9, ieee39) or case file; overrides the scenario.
    #[arg(long, global = true)]
    case: Option<String>,
    /// Scenario file (JSON).
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// RNG seed; overrides the scenario.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replace EV/PV placements with a named preset.
    #[arg(long, global = true, value_enum)]
    ev_preset: Option<Preset>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Paper,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Newton-Raphson power flow with all stations connected.
    Powerflow,
    /// P-V curves for each EV model.
    Pvcurve {
        /// Bus to load; repeatable. Defaults to the case's critical bus.
        #[arg(long = "bus")]
        buses: Vec<gridstab::netmodel::BusId>,
        #[arg(long)]
        step: Option<f64>,
    },
    /// FVSI/NLSI line ranking at base and stepped reactive loading.
    Indices,
    /// Time-domain frequency study over the EV model x control matrix.
    Dynamics {
        #[arg(long)]
        t_end: Option<f64>,
    },
    /// Frequency metrics with constraint checks and ranks.
    Report {
        #[arg(long)]
        t_end: Option<f64>,
    },
    /// Print the effective scenario as JSON.
    Scenario,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(failures) if failures.is_empty() => ExitCode::SUCCESS,
        Ok(failures) => {
            for f in failures {
                eprintln!("gridstab: run failed: {f}");
            }
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("gridstab: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}

fn scenario(cli: &Cli) -> Result<ScenarioConfig, StudyError> {
    let mut cfg = match (&cli.scenario, &cli.case) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| StudyError::Input(format!("cannot read scenario {}: {e}", path.display())))?;
            ScenarioConfig::from_json(&text)?
        }
        (None, Some(case)) => ScenarioConfig::for_case(case.clone()),
        (None, None) => return Err(StudyError::Input("either --case or --scenario is required".into())),
    };
    if let Some(case) = &cli.case {
        cfg.case = case.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(Preset::Paper) = cli.ev_preset {
        let name = cfg.network()?.name;
        cfg.apply_paper_preset(&name)?;
    }
    match &cli.command {
        Command::Pvcurve { buses, step } => {
            if !buses.is_empty() {
                cfg.pvcurve.buses = buses.clone();
            }
            if let Some(s) = step {
                cfg.pvcurve.step = *s;
            }
        }
        Command::Dynamics { t_end: Some(t) } | Command::Report { t_end: Some(t) } => cfg.dynamics.t_end_s = *t,
        _ => {}
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<Vec<String>, StudyError> {
    let cfg = scenario(cli)?;
    let out = match &cli.command {
        Command::Powerflow => study::powerflow_study(&cfg)?,
        Command::Pvcurve { .. } => study::pvcurve_study(&cfg)?,
        Command::Indices => study::indices_study(&cfg)?,
        Command::Dynamics { .. } => study::dynamics_study(&cfg)?,
        Command::Report { .. } => study::report_study(&cfg)?,
        Command::Scenario => {
            println!("{}", cfg.to_json());
            return Ok(Vec::new());
        }
    };
    write_outputs(&cli.out, &out)?;
    Ok(out.failures)
}

fn write_outputs(dir: &Path, out: &StudyOutput) -> Result<(), StudyError> {
    let io = |e: std::io::Error| StudyError::Input(format!("cannot write to {}: {e}", dir.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    for f in &out.files {
        let path = dir.join(&f.name);
        std::fs::write(&path, &f.contents).map_err(io)?;
        println!("{}", path.display());
    }
    Ok(())
}
