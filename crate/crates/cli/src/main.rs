//! `simulate`: command-line front end for the cavsim scenarios.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cavsim::config::{emit_config, parse_config, ExperimentConfig};
use cavsim::coupling::local_scattering_rate;
use cavsim::optics::{FieldModel, LatticeConfiguration};
use cavsim::scenario::{
    calibrate, emit_summary, run_scenario, CalibrationOptions, CalibrationTargets, ScenarioName,
    ScenarioSpec,
};
use cavsim::{Error, ModeId, Position, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "simulate",
    version,
    about = "Conveyor-belt cavity QED simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a named scenario and write its artifacts.
    Run {
        scenario: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Worker threads; results do not depend on this.
        #[arg(long)]
        threads: Option<usize>,
        /// Extra `key=value` config lines applied after the config file.
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Fit model parameters to the reference observables.
    Calibrate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a target, e.g. `--target lifetime_pump_on=15` (SI units).
        #[arg(long = "target")]
        targets: Vec<String>,
        #[arg(long, default_value_t = 400)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print the reference configuration.
    Defaults,
    /// Print derived rates and lengths as JSON.
    Rates {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Sample a field quantity along a line; CSV on stdout.
    FieldProbe {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Quantity::Potential)]
        quantity: Quantity,
        #[arg(long, value_enum, default_value_t = Traps::Lattice)]
        traps: Traps,
        #[arg(long, default_value = "TEM00")]
        mode: String,
        /// Start point `x,y,z` in metres.
        #[arg(long, default_value = "-60e-6,0,0", allow_hyphen_values = true)]
        from: String,
        /// End point `x,y,z` in metres.
        #[arg(long, default_value = "60e-6,0,0", allow_hyphen_values = true)]
        to: String,
        #[arg(long, default_value_t = 121)]
        points: usize,
        /// Conveyor offset, m.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        offset: f64,
    },
    /// List the registered scenarios.
    List,
}

#[derive(Clone, Copy, ValueEnum)]
enum Quantity {
    Potential,
    Amplitude,
    Scattering,
}

#[derive(Clone, Copy, ValueEnum)]
enum Traps {
    Lattice,
    Sw,
    Ic,
    Guide,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_config(&text)
        }
        None => Ok(ExperimentConfig::default()),
    }
}

fn set_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        // a second initialisation attempt is harmless
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

fn parse_point(s: &str) -> Result<Position> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse {
            line: 0,
            message: format!("point '{s}': {e}"),
        })?;
    if v.len() != 3 {
        return Err(Error::Parse {
            line: 0,
            message: format!("point '{s}' needs three coordinates"),
        });
    }
    Ok(Position::new(v[0], v[1], v[2]))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            scenario,
            config,
            seed,
            trials,
            out,
            threads,
            set,
        } => {
            set_threads(threads);
            let name: ScenarioName = scenario.parse()?;
            let mut spec = ScenarioSpec::new(name, load_config(config.as_deref())?);
            spec.master_seed = seed;
            spec.n_trials = trials;
            spec.output_dir = out;
            if !set.is_empty() {
                spec = spec.with_overrides(&set.join("\n"))?;
            }
            let result = run_scenario(&spec)?;
            let files = emit_summary(&result, &spec.output_dir)?;
            let report = json!({
                "scenario": name.as_str(),
                "output_dir": spec.output_dir,
                "files": files,
                "summary": result.summary,
            });
            println!(
                "{}",
                serde_json::to_string_pretty(&report).unwrap_or_default()
            );
        }
        Command::Calibrate {
            config,
            targets,
            trials,
            seed,
            threads,
        } => {
            set_threads(threads);
            let cfg = load_config(config.as_deref())?.validate()?.into_inner();
            let mut t = CalibrationTargets::default();
            for item in &targets {
                let (k, v) = item.split_once('=').ok_or_else(|| Error::Parse {
                    line: 0,
                    message: format!("target '{item}' must read key=value"),
                })?;
                let v: f64 = v.trim().parse().map_err(|_| Error::Parse {
                    line: 0,
                    message: format!("target '{item}': value is not a number"),
                })?;
                t.set(k.trim(), v)?;
            }
            let opts = CalibrationOptions {
                trials,
                seed,
                ..CalibrationOptions::default()
            };
            let report = calibrate(&t, &cfg, &opts)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).unwrap_or_default()
            );
        }
        Command::Defaults => print!("{}", emit_config(&ExperimentConfig::default())),
        Command::Rates { config } => {
            let cfg = load_config(config.as_deref())?.validate()?;
            println!(
                "{}",
                serde_json::to_string_pretty(&cfg.derive()).unwrap_or_default()
            );
        }
        Command::FieldProbe {
            config,
            quantity,
            traps,
            mode,
            from,
            to,
            points,
            offset,
        } => {
            let cfg = load_config(config.as_deref())?.validate()?;
            let mode: ModeId = mode.parse().map_err(|m: String| Error::Parse {
                line: 0,
                message: m,
            })?;
            let (a, b) = (parse_point(&from)?, parse_point(&to)?);
            let lattice = match traps {
                Traps::Lattice => LatticeConfiguration::lattice(offset),
                Traps::Sw => LatticeConfiguration::sw_only(offset),
                Traps::Ic => LatticeConfiguration::ic_only(),
                Traps::Guide => LatticeConfiguration::guide_only(),
            };
            let field = FieldModel::new(&cfg);
            let kb = cfg.constants.boltzmann_constant;
            let mut out = String::from("x,y,z,value,units\n");
            let n = points.max(1);
            for i in 0..n {
                let f = if n == 1 {
                    0.0
                } else {
                    i as f64 / (n - 1) as f64
                };
                let p = a + (b - a) * f;
                let (value, units) = match quantity {
                    Quantity::Potential => (field.potential(&p, &lattice) / kb, "K"),
                    Quantity::Amplitude => (field.mode_amplitude(mode, &p), "1"),
                    Quantity::Scattering => (local_scattering_rate(&p, mode, &cfg), "1/s"),
                };
                out.push_str(&format!(
                    "{:e},{:e},{:e},{:e},{}\n",
                    p.x, p.y, p.z, value, units
                ));
            }
            print!("{out}");
        }
        Command::List => {
            for n in ScenarioName::ALL {
                println!("{}\t{}", n.as_str(), n.description());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
