//! Experiment CLI: `run` a single configuration, `sweep` an axis (or a named
//! preset), `evaluate` a saved run, or `export` its heatmaps.
//!
//! Configuration precedence: config file, then `OMH_*` environment
//! variables, then `--set key=value` flags. Exit codes: 0 success, 1
//! configuration error, 2 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use omh::config::{ConfigError, ExperimentConfig};
use omh::experiment::{self, RunError};

#[derive(Parser)]
#[command(name = "omh", version, about = "Hierarchical structured-sparsity experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its artifacts.
    Run {
        /// Config file (line-based `key = value`); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config field, e.g. `--set depth=2`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Shorthand for `--set output_dir=...`.
        #[arg(long)]
        output_dir: Option<String>,
    },
    /// Expand sweep axes into one run per combination.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Axis as `field=v1,v2,...`. Repeatable; axes combine as a product.
        #[arg(long = "axis", value_name = "FIELD=V1,V2")]
        axis: Vec<String>,
        /// Named preset: tab5-levels, tab6-expansion, or tab7-temperature.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        output_dir: Option<String>,
    },
    /// Recompute metrics for a saved run directory.
    Evaluate {
        /// Run directory containing config.cfg and checkpoint/.
        #[arg(long)]
        run: PathBuf,
    },
    /// Rebuild plans from a saved checkpoint and export heatmaps.
    Export {
        #[arg(long)]
        run: PathBuf,
        /// Target directory (defaults to `<run>/heatmaps`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(
    path: &Option<PathBuf>,
    sets: &[String],
    output_dir: &Option<String>,
) -> Result<ExperimentConfig, ConfigError> {
    let mut config = match path {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    config.apply_env_overrides()?;
    for assignment in sets {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            ConfigError::Invalid(format!("--set expects key=value, got {assignment:?}"))
        })?;
        config.set(key.trim(), value.trim())?;
    }
    if let Some(dir) = output_dir {
        config.output_dir = dir.clone();
    }
    Ok(config)
}

fn parse_axis(spec: &str) -> Result<(String, Vec<String>), ConfigError> {
    let (field, values) = spec
        .split_once(['=', ':'])
        .ok_or_else(|| ConfigError::Invalid(format!("--axis expects field=v1,v2, got {spec:?}")))?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    if values.is_empty() || values.iter().any(String::is_empty) {
        return Err(ConfigError::Invalid(format!("empty value in axis {spec:?}")));
    }
    Ok((field.trim().to_string(), values))
}

fn dispatch(command: Command) -> Result<(), RunError> {
    match command {
        Command::Run { config, set, output_dir } => {
            let config = load_config(&config, &set, &output_dir)?;
            let artifacts = experiment::run(&config)?;
            println!("run complete: {}", artifacts.dir.display());
            for record in artifacts.evals.iter().rev().take(2) {
                println!(
                    "  step {} level {} vs {}: accuracy {:.4}, miou {:.4}",
                    record.step,
                    record.level,
                    record.target.as_str(),
                    record.accuracy,
                    record.miou
                );
            }
            Ok(())
        }
        Command::Sweep { config, axis, preset, set, output_dir } => {
            let config = load_config(&config, &set, &output_dir)?;
            let mut axes = config.sweep_axes.clone();
            if let Some(name) = preset {
                let preset_axes = experiment::preset_axes(&name).ok_or_else(|| {
                    ConfigError::Invalid(format!("unknown preset {name:?}"))
                })?;
                axes.extend(preset_axes);
            }
            for spec in &axis {
                axes.push(parse_axis(spec)?);
            }
            let outcomes = experiment::sweep(&config, &axes)?;
            let mut failed = 0;
            for o in &outcomes {
                match &o.result {
                    Ok(()) => println!("ok   {}", o.name),
                    Err(e) => {
                        failed += 1;
                        eprintln!("fail {}: {e}", o.name);
                    }
                }
            }
            if failed > 0 {
                return Err(RunError::State(format!("{failed} sweep run(s) failed")));
            }
            Ok(())
        }
        Command::Evaluate { run } => {
            let rows = experiment::evaluate_run(&run)?;
            println!("wrote {}", run.join("eval_metrics.csv").display());
            for r in &rows {
                println!(
                    "step {} level {} vs {}: accuracy {:.4}, miou {:.4}",
                    r.step,
                    r.level,
                    r.target.as_str(),
                    r.accuracy,
                    r.miou
                );
            }
            Ok(())
        }
        Command::Export { run, out } => {
            let files = experiment::export_run(&run, out.as_deref())?;
            println!("exported {} files", files.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    // Argument mistakes are configuration errors: exit 1, not clap's 2.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
