use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use oaas_core::consistency::CheckKind;
use oaas_core::faas::HandlerRegistry;
use oaas_core::package::{parse_package, resolve_inheritance};
use oaas_core::planner::{Planner, PlannerConfig};
use oaas_core::sim::{ChaosSchedule, Millis, Topology, TopologyFile};
use oaas_core::workload::{
    bundled_package, bundled_scenario, check_history, list_scenarios, preset_topology,
    run_scenario, Format, RunOptions, ScenarioSpec,
};

#[derive(Parser)]
#[command(
    name = "oaas",
    version,
    about = "Run object platform simulation scenarios"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a bundled scenario by name, or a scenario JSON file.
    Run {
        scenario: String,
        /// Run this single seed instead of the scenario's ensemble.
        #[arg(long)]
        seed: Option<u64>,
        /// Write report files here instead of printing to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "json")]
        format: Format,
        /// Topology JSON file replacing the scenario's.
        #[arg(long)]
        topology: Option<PathBuf>,
        /// Chaos JSON file replacing the scenario's.
        #[arg(long)]
        chaos: Option<PathBuf>,
        #[arg(long = "until-ms")]
        until_ms: Option<Millis>,
    },
    /// Check a JSON-lines operation history.
    Check {
        history: PathBuf,
        /// linearizable-lite, ryw, staleness:<ms> or exactly-once.
        #[arg(long)]
        kind: CheckKind,
    },
    /// Print deployment plans for a package.
    Plan {
        /// Package YAML file, or the name of a bundled package.
        package: String,
        /// Topology JSON file, or a preset name.
        #[arg(long, default_value = "edge_cloud")]
        topology: String,
    },
    /// List bundled scenarios.
    ListScenarios,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_spec(name: &str) -> Result<ScenarioSpec> {
    if list_scenarios().contains(&name) {
        return Ok(bundled_scenario(name)?);
    }
    let path = Path::new(name);
    if path.exists() {
        return Ok(ScenarioSpec::from_json(&read(path)?)?);
    }
    bail!("no bundled scenario or file named `{name}`; see `oaas list-scenarios`")
}

fn load_topology(arg: &str) -> Result<Topology> {
    if let Some(t) = preset_topology(arg) {
        return Ok(t);
    }
    Ok(Topology::from_json(&read(Path::new(arg))?)?)
}

/// Stdout that tolerates a reader going away (`oaas plan x | head`).
fn say(text: &str) -> Result<()> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn run(scenario: &str, opts: RunOptions, out: Option<PathBuf>, format: Format) -> Result<bool> {
    let mut spec = load_spec(scenario)?;
    opts.apply(&mut spec);
    let report = run_scenario(&spec).with_context(|| format!("scenario `{}`", spec.name))?;
    match out {
        Some(dir) => {
            for f in report.emit(&dir, format)? {
                say(&format!("{}\n", f.display()))?;
            }
        }
        None => match format {
            Format::Json => say(&report.to_json())?,
            Format::Csv => say(&report.phases_csv())?,
        },
    }
    for c in &report.checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        eprintln!("{tag} {}: {}", c.name, c.detail);
    }
    Ok(report.passed())
}

fn plan(package: &str, topology: &str) -> Result<bool> {
    let text = match bundled_package(package) {
        Some(t) => t.to_string(),
        None => read(Path::new(package))?,
    };
    let pkg = parse_package(&text)?;
    let classes = resolve_inheritance(&pkg, &[])?;
    let mut planner = Planner::new(
        load_topology(topology)?,
        HandlerRegistry::with_builtins(),
        PlannerConfig::default(),
    );
    let plans = planner.admit_all(&classes);
    let json: Vec<_> = plans.iter().map(|p| p.to_json()).collect();
    say(&format!("{}\n", serde_json::to_string_pretty(&json)?))?;
    Ok(plans.iter().all(|p| p.accepted))
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            out,
            format,
            topology,
            chaos,
            until_ms,
        } => {
            let topology = match topology {
                Some(p) => Some(
                    serde_json::from_str::<TopologyFile>(&read(&p)?).context("topology file")?,
                ),
                None => None,
            };
            let chaos = match chaos {
                Some(p) => Some(ChaosSchedule::from_json(&read(&p)?)?),
                None => None,
            };
            let opts = RunOptions {
                seed,
                until_ms,
                topology,
                chaos,
            };
            run(&scenario, opts, out, format)
        }
        Command::Check { history, kind } => {
            let verdict = check_history(&read(&history)?, kind)?;
            say(&format!("{}\n", serde_json::to_string_pretty(&verdict)?))?;
            Ok(verdict.passed)
        }
        Command::Plan { package, topology } => plan(&package, &topology),
        Command::ListScenarios => {
            for name in list_scenarios() {
                let spec = bundled_scenario(name)?;
                say(&format!("{name:<14} {}\n", spec.description))?;
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
