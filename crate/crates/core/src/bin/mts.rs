use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use mts_core::harness::fuzz::{verify_isolation, FuzzConfig};
use mts_core::harness::scenario::{run_scenario, Scenario, ScenarioKind, DEFAULT_PACKET_SIZE};
use mts_core::ids::ComponentId;
use mts_core::orchestrator::{account_resources, plan_deployment, DeploymentPlan, DeploymentSpec};
use mts_core::secmodel::{check_expectations, compromise, default_expectations};

#[derive(Parser)]
#[command(name = "mts", version, about = "Plan and simulate compartmentalized multi-tenant virtual switching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the deployment plan as JSON followed by each vswitch's flow rules.
    Plan { spec: PathBuf },
    /// Run a traffic scenario and print metrics JSON.
    Run {
        spec: PathBuf,
        #[arg(long)]
        scenario: ScenarioKind,
        #[arg(long, default_value_t = 100)]
        packets: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_PACKET_SIZE)]
        size: usize,
        /// Write the per-packet trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write per-flow metrics as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Fuzz tenant VFs with adversarial frames; exits 1 on any violation.
    Verify {
        spec: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        frames: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Report attacker reach after compromising a component
    /// (`host`, `vswitch:N` or `vm:N`); exits 1 on a breached expectation.
    Attack {
        spec: PathBuf,
        #[arg(long)]
        compromise: ComponentId,
        #[arg(long)]
        json: bool,
    },
    /// Print the resource account as a table and a CSV row.
    Resources { spec: PathBuf },
}

fn load_spec(path: &Path) -> Result<DeploymentSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(DeploymentSpec::from_json(&text)?)
}

fn load_plan(path: &Path) -> Result<DeploymentPlan> {
    Ok(plan_deployment(&load_spec(path)?)?)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Plan { spec } => {
            let plan = load_plan(&spec)?;
            println!("{}", plan.to_json());
            print!("{}", plan.rules_text());
        }
        Command::Run {
            spec,
            scenario,
            packets,
            seed,
            size,
            trace,
            csv,
        } => {
            let plan = load_plan(&spec)?;
            let sc = Scenario::standard(&plan, scenario, packets, size, seed)?;
            let result = run_scenario(&plan, &sc)?;
            if let Some(path) = trace {
                fs::write(&path, result.trace_jsonl()).with_context(|| format!("writing {}", path.display()))?;
            }
            if let Some(path) = csv {
                fs::write(&path, result.metrics.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            }
            println!("{}", result.metrics.to_json());
        }
        Command::Verify { spec, frames, seed } => {
            let plan = load_plan(&spec)?;
            let report = verify_isolation(&plan, FuzzConfig { frames_per_vf: frames, seed })?;
            println!("{}", report.to_json());
            if !report.clean() {
                eprintln!("{} isolation violations", report.violation_count);
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Attack { spec, compromise: c, json } => {
            let plan = load_plan(&spec)?;
            let report = compromise(&plan, c)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.render_table());
            }
            let exp = plan.spec.expectations.clone().unwrap_or_else(|| default_expectations(&plan, c));
            let breaches = check_expectations(&report, &exp);
            if !breaches.is_empty() {
                for b in breaches {
                    eprintln!("breach: {b}");
                }
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Resources { spec } => {
            let acct = account_resources(&load_spec(&spec)?)?;
            print!("{}", acct.render_table());
            print!("{}", acct.to_csv());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
