use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use moe_offload::replay_check;
use moe_offload::simulator::read_events_csv;
use moe_offload_cli::pipeline::{
    run_scenario, sweep, SummaryRow, SweepAxis, SweepSpec, TraceFormat,
};
use moe_offload_cli::scenario::{load_scenario, prepare};
use moe_offload_cli::{CliError, Result};

/// Schedule expert loads for offloaded MoE inference and simulate the
/// overlapped load/compute timeline.
///
/// Exit codes: 0 success, 1 verification failure or I/O error, 2 invalid
/// configuration, 3 an expert does not fit in device memory, 4 internal
/// invariant breach.
#[derive(Parser)]
#[command(name = "moe-offload", version)]
struct Cli {
    /// Output directory (default: the scenario's `output_dir`, else `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// Seed overriding the scenario's.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true, value_enum, default_value_t = TraceFormat::Chrome)]
    trace_format: TraceFormat,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every policy of a scenario.
    Run { config: PathBuf },
    /// Run a scenario once per value of one parameter.
    Sweep {
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Replay a CSV event trace against the costs of a scenario.
    Verify { trace: PathBuf, config: PathBuf },
}

fn base_dir(config: &Path) -> &Path {
    config.parent().unwrap_or(Path::new("."))
}

fn print_rows(rows: &[SummaryRow]) {
    println!(
        "{:<10} {:>14} {:>14} {:>14} {:>10}",
        "policy", "makespan_s", "lower_bound_s", "stall_s", "overlap"
    );
    for r in rows {
        println!(
            "{:<10} {:>14.6e} {:>14.6e} {:>14.6e} {:>10.4}",
            r.policy, r.makespan, r.lower_bound, r.compute_stall, r.overlap_efficiency
        );
    }
}

fn execute(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Run { config } => {
            let scenario = load_scenario(config)?;
            let prepared = prepare(&scenario, base_dir(config), cli.seed)?;
            let out = cli
                .out
                .clone()
                .or_else(|| scenario.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("out"));
            let rows = run_scenario(&prepared, &out, cli.trace_format)?;
            println!(
                "scenario {} (seed {}, K = {})",
                scenario.name, prepared.seed, prepared.k
            );
            print_rows(&rows);
            println!("wrote {}", out.display());
        }
        Command::Sweep {
            config,
            axis,
            values,
        } => {
            let scenario = load_scenario(config)?;
            let out = cli
                .out
                .clone()
                .or_else(|| scenario.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("out"));
            let spec = SweepSpec {
                axis: *axis,
                values: values.clone(),
                seed: cli.seed,
                jobs: cli.jobs,
                format: cli.trace_format,
            };
            let points = sweep(&scenario, base_dir(config), &spec, &out)?;
            for point in &points {
                println!("{} = {}", axis.name(), point.value);
                print_rows(&point.rows);
            }
            println!("wrote {}", out.join("sweep.csv").display());
        }
        Command::Verify { trace, config } => {
            let scenario = load_scenario(config)?;
            if scenario.seed.is_none() && cli.seed.is_none() && scenario.costs.is_none() {
                return Err(CliError::Config(
                    "verify needs the run's seed: pass --seed or use scenario.resolved.json".into(),
                ));
            }
            let prepared = prepare(&scenario, base_dir(config), cli.seed)?;
            let file = std::fs::File::open(trace)
                .map_err(CliError::io(format!("opening {}", trace.display())))?;
            let events = read_events_csv(file)
                .map_err(|e| CliError::Config(format!("{}: {e}", trace.display())))?;
            let violations = replay_check(&events, &prepared.layers, prepared.k);
            for v in &violations {
                println!("{}", serde_json::to_string(v).expect("serialisable"));
            }
            if !violations.is_empty() {
                return Err(CliError::Verification(violations.len()));
            }
            println!(
                "{}: {} events, no violations",
                trace.display(),
                events.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
