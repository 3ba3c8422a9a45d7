use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use endorsedb_sim::{run, sweep, to_csv, RunOptions, RunOutput, Scenario};

#[derive(Parser)]
#[command(name = "endorsedb", about = "Simulate the endorsement datastore and report metrics as CSV")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Write a line per simulator event to trace.log.
    #[arg(long)]
    trace: bool,
    #[arg(long)]
    check_invariants: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario once per seed and write metrics.csv.
    Run(Common),
    /// Vary one parameter (n, clients, hotspot, speculative) over a list of values.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// param=v1,v2,...
        #[arg(long)]
        sweep: String,
    },
    /// Re-run and compare against an existing metrics.csv in --out.
    Replay(Common),
}

fn seeds(common: &Common, scenario: &Scenario) -> Vec<u64> {
    common.seed.map_or_else(|| scenario.seeds.clone(), |s| vec![s])
}

fn options(common: &Common) -> RunOptions {
    // A violation report needs the event log to be useful.
    RunOptions {
        check_invariants: common.check_invariants,
        trace: common.trace || common.check_invariants,
        record_history: false,
    }
}

fn write_outputs(out_dir: &Path, outputs: &[RunOutput], trace: bool) -> Result<Option<PathBuf>> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let rows: Vec<_> = outputs.iter().map(|o| o.report.clone()).collect();
    fs::write(out_dir.join("metrics.csv"), to_csv(&rows))?;
    let violated = outputs.iter().any(|o| !o.violations.is_empty());
    if !(trace || violated) {
        return Ok(None);
    }
    let path = out_dir.join("trace.log");
    let mut text = String::new();
    for o in outputs {
        text.push_str(&format!("# scenario={} seed={}\n", o.report.scenario, o.report.seed));
        for line in &o.trace {
            text.push_str(line);
            text.push('\n');
        }
        for v in &o.violations {
            text.push_str(&format!("# violation {v}\n"));
        }
    }
    fs::write(&path, text)?;
    Ok(Some(path))
}

fn report(outputs: &[RunOutput], trace_path: Option<PathBuf>) -> ExitCode {
    let violations: Vec<_> = outputs.iter().flat_map(|o| o.violations.iter()).collect();
    if violations.is_empty() {
        return ExitCode::SUCCESS;
    }
    for v in violations.iter().take(20) {
        eprintln!("violation: {v}");
    }
    if let Some(p) = trace_path {
        eprintln!("trace: {}", p.display());
    }
    ExitCode::from(2)
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(common) => {
            let scenario = Scenario::load(&common.scenario)?;
            let opts = options(&common);
            let outputs = seeds(&common, &scenario)
                .into_iter()
                .map(|seed| run(&scenario, seed, opts))
                .collect::<Result<Vec<_>, _>>()?;
            let trace = write_outputs(&common.out, &outputs, common.trace)?;
            Ok(report(&outputs, trace))
        }
        Command::Sweep { common, sweep: spec } => {
            let scenario = Scenario::load(&common.scenario)?;
            let Some((param, values)) = spec.split_once('=') else { bail!("--sweep expects param=v1,v2,...") };
            let values: Vec<String> =
                values.split(',').map(|v| v.trim().to_owned()).filter(|v| !v.is_empty()).collect();
            let outputs = sweep(&scenario, param, &values, &seeds(&common, &scenario), options(&common))?;
            let trace = write_outputs(&common.out, &outputs, common.trace)?;
            Ok(report(&outputs, trace))
        }
        Command::Replay(common) => {
            let scenario = Scenario::load(&common.scenario)?;
            let expected_path = common.out.join("metrics.csv");
            let expected =
                fs::read_to_string(&expected_path).with_context(|| format!("reading {}", expected_path.display()))?;
            let opts = options(&common);
            let outputs = seeds(&common, &scenario)
                .into_iter()
                .map(|seed| run(&scenario, seed, opts))
                .collect::<Result<Vec<_>, _>>()?;
            let rows: Vec<_> = outputs.iter().map(|o| o.report.clone()).collect();
            let actual = to_csv(&rows);
            if actual != expected {
                eprintln!("replay differs from {}", expected_path.display());
                return Ok(ExitCode::from(1));
            }
            println!("replay identical: {}", expected_path.display());
            Ok(report(&outputs, None))
        }
    }
}
