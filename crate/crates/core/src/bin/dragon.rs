//! Operator entry point: train, detect, simulate, evaluate,
//! gen-synthetic and compare, each reproducible from (flags, config
//! file, seed). Exit codes: 0 success, 1 usage, 2 data, 3 numerical.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::Serialize;

use dragon_core::cli::{
    cmd_compare, cmd_detect, cmd_evaluate, cmd_gen_synthetic, cmd_simulate, cmd_train,
    compare_table, CompareArgs, DetectArgs, EvalArgs, GenArgs, SimArgs, TrainArgs,
};
use dragon_core::error::Result;

#[derive(Parser)]
#[command(
    name = "dragon",
    version,
    about = "Federated edge co-simulator with generative anomaly detection and annealed migration"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the detector on a time-series CSV.
    Train(TrainArgs),
    /// Score a dataset with a trained checkpoint and report metrics.
    Detect(DetectArgs),
    /// Run one federation experiment and write its report.
    Simulate(SimArgs),
    /// Recompute metrics from a saved trace.
    Evaluate(EvalArgs),
    /// Generate a labeled synthetic anomaly dataset.
    GenSynthetic(GenArgs),
    /// Run several modes over paired seeds and tabulate them.
    Compare(CompareArgs),
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable outcome"));
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(a) => print_json(&cmd_train(&a)?),
        Cmd::Detect(a) => {
            let outcome = cmd_detect(&a)?;
            if a.out.is_none() {
                print_json(&outcome);
            }
        }
        Cmd::Simulate(a) => print_json(&cmd_simulate(a)?),
        Cmd::Evaluate(a) => print_json(&cmd_evaluate(&a)?),
        Cmd::GenSynthetic(a) => print_json(&cmd_gen_synthetic(&a)?),
        Cmd::Compare(a) => {
            let outcome = cmd_compare(a)?;
            print!("{}", compare_table(&outcome));
        }
    }
    Ok(())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not usage errors.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
