//! Runs the sweep in `configs/sweep.json` and prints the per-variant summary.
//! The `bico run-experiment --config` command does the same from the shell.

use bico::cli::{run_sweep, ExperimentConfig};

fn main() -> bico::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/sweep.json");
    let cfg = ExperimentConfig::load(path)?;
    let report = run_sweep(&cfg)?;
    print!("{}", report.summary_csv());
    println!("{}", report.cost_line());
    Ok(())
}
