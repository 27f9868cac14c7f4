//! Forward flow of the linear jump diffusion on a small mesh, with the
//! flow-property checks.
//!
//! cargo run --release --example simulate_flow

use bsipde::experiment::{run_experiment, Command, ExperimentConfig};

fn main() -> bsipde::Result<()> {
    let cfg = ExperimentConfig { steps: 128, paths: 200, ..Default::default() };
    for command in [Command::Simulate, Command::VerifyFlow] {
        let run = run_experiment(&cfg, command)?;
        for c in &run.summary.checks {
            println!("{:>5} {:<32} {:.3e} {} {:.1e}", if c.pass { "ok" } else { "FAIL" }, c.name, c.statistic, c.relation, c.tolerance);
        }
        for t in &run.tables {
            println!("{}: {} rows, columns {:?}", t.name, t.rows.len(), t.columns);
        }
    }
    Ok(())
}
