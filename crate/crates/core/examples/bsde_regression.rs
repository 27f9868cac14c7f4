//! Regression BSDE on the linear problem, compared with its closed form,
//! plus the a-priori estimate report.
//!
//! cargo run --release --example bsde_regression

use bsipde::experiment::{run_experiment, Command, ExperimentConfig};

fn main() -> bsipde::Result<()> {
    let cfg = ExperimentConfig { steps: 32, paths: 4000, ..Default::default() };
    let run = run_experiment(&cfg, Command::Bsde)?;
    for t in &run.tables {
        println!("{}", t.columns.join(","));
        for row in t.rows.iter().step_by(8) {
            println!("{}", row.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","));
        }
    }
    for c in &run.summary.checks {
        println!("{} {} {:.3e} {} {:.1e}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.statistic, c.relation, c.tolerance);
    }
    for (_, report) in &run.reports {
        println!("Y0 {} (se {})", report["y0"], report["y0_se"]);
        println!("a-priori estimate {}", report["estimate"]);
    }
    Ok(())
}
