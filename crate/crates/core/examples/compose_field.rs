//! Composes the BSDE family with the inverse flow into the random field
//! (p, q, r) and checks p against x e^{a(T-t)}.
//!
//! cargo run --release --example compose_field

use bsipde::experiment::{run_experiment, Command, Cell, ExperimentConfig};

fn main() -> bsipde::Result<()> {
    let cfg = ExperimentConfig { steps: 32, paths: 500, ..Default::default() };
    let run = run_experiment(&cfg, Command::Compose)?;
    for c in &run.summary.checks {
        println!("{} {} {:.3e} {} {:.1e}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.statistic, c.relation, c.tolerance);
    }
    // p at t = 0 on path 0.
    if let Some(t) = run.tables.first() {
        println!("{}", t.columns.join(","));
        for row in t.rows.iter().filter(|r| matches!((&r[0], &r[5]), (Cell::Num(t), Cell::Int(0)) if *t == 0.0)).step_by(8) {
            println!("{}", row.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","));
        }
    }
    Ok(())
}
