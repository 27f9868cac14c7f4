//! The three inverse-flow constructions on the pure-jump shift problem,
//! then the inverse-identity convergence study.
//!
//! cargo run --release --example invert_flow

use bsipde::experiment::{run_experiment, Command, ExperimentConfig, MeshConfig};
use bsipde::inverse_flow::InverseMethod;

fn main() -> bsipde::Result<()> {
    let base = ExperimentConfig {
        problem: "pure-jump-shift".into(),
        steps: 256,
        paths: 64,
        mesh: MeshConfig { lo: -2.0, hi: 4.0, h: 1.0 / 32.0 },
        queries: MeshConfig { lo: -1.0, hi: 3.0, h: 1.0 / 16.0 },
        levels: vec![32, 64, 128, 256],
        ..Default::default()
    };
    for method in [InverseMethod::GridInversion, InverseMethod::Sipde, InverseMethod::BackwardSde] {
        let cfg = ExperimentConfig { inverse_method: method, ..base.clone() };
        let run = run_experiment(&cfg, Command::Invert)?;
        let rows: usize = run.tables.iter().map(|t| t.rows.len()).sum();
        println!("{:<10} rows {rows:>7}  pass {}", method.tag(), run.summary.pass);
        for c in &run.summary.checks {
            println!("    {:<30} {:.3e} {} {:.1e}", c.name, c.statistic, c.relation, c.tolerance);
        }
    }
    let run = run_experiment(&base, Command::Convergence)?;
    for s in &run.summary.slopes {
        println!("slope {:<28} {:.3}{}", s.name, s.order, if s.exact { " (exact)" } else { "" });
    }
    Ok(())
}
