//! Residual of the backward stochastic integro-PDE for the composed field,
//! its order under refinement, and how a perturbed field fails it.
//!
//! cargo run --release --example bsipde_residual

use bsipde::experiment::{run_experiment, Command, ExperimentConfig, MeshConfig};

fn main() -> bsipde::Result<()> {
    // The cross-path mean residual needs a few hundred paths before its
    // slope settles.
    let cfg = ExperimentConfig { paths: 800, levels: vec![8, 16, 32, 64], ..Default::default() };
    let run = run_experiment(&cfg, Command::VerifyResidual)?;
    for s in &run.summary.slopes {
        println!("residual order {:.3}", s.order);
    }
    let perturbed = ExperimentConfig {
        perturbation: 0.1,
        paths: 3000,
        levels: vec![64],
        mesh: MeshConfig { lo: 0.1, hi: 4.5, h: 0.2 },
        queries: MeshConfig { lo: 0.5, hi: 2.0, h: 1.0 / 16.0 },
        ..Default::default()
    };
    let run = run_experiment(&perturbed, Command::VerifyResidual)?;
    for c in &run.summary.checks {
        println!("{} {} {:.3e} {} {:.1e}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.statistic, c.relation, c.tolerance);
    }
    Ok(())
}
