//! Galerkin jump evolution: zero system, heat modes, energy-identity order
//! on the scalar jump system and the coercivity probes.
//!
//! cargo run --release --example galerkin_systems

use bsipde::experiment::{run_experiment, Command, ExperimentConfig};

fn main() -> bsipde::Result<()> {
    let jobs = [
        ("zero", 64, Command::Galerkin, vec![]),
        ("heat", 4096, Command::Galerkin, vec![]),
        ("fourier-coercive", 256, Command::Galerkin, vec![]),
        ("fourier-degenerate", 256, Command::Galerkin, vec![]),
        ("scalar-jump", 4096, Command::VerifyEnergy, vec![256, 1024, 4096]),
    ];
    for (system, steps, command, levels) in jobs {
        let mut cfg = ExperimentConfig { system: system.into(), steps, paths: 64, ..Default::default() };
        if !levels.is_empty() {
            cfg.levels = levels;
        }
        let run = run_experiment(&cfg, command)?;
        println!("[{system}]");
        for c in &run.summary.checks {
            println!("  {} {} {:.3e} {} {:.1e}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.statistic, c.relation, c.tolerance);
        }
    }
    Ok(())
}
