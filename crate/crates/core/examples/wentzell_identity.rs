//! Pathwise jump Ito-Wentzell identity for the built-in field cases, with
//! the observed convergence order of the discrepancy.
//!
//! cargo run --release --example wentzell_identity

use bsipde::ito_wentzell::{wentzell_case, wentzell_convergence, WENTZELL_CASES};
use bsipde::noise::{generate_ensemble, TimeGrid};

fn main() -> bsipde::Result<()> {
    let levels = [64, 128, 256, 512];
    for name in WENTZELL_CASES {
        let case = wentzell_case(name)?;
        let grid = TimeGrid::new(case.problem.model.horizon, 512)?;
        let fine = generate_ensemble(grid, &case.problem.model.marks, case.problem.model.dim_brownian, 3, 24)?;
        let study = wentzell_convergence(&case, &fine, &levels)?;
        let order = if study.fit.exact { "exact".to_string() } else { format!("{:.3}", study.fit.order) };
        println!("{name:<22} order {order:<6} max {:.2e}", study.max.iter().fold(0.0_f64, |a, b| a.max(*b)));
    }
    Ok(())
}
