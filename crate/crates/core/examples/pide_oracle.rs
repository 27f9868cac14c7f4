//! Deterministic finite-difference solution of the integro-PDE, checked
//! against the closed-form field of the linear problem.
//!
//! cargo run --release --example pide_oracle

use bsipde::catalog::catalog_problem;
use bsipde::feynman_kac::pide_reference;
use bsipde::interp::Uniform;

fn main() -> bsipde::Result<()> {
    let problem = catalog_problem("linear-jump-diffusion")?;
    let field = pide_reference(&problem.model, 4096, Uniform::covering(0.0, 6.0, 0.1))?;
    let mut worst: f64 = 0.0;
    for t in [0.0, 0.25, 0.5, 0.75] {
        for x in [0.5, 1.0, 2.0, 3.0] {
            let (v, exact) = (field.eval(t, x).unwrap_or(f64::NAN), problem.oracle_field(t, x).unwrap_or(f64::NAN));
            worst = worst.max((v - exact).abs());
            println!("t={t:.2} x={x:.1}  pide {v:.6}  exact {exact:.6}");
        }
    }
    println!("max abs error {worst:.2e}");
    Ok(())
}
