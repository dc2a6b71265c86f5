//! Runs the finite-difference gradient-check suite over every graph
//! operation, the GE2E loss and the combined criterion.
//!
//!     cargo run --example gradient_check -- [seed] [tolerance]

use accent_ge2e::checks::run_suite;
use accent_ge2e::numerics::GradCheckConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let tolerance: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1e-4);

    let checks = run_suite(seed, &GradCheckConfig::new(1e-4, tolerance))?;
    for c in &checks {
        let status = if c.report.passed { "pass" } else { "FAIL" };
        println!("{:<24} {status}  {:.2e}", c.name, c.report.max_relative_error);
    }
    let failed = checks.iter().filter(|c| !c.report.passed).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
    Ok(())
}
