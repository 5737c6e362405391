//! Runs the finite-difference suite and prints the worst relative error of
//! each case.
//!
//!     cargo run --release --example gradcheck

use iomatch::gradcheck::{run_suite, DEFAULT_TOLERANCE};

fn main() -> iomatch::Result<()> {
    let results = run_suite()?;
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    for r in &results {
        println!("{:<44} {:.2e}", r.name, r.max_rel_error);
    }
    println!("worst {worst:.2e} (tolerance {DEFAULT_TOLERANCE:e})");
    Ok(())
}
