//! Finite-difference checks over every op, the network, and the full objective.
//!
//! cargo run --example gradient_checks

use dinomm::checks;
use dinomm::tensor::GradCase;

fn main() -> dinomm::Result<()> {
    let reports = checks::run_all(&checks::full_suite(0)?, 1e-5)?;
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("non-empty");
    for r in &reports {
        println!("{:<40} {:.2e}", r.name, r.max_rel_error);
    }
    println!(
        "{} cases, worst {} at {:.2e}",
        reports.len(),
        worst.name,
        worst.max_rel_error
    );

    let fault = GradCase::faulty_fixture().run(1e-5)?;
    println!(
        "a deliberately wrong backward is caught: {} -> {:.2e}",
        fault.name, fault.max_rel_error
    );
    Ok(())
}
