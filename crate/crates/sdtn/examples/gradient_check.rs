//! Verify every analytic gradient against central finite differences.
//!
//! Covers each network layer, the classification loss, every term of the
//! decomposition objective, and the full joint objective. A component
//! passes when the worst relative error over all probes stays within 1e-4.
//!
//! Run with: cargo run --example gradient_check

fn main() -> sdtn::Result<()> {
    let report = sdtn::gradcheck::run_all(42)?;
    for c in &report.components {
        println!(
            "{} {:<28} instances {:>3}  max rel error {:.3e}",
            if c.passed { "pass" } else { "FAIL" },
            c.name,
            c.instances,
            c.max_rel_error
        );
    }
    println!(
        "\n{} components, tolerance {:.0e}, all passed: {}",
        report.components.len(),
        report.tolerance,
        report.all_passed()
    );
    std::process::exit(if report.all_passed() { 0 } else { 1 });
}
