//! Run the built-in verification suites: gradient checks on every operator
//! and on the assembled modules, attention normalization, tiling coverage,
//! average-precision oracles, and a negative control proving the gradient
//! checker actually rejects a miscalibrated backward pass.
//!
//! Run with: cargo run --release --example self_check

use aerialdet::selfcheck::run_self_check;

fn main() {
    let report = run_self_check(42);
    println!("{}", report.render_text());

    // The report is plain data; serialize it for dashboards or CI artifacts.
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("machine-readable form:\n{json}");
    assert!(report.passed);
}
