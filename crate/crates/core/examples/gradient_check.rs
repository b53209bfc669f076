//! Central-difference check of every layer's hand-written backward pass.
//!
//! cargo run --release --example gradient_check -- [seed]

use gaitgraph::gradcheck::layer_suite;

fn main() -> gaitgraph::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut worst = 0.0f64;
    for check in layer_suite(seed)? {
        let err = check.report.max_relative_error();
        worst = worst.max(err);
        let checked: usize = check.report.tensors.iter().map(|t| t.checked).sum();
        println!("{:<36} {:>5} entries  max relative error {:.2e}", check.layer, checked, err);
    }
    println!("worst {worst:.2e} ({})", if worst < 1e-4 { "pass" } else { "FAIL" });
    Ok(())
}
