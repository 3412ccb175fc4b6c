//! Compare reverse-mode gradients against central finite differences for
//! every loss term and the full forward pass.

use semst::gradcheck::{run_gradcheck, GradcheckConfig};

fn main() -> semst::Result<()> {
    let config = GradcheckConfig::default();
    println!("{:<12} {:>8} {:>8} {:>12} {:>12}", "term", "checked", "kinks", "max rel", "max abs");
    for seed in [100, 101] {
        let report = run_gradcheck(seed, &config)?;
        println!("seed {seed}: {}", if report.passed() { "pass" } else { "FAIL" });
        for t in &report.terms {
            println!(
                "{:<12} {:>8} {:>8} {:>12.3e} {:>12.3e}",
                t.term, t.checked, t.skipped_at_kinks, t.max_rel_error, t.max_abs_error
            );
        }
    }
    Ok(())
}
