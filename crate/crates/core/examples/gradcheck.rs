//! Runs the finite-difference gradient suite and prints one row per case.
//!
//! ```text
//! cargo run --release --example gradcheck -- [seeds]
//! ```

use clozeread::gradsuite::{run_suite, TOLERANCE};

fn main() -> clozeread::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let results = run_suite(seeds)?;
    println!("{:<24} {:>6} {:>12} {:>8}", "case", "seeds", "max rel err", "seconds");
    for r in &results {
        let mark = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<24} {:>6} {:>12.3e} {:>8.2}  {mark}", r.name, r.seeds, r.max_rel_err, r.seconds);
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    let total: f64 = results.iter().map(|r| r.seconds).sum();
    println!("{} cases, {failed} failed, tolerance {TOLERANCE:e}, {total:.1}s", results.len());
    Ok(())
}
