//! Run the gradient verification suite and print one line per check.
//!
//! cargo run --release --example gradcheck_suite -- [seeds]

fn main() -> point3d::Result<()> {
    let seeds = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let start = std::time::Instant::now();
    let cases = point3d::gradsuite::run_suite(seeds)?;
    for c in &cases {
        println!(
            "{:<20} seed {:>2}  err {:.2e}  tol {:.0e}  {}",
            c.name,
            c.seed,
            c.max_rel_error,
            c.tolerance,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed = cases.iter().filter(|c| !c.passed()).count();
    println!("{} checks, {failed} failed, {:.1} s", cases.len(), start.elapsed().as_secs_f64());
    Ok(())
}
