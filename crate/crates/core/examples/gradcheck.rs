//! Central-difference check of every parameter of the toy model.
//!
//!     cargo run --release --example gradcheck -- 7

use radicalc::gradcheck::pipeline_grad_check;

fn main() -> radicalc::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let start = std::time::Instant::now();
    let report = pipeline_grad_check(seed)?;
    println!(
        "seed {seed}: {} entries, max rel err {:.3e} at {:?} ({:.1}s)",
        report.entries_checked,
        report.max_rel_err,
        report.worst,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
