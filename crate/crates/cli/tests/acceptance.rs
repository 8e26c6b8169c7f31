//! Acceptance battery: one line per criterion, non-zero exit if any fails.
//!
//! `cargo test -p finslerlab-cli --test acceptance -- 3 7` runs a subset.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use finslerlab_cli::suite::criteria;

const SEED: u64 = 42;
const TOTAL_BUDGET: Duration = Duration::from_secs(300);

fn main() -> ExitCode {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let start = Instant::now();
    let mut ok = true;
    for c in criteria().into_iter().filter(|c| only.is_empty() || only.contains(&c.id)) {
        let out = c.run_with(SEED);
        println!("{}", out.line());
        for f in out.checks.iter().filter(|c| !c.pass) {
            println!("    {} = {:?} (tolerance {}) witness {}", f.name, f.value, f.tolerance, f.witness.as_ref().map_or("-".into(), |w| w.to_string()));
        }
        if !out.within_budget() {
            println!("    over time budget");
        }
        ok &= out.pass() && out.within_budget();
    }
    let total = start.elapsed();
    println!("acceptance total {:.1} s (budget {} s)", total.as_secs_f64(), TOTAL_BUDGET.as_secs());
    if only.is_empty() {
        ok &= total <= TOTAL_BUDGET;
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
