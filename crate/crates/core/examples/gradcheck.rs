//! Finite-difference check of the analytic gradients, optionally over a range of seeds.
//!
//! cargo run --example gradcheck -- [first_seed] [count]

use umman::gradcheck::{run_gradcheck, GradcheckConfig};

fn main() -> umman::Result<()> {
    let mut args = std::env::args().skip(1);
    let first: u64 = args.next().map_or(0, |a| a.parse().expect("seed"));
    let count: u64 = args.next().map_or(1, |a| a.parse().expect("count"));
    let mut failed = 0;
    for seed in first..first + count {
        let report = run_gradcheck(&GradcheckConfig {
            seed,
            ..GradcheckConfig::default()
        })?;
        if count == 1 {
            print!("{}", report.to_text());
        }
        if !report.passed() {
            failed += 1;
            println!("seed {seed}: failing {:?}", report.failing());
        }
    }
    println!("{} of {count} seeds passed", count - failed);
    Ok(())
}
