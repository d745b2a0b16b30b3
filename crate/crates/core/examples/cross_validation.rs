//! Five-fold evaluation of unsupervised embeddings on a synthetic cohort.
//!
//! cargo run --example cross_validation -- [epochs] [eval_seeds]

use std::time::Instant;

use umman::ingest::synth_cohort;
use umman::train::{run_cross_validation, TrainConfig};

fn main() -> umman::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(200, |a| a.parse().expect("epochs"));
    let eval_seeds = args.next().map_or(1, |a| a.parse().expect("eval_seeds"));
    let (table, labels) = synth_cohort(60, 60, 2.0, 7)?;
    let cfg = TrainConfig {
        epochs,
        eval_seeds,
        seed: 7,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let report = run_cross_validation(&table, &labels, &cfg)?;
    print!("{}", report.to_text());
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
