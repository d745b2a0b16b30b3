//! Parse a tab-separated abundance table and drop rare features.
//!
//! cargo run --example preprocess -- [table.tsv]

use umman::ingest::{filter_low_abundance_report, parse_abundance_table, synth_cohort, FilterPolicy};

fn main() -> umman::Result<()> {
    let table = match std::env::args().nth(1) {
        Some(path) => {
            let text = std::fs::read_to_string(&path).expect("readable table");
            parse_abundance_table(&text, '\t')?
        }
        None => synth_cohort(20, 12, 2.0, 1)?.0,
    };
    let policy = FilterPolicy {
        abundance_threshold: 0.05,
        host_count_threshold: table.n_samples() / 2,
    };
    let (kept, removed) = filter_low_abundance_report(&table, &policy)?;
    println!(
        "{} samples, {} features; kept {}",
        table.n_samples(),
        table.n_features(),
        kept.n_features()
    );
    for r in removed {
        println!("removed {:<12} below threshold in {} samples", r.name, r.low_count);
    }
    Ok(())
}
