//! Full model against each single-component ablation.
//!
//! cargo run --release --example ablation -- [epochs] [eval_seeds]

use umman::ingest::synth_cohort;
use umman::train::{run_cross_validation, TrainConfig};

fn main() -> umman::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(100, |a| a.parse().expect("epochs"));
    let eval_seeds = args.next().map_or(2, |a| a.parse().expect("eval_seeds"));
    let (table, labels) = synth_cohort(60, 60, 1.0, 7)?;
    let base = TrainConfig {
        epochs,
        eval_seeds,
        seed: 7,
        ..TrainConfig::default()
    };
    type Tweak = fn(&mut TrainConfig);
    let variants: [(&str, Tweak); 4] = [
        ("full", |_| {}),
        ("no attention", |c| c.model.use_attention = false),
        ("no nfgi", |c| c.model.use_nfgi = false),
        ("no adversarial", |c| c.model.use_adversarial = false),
    ];
    for (name, tweak) in variants {
        let mut cfg = base.clone();
        tweak(&mut cfg);
        let a = run_cross_validation(&table, &labels, &cfg)?.aggregate;
        let auc = a.auc.map_or(f64::NAN, |s| s.mean);
        println!("{name:<15} accuracy {:.4} ± {:.4}  auc {auc:.4}", a.accuracy.mean, a.accuracy.std);
    }
    Ok(())
}
