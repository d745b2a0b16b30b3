//! Save a trained model, load it back and evaluate it.

use umman::ingest::synth_cohort;
use umman::train::{build_multigraph, evaluate_checkpoint, train_unsupervised, Checkpoint, TrainConfig};

fn main() -> umman::Result<()> {
    let (table, labels) = synth_cohort(20, 20, 2.0, 9)?;
    let cfg = TrainConfig {
        epochs: 100,
        eval_seeds: 2,
        ..TrainConfig::default()
    };
    let mg = build_multigraph(table.values(), &cfg)?;
    let trained = train_unsupervised(&mg, &cfg)?;
    let ckpt = Checkpoint::new(cfg, trained);

    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("model.umman");
    ckpt.save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    println!(
        "{} bytes, {} parameters, identical after reload: {}",
        std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0),
        loaded.params.store.len(),
        loaded == ckpt
    );
    print!("{}", evaluate_checkpoint(&table, &labels, &loaded)?.to_text());
    Ok(())
}
