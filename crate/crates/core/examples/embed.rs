//! Train the unsupervised encoder and inspect the merged embeddings.
//!
//! cargo run --example embed -- [epochs]

use umman::ingest::synth_cohort;
use umman::model::ModelConfig;
use umman::train::{build_multigraph, embeddings, train_unsupervised, TrainConfig};

fn main() -> umman::Result<()> {
    let epochs = std::env::args().nth(1).map_or(50, |a| a.parse().expect("epochs"));
    let (table, labels) = synth_cohort(20, 30, 2.0, 5)?;
    let cfg = TrainConfig {
        epochs,
        model: ModelConfig {
            embed_dim: 32,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let mg = build_multigraph(table.values(), &cfg)?;
    let trained = train_unsupervised(&mg, &cfg)?;
    let trace = &trained.loss_trace;
    println!("loss {:.4} -> {:.4}", trace[0], trace[trace.len() - 1]);

    let x = embeddings(&trained.params, &cfg, &mg.normalized(), mg.features())?;
    let mut centroids = [vec![0.0; x.cols()], vec![0.0; x.cols()]];
    for i in 0..x.rows() {
        let c = &mut centroids[labels.get(i) as usize];
        for (a, v) in c.iter_mut().zip(x.row(i)) {
            *a += v / labels.count(labels.get(i)) as f64;
        }
    }
    let gap: f64 = centroids[0].iter().zip(&centroids[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    println!("{} x {} embedding, class-centroid distance {gap:.4}", x.rows(), x.cols());
    Ok(())
}
