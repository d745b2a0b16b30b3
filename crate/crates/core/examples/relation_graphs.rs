//! Distance matrices and thresholded host graphs for each relation type.

use umman::graph::{build_relation_graph, normalize_adjacency, pairwise_distances, DistanceKind};
use umman::ingest::synth_cohort;

fn main() -> umman::Result<()> {
    let (table, labels) = synth_cohort(8, 20, 2.0, 3)?;
    let x = table.values();
    for kind in DistanceKind::ALL {
        let d = pairwise_distances(x, kind)?;
        let g = build_relation_graph(&d, kind, 0.6)?;
        // Fraction of edges joining hosts of the same class.
        let edges = g.edges();
        let same = edges.iter().filter(|&&(i, j)| labels.get(i) == labels.get(j)).count();
        let norm = normalize_adjacency(&g);
        println!(
            "{kind:<12} edges {:>3}  same-class {:.2}  d(s0,s1) {:.4}  A(0,0) {:.4}",
            edges.len(),
            same as f64 / edges.len().max(1) as f64,
            d.get(0, 1),
            norm.matrix().get(0, 0)
        );
    }
    Ok(())
}
