//! The two-part graph summary: sigmoid of the node mean plus a value histogram.

use umman::autodiff::{Tape, Tensor};
use umman::model::{nfgi, HistogramWeighting};

fn main() -> umman::Result<()> {
    let h = Tensor::from_rows(&[[0.0, 1.5, 0.2], [0.4, 3.0, 0.0], [0.1, 0.9, 2.2]]);
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    for weighting in [HistogramWeighting::Magnitude, HistogramWeighting::Count] {
        let s = nfgi(&mut tape, hv, 4, weighting, None)?;
        println!("{weighting:?}");
        println!("  node level  {:?}", tape.value(s.node_level).data());
        println!("  histogram   {:?}", s.histogram.expect("nfgi histogram").data());
    }
    Ok(())
}
