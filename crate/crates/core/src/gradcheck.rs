//! Finite-difference check of every analytic gradient on a small model.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use crate::autodiff::AdjointFault;
use crate::autodiff::{finite_difference, relative_error, ParamSet, Tape, Tensor};
use crate::error::Result;
use crate::graph::{DistanceKind, MultiGraph};
use crate::model::{self, GraphInputs, ModelConfig, UmmanParams};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub nodes: usize,
    pub features: usize,
    pub model: ModelConfig,
    pub step: f64,
    pub tolerance: f64,
    #[doc(hidden)]
    pub fault: Option<AdjointFault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            nodes: 6,
            features: 5,
            model: ModelConfig {
                embed_dim: 4,
                bins: 3,
                ..ModelConfig::default()
            },
            step: 1e-5,
            tolerance: 1e-4,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupResult {
    pub group: String,
    pub entries: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.groups.iter().filter(|g| !g.passed).map(|g| g.group.as_str()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            let _ = writeln!(
                out,
                "{:<14} entries {:>4}  max rel err {:.3e}  {}",
                g.group,
                g.entries,
                g.max_relative_error,
                if g.passed { "ok" } else { "FAIL" }
            );
        }
        out
    }
}

/// The model, graphs and corruption the check runs on.
pub struct Instance {
    pub config: ModelConfig,
    pub graphs: MultiGraph,
    pub params: UmmanParams,
}

impl Instance {
    pub fn new(cfg: &GradcheckConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let x = Tensor::from_fn(cfg.nodes, cfg.features, |_, _| rng.random_range(0.05..1.0));
        let graphs = MultiGraph::build(&x, &DistanceKind::ALL, 0.6, rng.random())?;
        let mut params = UmmanParams::init(&cfg.model, &DistanceKind::ALL, cfg.features, rng.random())?;
        // Zero biases put ReLU inputs of dead rows exactly on the kink. Redraw them until every
        // pre-activation is well clear of zero, so a ±h step never crosses a kink.
        for _ in 0..MAX_REDRAWS {
            for p in params.store.iter_mut() {
                if p.name.ends_with(".bias") || p.name == "eta_raw" {
                    let (r, c) = p.value.shape();
                    p.value = Tensor::from_fn(r, c, |_, _| rng.random_range(-0.1..0.1));
                }
            }
            if relu_margin(&graphs, &params)? >= KINK_MARGIN {
                break;
            }
        }
        Ok(Instance {
            config: cfg.model.clone(),
            graphs,
            params,
        })
    }
}

const KINK_MARGIN: f64 = 1e-3;
const MAX_REDRAWS: usize = 200;

/// Smallest `|z|` over every ReLU input of every tower, on original and shuffled features.
pub fn relu_margin(graphs: &MultiGraph, params: &UmmanParams) -> Result<f64> {
    let mut margin = f64::INFINITY;
    for x in [graphs.features().clone(), graphs.shuffled_features()] {
        for (t, a) in graphs.normalized().iter().enumerate() {
            let mut h = x.clone();
            for layer in params.gcn_layers(t) {
                let mut z = a.matrix().matmul(&h.matmul(params.store.value(layer.weight))?)?;
                let b = params.store.value(layer.bias);
                for i in 0..z.rows() {
                    for (v, bj) in z.row_mut(i).iter_mut().zip(b.data()) {
                        *v += bj;
                        margin = margin.min(v.abs());
                    }
                }
                h = z.map(|v| v.max(0.0));
            }
        }
    }
    Ok(margin)
}

/// Compare analytic and central-difference gradients for each parameter group.
///
/// The numeric side evaluates the loss with the histograms frozen at the base point and the
/// same corruption, matching the stop-gradient treatment of the analytic side.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let Instance {
        config,
        graphs,
        mut params,
    } = Instance::new(cfg)?;
    let adjacency = graphs.normalized();
    let shuffled = graphs.shuffled_features();
    let inputs = GraphInputs {
        adjacency: &adjacency,
        features: graphs.features(),
        shuffled: &shuffled,
    };

    let mut tape = Tape::new();
    if let Some(f) = cfg.fault {
        tape.inject_fault(f);
    }
    let out = model::forward(&mut tape, &params, &config, &inputs, None)?;
    params.store.zero_grad();
    tape.backward(out.loss, &mut params.store)?;
    let frozen = out.histograms.clone();
    let embeddings = tape.value(out.merged).clone();

    let mut worst: BTreeMap<&'static str, (usize, f64)> = BTreeMap::new();
    let ids: Vec<_> = params.store.ids().collect();
    for id in ids {
        let analytic = params.store.grad(id).clone();
        let group = params.group_of(id).name();
        let indexed = params.clone();
        let numeric = finite_difference(&mut params.store, id, cfg.step, |store| {
            let mut tape = Tape::new();
            let p = with_store(&indexed, store);
            let out = model::forward(&mut tape, &p, &config, &inputs, Some(&frozen))?;
            tape.value(out.loss).item()
        })?;
        let e = worst.entry(group).or_insert((0, 0.0));
        e.0 += analytic.len();
        e.1 = e.1.max(relative_error(&analytic, &numeric));
    }

    let (n, c) = classifier_group(&embeddings, cfg)?;
    let mut groups: Vec<GroupResult> = ["gcn", "queries", "discriminator", "eta"]
        .iter()
        .map(|g| {
            let (entries, err) = worst.get(g).copied().unwrap_or((0, 0.0));
            GroupResult {
                group: g.to_string(),
                entries,
                max_relative_error: err,
                passed: err < cfg.tolerance,
            }
        })
        .collect();
    groups.push(GroupResult {
        group: "classifier".into(),
        entries: n,
        max_relative_error: c,
        passed: c < cfg.tolerance,
    });
    Ok(GradcheckReport { seed: cfg.seed, groups })
}

fn with_store(indexed: &UmmanParams, store: &ParamSet) -> UmmanParams {
    let mut p = indexed.clone();
    p.store = store.clone();
    p
}

fn classifier_group(embeddings: &Tensor, cfg: &GradcheckConfig) -> Result<(usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let d = embeddings.cols();
    let labels: Vec<usize> = (0..embeddings.rows()).map(|i| i % 2).collect();
    let mut ps = ParamSet::new();
    let w = ps.add("classifier.weight", Tensor::from_fn(d, 2, |_, _| rng.random_range(-1.0..1.0)));
    let b = ps.add("classifier.bias", Tensor::from_fn(1, 2, |_, _| rng.random_range(-1.0..1.0)));
    let loss = |ps: &ParamSet, tape: &mut Tape| -> Result<_> {
        let x = tape.constant(embeddings.clone());
        let (wv, bv) = (tape.param(ps, w), tape.param(ps, b));
        let logits = model::classify(tape, x, wv, bv)?;
        tape.softmax_cross_entropy(logits, &labels)
    };
    let mut tape = Tape::new();
    if let Some(f) = cfg.fault {
        tape.inject_fault(f);
    }
    let l = loss(&ps, &mut tape)?;
    tape.backward(l, &mut ps)?;
    let mut entries = 0;
    let mut err: f64 = 0.0;
    for id in [w, b] {
        let analytic = ps.grad(id).clone();
        let numeric = finite_difference(&mut ps, id, cfg.step, |ps| {
            let mut tape = Tape::new();
            let l = loss(ps, &mut tape)?;
            tape.value(l).item()
        })?;
        entries += analytic.len();
        err = err.max(relative_error(&analytic, &numeric));
    }
    Ok((entries, err))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_passes_every_group() {
        let r = run_gradcheck(&GradcheckConfig::default()).unwrap();
        assert_eq!(r.groups.len(), 5);
        assert!(r.passed(), "{}", r.to_text());
        assert!(r.groups.iter().all(|g| g.entries > 0));
    }

    #[test]
    fn broken_sigmoid_adjoint_fails_gcn() {
        let cfg = GradcheckConfig {
            fault: Some(AdjointFault::Sigmoid),
            ..GradcheckConfig::default()
        };
        let r = run_gradcheck(&cfg).unwrap();
        assert!(r.failing().contains(&"gcn"), "{}", r.to_text());
    }
}
