//! GCN encoders, NFGI readout, attention merge, discriminator and the joint loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{canonical_sum, ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{DistanceKind, NormalizedAdjacency};

/// How each embedding value is weighted in the graph-level histogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistogramWeighting {
    /// Each value contributes `|x|` to its bin.
    #[default]
    Magnitude,
    /// Each value contributes 1.
    Count,
}

/// Architecture and ablation switches shared by training and inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub gcn_layers: usize,
    pub bins: usize,
    pub heads: usize,
    pub histogram_weighting: HistogramWeighting,
    pub use_attention: bool,
    pub use_nfgi: bool,
    pub use_adversarial: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 256,
            gcn_layers: 3,
            bins: 16,
            heads: 4,
            histogram_weighting: HistogramWeighting::Magnitude,
            use_attention: true,
            use_nfgi: true,
            use_adversarial: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive");
        }
        if self.gcn_layers == 0 {
            return bad("gcn_layers must be positive");
        }
        if self.bins < 2 {
            return bad("bins must be at least 2");
        }
        if self.heads == 0 {
            return bad("heads must be positive");
        }
        Ok(())
    }

    /// Width of the graph summary fed to the discriminator.
    pub fn summary_dim(&self) -> usize {
        if self.use_nfgi {
            self.embed_dim + self.bins
        } else {
            self.embed_dim
        }
    }
}

/// Weight and bias of one GCN layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Parameter groups, as reported by the gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Gcn,
    Queries,
    Discriminator,
    Eta,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Gcn => "gcn",
            ParamGroup::Queries => "queries",
            ParamGroup::Discriminator => "discriminator",
            ParamGroup::Eta => "eta",
        }
    }
}

/// Every trainable tensor of the unsupervised model plus an index into them.
#[derive(Debug, Clone, PartialEq)]
pub struct UmmanParams {
    pub store: ParamSet,
    kinds: Vec<DistanceKind>,
    in_dim: usize,
    /// `[kind][layer]`
    gcn: Vec<Vec<LayerIds>>,
    /// `[head][kind]`, each D×1.
    queries: Vec<Vec<ParamId>>,
    /// `[kind]`, each summary_dim×D.
    disc: Vec<ParamId>,
    eta: ParamId,
}

fn gcn_name(kind: DistanceKind, layer: usize, part: &str) -> String {
    format!("gcn.{}.{layer}.{part}", kind.name())
}

fn query_name(head: usize, kind: DistanceKind) -> String {
    format!("attn.{head}.{}.query", kind.name())
}

fn disc_name(kind: DistanceKind) -> String {
    format!("disc.{}.weight", kind.name())
}

const ETA_NAME: &str = "eta_raw";

fn uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

impl UmmanParams {
    /// Fresh parameters: weights and queries `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero,
    /// `eta_raw = 0`.
    pub fn init(cfg: &ModelConfig, kinds: &[DistanceKind], in_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if kinds.is_empty() {
            return Err(Error::InvalidArgument("at least one relation type is required".into()));
        }
        if in_dim == 0 {
            return Err(Error::InvalidArgument("input feature width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let mut store = ParamSet::new();
        for &kind in kinds {
            for layer in 0..cfg.gcn_layers {
                let fan_in = if layer == 0 { in_dim } else { d };
                store.add(gcn_name(kind, layer, "weight"), uniform(fan_in, d, fan_in, &mut rng));
                store.add(gcn_name(kind, layer, "bias"), Tensor::zeros(1, d));
            }
        }
        for head in 0..cfg.heads {
            for &kind in kinds {
                store.add(query_name(head, kind), uniform(d, 1, d, &mut rng));
            }
        }
        let s = cfg.summary_dim();
        for &kind in kinds {
            store.add(disc_name(kind), uniform(s, d, s, &mut rng));
        }
        store.add(ETA_NAME, Tensor::scalar(0.0));
        Self::from_store(store, cfg, kinds, in_dim)
    }

    /// Index an existing parameter store by name, checking every shape.
    pub fn from_store(store: ParamSet, cfg: &ModelConfig, kinds: &[DistanceKind], in_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let lookup = |name: String, shape: (usize, usize)| -> Result<ParamId> {
            let id = store
                .find(&name)
                .ok_or_else(|| Error::CheckpointIntegrity(format!("missing parameter {name}")))?;
            let found = store.value(id).shape();
            if found != shape {
                return Err(Error::CheckpointIntegrity(format!(
                    "parameter {name} has shape {found:?}, expected {shape:?}"
                )));
            }
            Ok(id)
        };
        let mut gcn = Vec::new();
        for &kind in kinds {
            let mut layers = Vec::new();
            for layer in 0..cfg.gcn_layers {
                let rows = if layer == 0 { in_dim } else { d };
                layers.push(LayerIds {
                    weight: lookup(gcn_name(kind, layer, "weight"), (rows, d))?,
                    bias: lookup(gcn_name(kind, layer, "bias"), (1, d))?,
                });
            }
            gcn.push(layers);
        }
        let mut queries = Vec::new();
        for head in 0..cfg.heads {
            let mut row = Vec::new();
            for &kind in kinds {
                row.push(lookup(query_name(head, kind), (d, 1))?);
            }
            queries.push(row);
        }
        let disc = kinds
            .iter()
            .map(|&k| lookup(disc_name(k), (cfg.summary_dim(), d)))
            .collect::<Result<Vec<_>>>()?;
        let eta = lookup(ETA_NAME.to_string(), (1, 1))?;
        let expected = kinds.len() * (2 * cfg.gcn_layers + cfg.heads + 1) + 1;
        if store.len() != expected {
            return Err(Error::CheckpointIntegrity(format!(
                "expected {expected} parameters, found {}",
                store.len()
            )));
        }
        Ok(UmmanParams {
            store,
            kinds: kinds.to_vec(),
            in_dim,
            gcn,
            queries,
            disc,
            eta,
        })
    }

    pub fn kinds(&self) -> &[DistanceKind] {
        &self.kinds
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn gcn_layers(&self, kind_index: usize) -> &[LayerIds] {
        &self.gcn[kind_index]
    }

    pub fn query(&self, head: usize, kind_index: usize) -> ParamId {
        self.queries[head][kind_index]
    }

    pub fn discriminator(&self, kind_index: usize) -> ParamId {
        self.disc[kind_index]
    }

    pub fn eta(&self) -> ParamId {
        self.eta
    }

    /// Effective loss coefficient `softplus(eta_raw)`.
    pub fn eta_effective(&self) -> f64 {
        crate::autodiff::softplus(self.store.value(self.eta).data()[0])
    }

    pub fn group_of(&self, id: ParamId) -> ParamGroup {
        let name = &self.store.get(id).name;
        if name.starts_with("gcn.") {
            ParamGroup::Gcn
        } else if name.starts_with("attn.") {
            ParamGroup::Queries
        } else if name.starts_with("disc.") {
            ParamGroup::Discriminator
        } else {
            ParamGroup::Eta
        }
    }
}

/// One GCN tower: `H <- ReLU(A · H · W + b)` for each layer.
pub fn gcn_forward(tape: &mut Tape, adj: Var, x: Var, layers: &[(Var, Var)]) -> Result<Var> {
    let (n, _) = tape.value(adj).shape();
    if tape.value(adj).cols() != n || tape.value(x).rows() != n {
        return Err(Error::Shape {
            op: "gcn_forward",
            left: tape.value(adj).shape(),
            right: tape.value(x).shape(),
        });
    }
    let mut h = x;
    for &(w, b) in layers {
        let hw = tape.matmul(h, w)?;
        let ahw = tape.matmul(adj, hw)?;
        let z = tape.add_row(ahw, b)?;
        h = tape.relu(z);
    }
    Ok(h)
}

/// `sigmoid(column mean of H)`, 1×D.
pub fn nfgi_node_level(tape: &mut Tape, h: Var) -> Result<Var> {
    let m = tape.mean_rows(h)?;
    Ok(tape.sigmoid(m))
}

/// Weighted histogram of every value of `h` over `bins` equal bins spanning `[min, max]`, 1×K.
///
/// The top edge is closed. Weights are normalized to sum to 1; if they are all zero the
/// result is uniform, and if every value is equal the whole mass sits in bin 0.
pub fn nfgi_graph_level(h: &Tensor, bins: usize, weighting: HistogramWeighting) -> Result<Tensor> {
    if bins < 2 {
        return Err(Error::InvalidArgument("bins must be at least 2".into()));
    }
    if h.is_empty() {
        return Err(Error::Empty("embedding".into()));
    }
    if !h.all_finite() {
        return Err(Error::InvalidArgument("embedding contains non-finite values".into()));
    }
    let mut values = h.data().to_vec();
    values.sort_unstable_by(f64::total_cmp);
    let (lo, hi) = (values[0], values[values.len() - 1]);
    let weight = |x: f64| match weighting {
        HistogramWeighting::Magnitude => x.abs(),
        HistogramWeighting::Count => 1.0,
    };
    let total: f64 = values.iter().map(|&x| weight(x)).sum();
    let mut q = Tensor::zeros(1, bins);
    if total == 0.0 {
        q.fill(1.0 / bins as f64);
        return Ok(q);
    }
    if hi == lo {
        q.data_mut()[0] = 1.0;
        return Ok(q);
    }
    let mut mass = vec![0.0; bins];
    for &x in &values {
        let pos = ((x - lo) / (hi - lo) * bins as f64).floor() as usize;
        mass[pos.min(bins - 1)] += weight(x);
    }
    for (o, m) in q.data_mut().iter_mut().zip(mass) {
        *o = m / total;
    }
    Ok(q)
}

/// A graph summary and its node-level part.
#[derive(Debug, Clone)]
pub struct Summary {
    /// Fed to the discriminator, 1×summary_dim.
    pub summary: Var,
    /// Node-level part, 1×D; used for the global target.
    pub node_level: Var,
    /// Histogram actually used (absent when NFGI is disabled).
    pub histogram: Option<Tensor>,
}

/// NFGI readout `concat(p, q)`. The histogram is a constant on the tape; pass `frozen` to
/// reuse a previously computed one.
pub fn nfgi(tape: &mut Tape, h: Var, bins: usize, weighting: HistogramWeighting, frozen: Option<&Tensor>) -> Result<Summary> {
    let p = nfgi_node_level(tape, h)?;
    let q = match frozen {
        Some(q) if q.shape() == (1, bins) => q.clone(),
        Some(q) => {
            return Err(Error::Shape {
                op: "nfgi",
                left: q.shape(),
                right: (1, bins),
            })
        }
        None => nfgi_graph_level(tape.value(h), bins, weighting)?,
    };
    let qv = tape.constant(q.clone());
    let g = tape.concat_cols(&[p, qv])?;
    Ok(Summary {
        summary: g,
        node_level: p,
        histogram: Some(q),
    })
}

/// Ablation readout: plain column mean, no sigmoid and no histogram.
pub fn mean_readout(tape: &mut Tape, h: Var) -> Result<Summary> {
    let m = tape.mean_rows(h)?;
    Ok(Summary {
        summary: m,
        node_level: m,
        histogram: None,
    })
}

fn check_same_shapes(tape: &Tape, op: &'static str, hs: &[Var]) -> Result<()> {
    let first = hs.first().ok_or_else(|| Error::Empty(format!("{op} needs at least one embedding")))?;
    let shape = tape.value(*first).shape();
    for h in hs {
        if tape.value(*h).shape() != shape {
            return Err(Error::Shape {
                op,
                left: shape,
                right: tape.value(*h).shape(),
            });
        }
    }
    Ok(())
}

/// Merged embedding plus per-head attention weights (each N×|T|).
#[derive(Debug, Clone)]
pub struct Attention {
    pub merged: Var,
    pub weights: Vec<Var>,
}

/// Multi-head attention over relation types. `queries[head][kind]` are D×1.
pub fn attention_merge(tape: &mut Tape, hs: &[Var], queries: &[Vec<Var>]) -> Result<Attention> {
    check_same_shapes(tape, "attention_merge", hs)?;
    if queries.is_empty() {
        return Err(Error::InvalidArgument("attention needs at least one head".into()));
    }
    let mut heads = Vec::with_capacity(queries.len());
    let mut weights = Vec::with_capacity(queries.len());
    for head in queries {
        if head.len() != hs.len() {
            return Err(Error::InvalidArgument(format!(
                "head has {} queries for {} relation types",
                head.len(),
                hs.len()
            )));
        }
        let scores = hs
            .iter()
            .zip(head)
            .map(|(&h, &q)| tape.matmul(h, q))
            .collect::<Result<Vec<_>>>()?;
        let s = tape.concat_cols(&scores)?;
        let w = tape.softmax_rows(s)?;
        let mut acc: Option<Var> = None;
        for (t, &h) in hs.iter().enumerate() {
            let wt = tape.column(w, t)?;
            let term = tape.mul_col(h, wt)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        heads.push(acc.expect("at least one relation type"));
        weights.push(w);
    }
    let merged = mean_of(tape, &heads)?;
    Ok(Attention { merged, weights })
}

fn mean_of(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = tape.add(acc, x)?;
    }
    Ok(if xs.len() == 1 {
        acc
    } else {
        tape.mul_scalar(acc, 1.0 / xs.len() as f64)
    })
}

/// Unweighted mean over relation types.
pub fn average_merge(tape: &mut Tape, hs: &[Var]) -> Result<Var> {
    check_same_shapes(tape, "average_merge", hs)?;
    mean_of(tape, hs)
}

/// Bilinear logits `H · (g W)ᵀ`, N×1.
pub fn discriminator_logits(tape: &mut Tape, g: Var, w: Var, h: Var) -> Result<Var> {
    let gw = tape.matmul(g, w)?;
    let col = tape.transpose(gw);
    tape.matmul(h, col)
}

/// `sigmoid(g W hᵀ)` for a single node, 1×1.
pub fn discriminator_score(tape: &mut Tape, g: Var, h_node: Var, w: Var) -> Result<Var> {
    let z = discriminator_logits(tape, g, w, h_node)?;
    Ok(tape.sigmoid(z))
}

/// Mean binary cross-entropy over every positive and negative node of every relation type.
///
/// `summaries`, `positives`, `negatives` and `weights` are indexed by relation type.
pub fn adversarial_loss(tape: &mut Tape, summaries: &[Var], positives: &[Var], negatives: &[Var], weights: &[Var]) -> Result<Var> {
    let t = summaries.len();
    if t == 0 || positives.len() != t || negatives.len() != t || weights.len() != t {
        return Err(Error::InvalidArgument(
            "adversarial loss needs one summary, positive set, negative set and weight per relation type".into(),
        ));
    }
    let mut terms = 0usize;
    let mut acc: Option<Var> = None;
    for i in 0..t {
        let n = tape.value(positives[i]).rows();
        if n == 0 || tape.value(negatives[i]).rows() == 0 {
            return Err(Error::Empty("adversarial node set".into()));
        }
        let lp = discriminator_logits(tape, summaries[i], weights[i], positives[i])?;
        let ln = discriminator_logits(tape, summaries[i], weights[i], negatives[i])?;
        // BCE(z, 1) = softplus(-z), BCE(z, 0) = softplus(z).
        let neg_lp = tape.mul_scalar(lp, -1.0);
        let bp = tape.softplus(neg_lp);
        let bn = tape.softplus(ln);
        let sp = tape.sum_all(bp)?;
        let sn = tape.sum_all(bn)?;
        let s = tape.add(sp, sn)?;
        terms += n + tape.value(negatives[i]).rows();
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    Ok(tape.mul_scalar(acc.expect("nonempty"), 1.0 / terms as f64))
}

/// Mean of the node-level summaries broadcast to `n` rows.
pub fn global_target(tape: &mut Tape, node_levels: &[Var], n: usize) -> Result<Var> {
    check_same_shapes(tape, "global_target", node_levels)?;
    let mean = mean_of(tape, node_levels)?;
    tape.repeat_rows(mean, n)
}

/// `sum((P - X)²) - sum((P - X̃)²)`.
pub fn hybrid_attention_loss(tape: &mut Tape, p: Var, x: Var, x_neg: Var) -> Result<Var> {
    let dp = tape.sub(p, x)?;
    let dn = tape.sub(p, x_neg)?;
    let sp = tape.square(dp);
    let sn = tape.square(dn);
    let lp = tape.sum_all(sp)?;
    let ln = tape.sum_all(sn)?;
    tape.sub(lp, ln)
}

/// `l_adv + softplus(eta_raw) · l_hattn`; with `l_adv` absent only the second term remains.
pub fn joint_loss(tape: &mut Tape, l_adv: Option<Var>, l_hattn: Var, eta_raw: Var) -> Result<Var> {
    let coef = tape.softplus(eta_raw);
    let weighted = tape.scale_by(l_hattn, coef)?;
    match l_adv {
        Some(a) => tape.add(a, weighted),
        None => Ok(weighted),
    }
}

/// Per-relation-type inputs for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct GraphInputs<'a> {
    pub adjacency: &'a [NormalizedAdjacency],
    pub features: &'a Tensor,
    /// Features with rows permuted, same permutation for every relation type.
    pub shuffled: &'a Tensor,
}

/// Everything recorded by [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub loss: Var,
    pub adversarial: Option<Var>,
    pub hybrid: Var,
    pub merged: Var,
    pub merged_negative: Var,
    /// Histograms used for each relation type's summary (empty when NFGI is disabled).
    pub histograms: Vec<Tensor>,
}

fn record_layers(tape: &mut Tape, params: &UmmanParams, kind_index: usize) -> Vec<(Var, Var)> {
    params
        .gcn_layers(kind_index)
        .iter()
        .map(|l| (tape.param(&params.store, l.weight), tape.param(&params.store, l.bias)))
        .collect()
}

fn check_inputs(params: &UmmanParams, inputs: &GraphInputs) -> Result<()> {
    if inputs.adjacency.len() != params.kinds().len() {
        return Err(Error::InvalidArgument(format!(
            "{} adjacencies for {} relation types",
            inputs.adjacency.len(),
            params.kinds().len()
        )));
    }
    for (a, &k) in inputs.adjacency.iter().zip(params.kinds()) {
        if a.kind != k {
            return Err(Error::InvalidArgument(format!(
                "adjacency for {} where {} was expected",
                a.kind, k
            )));
        }
    }
    if inputs.features.cols() != params.in_dim() {
        return Err(Error::Shape {
            op: "forward",
            left: inputs.features.shape(),
            right: (inputs.features.rows(), params.in_dim()),
        });
    }
    if inputs.shuffled.shape() != inputs.features.shape() {
        return Err(Error::Shape {
            op: "forward",
            left: inputs.features.shape(),
            right: inputs.shuffled.shape(),
        });
    }
    Ok(())
}

fn merge(tape: &mut Tape, params: &UmmanParams, cfg: &ModelConfig, hs: &[Var]) -> Result<Var> {
    if cfg.use_attention {
        let queries: Vec<Vec<Var>> = (0..cfg.heads)
            .map(|h| {
                (0..hs.len())
                    .map(|t| tape.param(&params.store, params.query(h, t)))
                    .collect()
            })
            .collect();
        Ok(attention_merge(tape, hs, &queries)?.merged)
    } else {
        average_merge(tape, hs)
    }
}

/// Record the full unsupervised objective on `tape`.
///
/// `frozen` replaces the computed histograms, one per relation type.
pub fn forward(tape: &mut Tape, params: &UmmanParams, cfg: &ModelConfig, inputs: &GraphInputs, frozen: Option<&[Tensor]>) -> Result<ForwardOutput> {
    check_inputs(params, inputs)?;
    let t = params.kinds().len();
    if let Some(f) = frozen {
        if f.len() != t {
            return Err(Error::InvalidArgument(format!("{} frozen histograms for {t} relation types", f.len())));
        }
    }
    let n = inputs.features.rows();
    let x = tape.constant(inputs.features.clone());
    let xs = tape.constant(inputs.shuffled.clone());
    let mut pos = Vec::with_capacity(t);
    let mut neg = Vec::with_capacity(t);
    let mut summaries = Vec::with_capacity(t);
    let mut histograms = Vec::new();
    for (i, a) in inputs.adjacency.iter().enumerate() {
        let adj = tape.constant(a.matrix().clone());
        let layers = record_layers(tape, params, i);
        let h = gcn_forward(tape, adj, x, &layers)?;
        let hn = gcn_forward(tape, adj, xs, &layers)?;
        let s = if cfg.use_nfgi {
            nfgi(tape, h, cfg.bins, cfg.histogram_weighting, frozen.map(|f| &f[i]))?
        } else {
            mean_readout(tape, h)?
        };
        histograms.extend(s.histogram.clone());
        pos.push(h);
        neg.push(hn);
        summaries.push(s);
    }
    let adversarial = if cfg.use_adversarial {
        let ws: Vec<Var> = (0..t).map(|i| tape.param(&params.store, params.discriminator(i))).collect();
        let gs: Vec<Var> = summaries.iter().map(|s| s.summary).collect();
        Some(adversarial_loss(tape, &gs, &pos, &neg, &ws)?)
    } else {
        None
    };
    let merged = merge(tape, params, cfg, &pos)?;
    let merged_negative = merge(tape, params, cfg, &neg)?;
    let node_levels: Vec<Var> = summaries.iter().map(|s| s.node_level).collect();
    let p = global_target(tape, &node_levels, n)?;
    let hybrid = hybrid_attention_loss(tape, p, merged, merged_negative)?;
    let eta = tape.param(&params.store, params.eta());
    let loss = joint_loss(tape, adversarial, hybrid, eta)?;
    Ok(ForwardOutput {
        loss,
        adversarial,
        hybrid,
        merged,
        merged_negative,
        histograms,
    })
}

/// Merged node embeddings of the original graphs, N×D.
pub fn embed(params: &UmmanParams, cfg: &ModelConfig, adjacency: &[NormalizedAdjacency], features: &Tensor) -> Result<Tensor> {
    let inputs = GraphInputs {
        adjacency,
        features,
        shuffled: features,
    };
    check_inputs(params, &inputs)?;
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let mut hs = Vec::with_capacity(adjacency.len());
    for (i, a) in adjacency.iter().enumerate() {
        let adj = tape.constant(a.matrix().clone());
        let layers = record_layers(&mut tape, params, i);
        hs.push(gcn_forward(&mut tape, adj, x, &layers)?);
    }
    let merged = merge(&mut tape, params, cfg, &hs)?;
    Ok(tape.value(merged).clone())
}

/// Dense two-class head on frozen embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// D×2
    pub weight: Tensor,
    /// 1×2
    pub bias: Tensor,
}

impl ClassifierHead {
    pub const CLASSES: usize = 2;

    pub fn zeros(dim: usize) -> Self {
        ClassifierHead {
            weight: Tensor::zeros(dim, Self::CLASSES),
            bias: Tensor::zeros(1, Self::CLASSES),
        }
    }

    /// Probability of class 1 for each row of `x`.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        let logits = classify(&mut tape, xv, w, b)?;
        let l = tape.value(logits);
        Ok((0..l.rows())
            .map(|i| {
                let mut row = l.row(i).to_vec();
                crate::autodiff::softmax_in_place(&mut row);
                row[1]
            })
            .collect())
    }
}

/// `X · W + b`.
pub fn classify(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

/// Order-independent column mean of a plain tensor, 1×D.
pub fn column_mean(h: &Tensor) -> Tensor {
    let mut column = vec![0.0; h.rows()];
    Tensor::from_fn(1, h.cols(), |_, j| {
        for (i, c) in column.iter_mut().enumerate() {
            *c = h.get(i, j);
        }
        canonical_sum(&mut column) / h.rows() as f64
    })
}
