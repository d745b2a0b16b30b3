//! Unsupervised pre-training, classifier fitting, cross-validated evaluation and checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atomic::write_atomic;
use crate::autodiff::{clip_global_norm, Adam, AdamHyper, ParamSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::{permute_rows, shuffle_permutation, DistanceKind, MultiGraph, NormalizedAdjacency};
use crate::ingest::{kfold_split, AbundanceTable, LabelVector};
use crate::model::{self, ClassifierHead, GraphInputs, ModelConfig, UmmanParams};

/// Everything that determines a training and evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub theta: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub folds: usize,
    pub eval_seeds: usize,
    pub classifier_steps: usize,
    /// Reuse one corruption permutation for every epoch instead of drawing a fresh one.
    pub static_shuffle: bool,
    pub relations: Vec<DistanceKind>,
    #[serde(flatten)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 1000,
            theta: 0.6,
            clip_norm: 5.0,
            seed: 0,
            folds: 5,
            eval_seeds: 5,
            classifier_steps: 300,
            static_shuffle: false,
            relations: DistanceKind::ALL.to_vec(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be a non-negative number, got {}", self.lr));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad(format!("theta must lie in (0, 1), got {}", self.theta));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if self.eval_seeds == 0 {
            return bad("eval_seeds must be positive".into());
        }
        if self.relations.is_empty() {
            return bad("at least one relation type is required".into());
        }
        for (i, k) in self.relations.iter().enumerate() {
            if self.relations[..i].contains(k) {
                return bad(format!("relation {k} listed twice"));
            }
        }
        self.model.validate()
    }

    /// Copy of the config with its seed replaced; used per evaluation seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        TrainConfig {
            seed,
            ..self.clone()
        }
    }
}

/// Independent seed streams derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedStream {
    Init,
    Shuffle,
    Folds,
}

/// Deterministic per-stream seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: SeedStream) -> u64 {
    let tag = match stream {
        SeedStream::Init => 0x9e37_79b9_7f4a_7c15u64,
        SeedStream::Shuffle => 0xbf58_476d_1ce4_e5b9,
        SeedStream::Folds => 0x94d0_49bb_1331_11eb,
    };
    let mut z = seed.wrapping_add(tag);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Build the relation graphs of a run; the static corruption comes from the shuffle stream.
pub fn build_multigraph(features: &Tensor, cfg: &TrainConfig) -> Result<MultiGraph> {
    MultiGraph::build(
        features,
        &cfg.relations,
        cfg.theta,
        derive_seed(cfg.seed, SeedStream::Shuffle),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub params: UmmanParams,
    /// Joint loss of each epoch, evaluated before that epoch's update.
    pub loss_trace: Vec<f64>,
}

/// Unsupervised pre-training. Labels are not an input.
pub fn train_unsupervised(mg: &MultiGraph, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    if mg.kinds() != cfg.relations {
        return Err(Error::InvalidArgument(format!(
            "graph relations {:?} differ from configured {:?}",
            mg.kinds(),
            cfg.relations
        )));
    }
    let features = mg.features();
    let mut params = UmmanParams::init(
        &cfg.model,
        &cfg.relations,
        features.cols(),
        derive_seed(cfg.seed, SeedStream::Init),
    )?;
    let adjacency = mg.normalized();
    let mut adam = Adam::new(&params.store, AdamHyper::with_lr(cfg.lr));
    // The first epoch uses the graph's own corruption, later ones draw afresh.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SeedStream::Shuffle).wrapping_add(1));
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let shuffled = if cfg.static_shuffle || epoch == 0 {
            mg.shuffled_features()
        } else {
            permute_rows(features, &shuffle_permutation(mg.n_nodes(), &mut rng))
        };
        let inputs = GraphInputs {
            adjacency: &adjacency,
            features,
            shuffled: &shuffled,
        };
        let loss = step(&mut params, &mut adam, &cfg.model, &inputs, cfg.clip_norm)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, trace });
        }
        if epoch % 50 == 0 {
            debug!("epoch {epoch}: loss {loss:.6}");
        }
        trace.push(loss);
    }
    params.store.zero_grad();
    Ok(Trained {
        params,
        loss_trace: trace,
    })
}

fn step(params: &mut UmmanParams, adam: &mut Adam, cfg: &ModelConfig, inputs: &GraphInputs, clip: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let out = model::forward(&mut tape, params, cfg, inputs, None)?;
    let loss = tape.value(out.loss).item()?;
    if !loss.is_finite() {
        return Ok(loss);
    }
    params.store.zero_grad();
    tape.backward(out.loss, &mut params.store)?;
    clip_global_norm(&mut params.store, clip)?;
    adam.step(&mut params.store)?;
    Ok(loss)
}

/// Fit the dense head on frozen embeddings by full-batch Adam on mean cross-entropy.
pub fn train_classifier(embeddings: &Tensor, labels: &LabelVector, train_idx: &[usize], cfg: &TrainConfig) -> Result<ClassifierHead> {
    if labels.len() != embeddings.rows() {
        return Err(Error::Labels(format!(
            "{} labels for {} embeddings",
            labels.len(),
            embeddings.rows()
        )));
    }
    if train_idx.is_empty() {
        return Err(Error::Empty("training fold".into()));
    }
    let targets: Vec<usize> = train_idx.iter().map(|&i| labels.get(i) as usize).collect();
    if targets.iter().all(|&t| t == targets[0]) {
        return Err(Error::SingleClass);
    }
    let x = embeddings.select_rows(train_idx);
    let head = ClassifierHead::zeros(embeddings.cols());
    let mut ps = ParamSet::new();
    let w = ps.add("classifier.weight", head.weight);
    let b = ps.add("classifier.bias", head.bias);
    let mut adam = Adam::new(&ps, AdamHyper::with_lr(cfg.lr));
    for _ in 0..cfg.classifier_steps {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.param(&ps, w);
        let bv = tape.param(&ps, b);
        let logits = model::classify(&mut tape, xv, wv, bv)?;
        let loss = tape.softmax_cross_entropy(logits, &targets)?;
        ps.zero_grad();
        tape.backward(loss, &mut ps)?;
        adam.step(&mut ps)?;
    }
    Ok(ClassifierHead {
        weight: ps.value(w).clone(),
        bias: ps.value(b).clone(),
    })
}

/// Area under the ROC curve as a rank statistic, ties worth one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Labels(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the Mann-Whitney U, kept integral.
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut q) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                p += 1;
            } else {
                q += 1;
            }
            j += 1;
        }
        twice_u += p * (2 * neg_below + q);
        neg_below += q;
        i = j;
    }
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// Threshold metrics for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Absent when the evaluated labels contain a single class.
    pub auc: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Metrics at `threshold` with class 1 as positive. Precision with no predicted positives is 0.
pub fn evaluate(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Metrics> {
    if scores.len() != labels.len() {
        return Err(Error::Labels(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let auc = match auc(scores, labels) {
        Ok(a) => Some(a),
        Err(Error::SingleClass) => None,
        Err(e) => return Err(e),
    };
    Ok(Metrics {
        accuracy: ratio(tp + tn, scores.len()),
        auc,
        precision,
        recall,
        f1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub fold: usize,
    pub n_test: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Some(Stat { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub accuracy: Stat,
    pub auc: Option<Stat>,
    pub precision: Stat,
    pub recall: Stat,
    pub f1: Stat,
    /// `(seed, fold)` pairs left out of the AUC aggregate because their test fold had one class.
    pub auc_excluded: Vec<(u64, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub aggregate: Aggregate,
}

impl MetricsReport {
    pub fn from_rows(mut rows: Vec<MetricsRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("metrics report".into()));
        }
        rows.sort_by_key(|r| (r.seed, r.fold));
        let col = |f: fn(&Metrics) -> f64| rows.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>();
        let aucs: Vec<f64> = rows.iter().filter_map(|r| r.metrics.auc).collect();
        let auc_excluded = rows
            .iter()
            .filter(|r| r.metrics.auc.is_none())
            .map(|r| (r.seed, r.fold))
            .collect();
        let stat = |v: Vec<f64>| Stat::of(&v).expect("rows are nonempty");
        let aggregate = Aggregate {
            accuracy: stat(col(|m| m.accuracy)),
            auc: Stat::of(&aucs),
            precision: stat(col(|m| m.precision)),
            recall: stat(col(|m| m.recall)),
            f1: stat(col(|m| m.f1)),
            auc_excluded,
        };
        Ok(MetricsReport { rows, aggregate })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| Error::Json {
            context: "metrics report".into(),
            source,
        })
    }

    /// Plain-text table: one line per row, then mean and std.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>6} {:>4} {:>6} {:>8} {:>8} {:>9} {:>8} {:>8}",
            "seed", "fold", "n", "accuracy", "auc", "precision", "recall", "f1"
        );
        for r in &self.rows {
            let m = &r.metrics;
            let auc = m.auc.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(
                out,
                "{:>6} {:>4} {:>6} {:>8.4} {:>8} {:>9.4} {:>8.4} {:>8.4}",
                r.seed, r.fold, r.n_test, m.accuracy, auc, m.precision, m.recall, m.f1
            );
        }
        let a = &self.aggregate;
        let fmt = |s: Option<&Stat>, f: fn(&Stat) -> f64| s.map_or_else(|| "-".to_string(), |s| format!("{:.4}", f(s)));
        for (label, f) in [("mean", (|s: &Stat| s.mean) as fn(&Stat) -> f64), ("std", |s: &Stat| s.std)] {
            let _ = writeln!(
                out,
                "{:>11} {:>6} {:>8} {:>8} {:>9} {:>8} {:>8}",
                label,
                "",
                fmt(Some(&a.accuracy), f),
                fmt(a.auc.as_ref(), f),
                fmt(Some(&a.precision), f),
                fmt(Some(&a.recall), f),
                fmt(Some(&a.f1), f)
            );
        }
        if !a.auc_excluded.is_empty() {
            let _ = writeln!(out, "auc excluded (single-class fold): {:?}", a.auc_excluded);
        }
        out
    }
}

/// Rows for every fold of one seed, classifiers fit on a fixed embedding.
pub fn evaluate_folds(embeddings: &Tensor, labels: &LabelVector, cfg: &TrainConfig) -> Result<Vec<MetricsRow>> {
    let folds = kfold_split(labels.len(), cfg.folds, derive_seed(cfg.seed, SeedStream::Folds))?;
    let mut rows = Vec::with_capacity(cfg.folds);
    for fold in 0..cfg.folds {
        let (train_idx, test_idx) = folds.split(fold);
        let head = train_classifier(embeddings, labels, &train_idx, cfg)?;
        let scores = head.predict_proba(&embeddings.select_rows(&test_idx))?;
        let truth: Vec<u8> = test_idx.iter().map(|&i| labels.get(i)).collect();
        let metrics = evaluate(&scores, &truth, 0.5)?;
        if metrics.auc.is_none() {
            warn!("seed {} fold {fold}: single-class test fold, excluded from AUC", cfg.seed);
        }
        rows.push(MetricsRow {
            seed: cfg.seed,
            fold,
            n_test: test_idx.len(),
            metrics,
        });
    }
    Ok(rows)
}

/// Final merged embeddings of a trained model on a given graph set.
pub fn embeddings(params: &UmmanParams, cfg: &TrainConfig, adjacency: &[NormalizedAdjacency], features: &Tensor) -> Result<Tensor> {
    model::embed(params, &cfg.model, adjacency, features)
}

/// Full protocol: for each evaluation seed `cfg.seed + s`, train on all samples without labels,
/// then fit and score the classifier on each fold.
///
/// The unsupervised stage does not depend on the fold, so it runs once per seed. Seeds run in
/// parallel on the current rayon pool; the report does not depend on the pool size.
pub fn run_cross_validation(table: &AbundanceTable, labels: &LabelVector, cfg: &TrainConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    check_labels(table, labels)?;
    let seeds: Vec<u64> = (0..cfg.eval_seeds as u64).map(|s| cfg.seed.wrapping_add(s)).collect();
    let per_seed: Vec<Result<Vec<MetricsRow>>> = seeds
        .par_iter()
        .map(|&seed| {
            let run = cfg.with_seed(seed);
            let mg = build_multigraph(table.values(), &run)?;
            let trained = train_unsupervised(&mg, &run)?;
            info!(
                "seed {seed}: loss {:.6} -> {:.6}",
                trained.loss_trace.first().copied().unwrap_or(f64::NAN),
                trained.loss_trace.last().copied().unwrap_or(f64::NAN)
            );
            let emb = embeddings(&trained.params, &run, &mg.normalized(), mg.features())?;
            evaluate_folds(&emb, labels, &run)
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_seed {
        rows.extend(r?);
    }
    MetricsReport::from_rows(rows)
}

/// Cross-validation with a fixed, already-trained model: every seed reuses its embedding and
/// varies only the fold split.
pub fn evaluate_checkpoint(table: &AbundanceTable, labels: &LabelVector, ckpt: &Checkpoint) -> Result<MetricsReport> {
    let cfg = &ckpt.config;
    cfg.validate()?;
    check_labels(table, labels)?;
    let mg = build_multigraph(table.values(), cfg)?;
    let emb = embeddings(&ckpt.params, cfg, &mg.normalized(), mg.features())?;
    let seeds: Vec<u64> = (0..cfg.eval_seeds as u64).map(|s| cfg.seed.wrapping_add(s)).collect();
    let per_seed: Vec<Result<Vec<MetricsRow>>> = seeds
        .par_iter()
        .map(|&seed| evaluate_folds(&emb, labels, &cfg.with_seed(seed)))
        .collect();
    let mut rows = Vec::new();
    for r in per_seed {
        rows.extend(r?);
    }
    MetricsReport::from_rows(rows)
}

fn check_labels(table: &AbundanceTable, labels: &LabelVector) -> Result<()> {
    if labels.len() != table.n_samples() {
        return Err(Error::Labels(format!(
            "{} labels for {} samples",
            labels.len(),
            table.n_samples()
        )));
    }
    Ok(())
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UMMANCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const TRACE_NAME: &str = "loss_trace";

/// Trained model, its configuration and the loss trace that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    /// Seed of the corruption stream used during training.
    pub shuffle_seed: u64,
    pub params: UmmanParams,
    pub loss_trace: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    config: TrainConfig,
    shuffle_seed: u64,
    in_dim: usize,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, trained: Trained) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            shuffle_seed: derive_seed(config.seed, SeedStream::Shuffle),
            config,
            params: trained.params,
            loss_trace: trained.loss_trace,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let descriptor = serde_json::to_string(&Descriptor {
            config: self.config.clone(),
            shuffle_seed: self.shuffle_seed,
            in_dim: self.params.in_dim(),
        })
        .expect("descriptor serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
        out.extend_from_slice(descriptor.as_bytes());
        let trace = Tensor::row_vector(&self.loss_trace);
        let tensors: Vec<(&str, &Tensor)> = self
            .params
            .store
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .chain(std::iter::once((TRACE_NAME, &trace)))
            .collect();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointIntegrity("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::CheckpointIntegrity("descriptor is not UTF-8".into()))?;
        let d: Descriptor = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "checkpoint descriptor".into(),
            source,
        })?;
        let count = r.u32()? as usize;
        let mut store = ParamSet::new();
        let mut trace = None;
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::CheckpointIntegrity("tensor name is not UTF-8".into()))?
                .to_string();
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::CheckpointIntegrity(format!("tensor {name} exceeds file length")))?;
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::from_vec(rows, cols, data)?;
            if name == TRACE_NAME {
                trace = Some(t);
            } else {
                if store.find(&name).is_some() {
                    return Err(Error::CheckpointIntegrity(format!("tensor {name} appears twice")));
                }
                store.add(name, t);
            }
        }
        if r.remaining() != 0 {
            return Err(Error::CheckpointIntegrity(format!("{} trailing bytes", r.remaining())));
        }
        let trace = trace.ok_or_else(|| Error::CheckpointIntegrity("missing loss trace".into()))?;
        d.config.validate()?;
        let params = UmmanParams::from_store(store, &d.config.model, &d.config.relations, d.in_dim)?;
        Ok(Checkpoint {
            version,
            config: d.config,
            shuffle_seed: d.shuffle_seed,
            params,
            loss_trace: trace.into_data(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::in_file(path, e))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::CheckpointIntegrity(format!(
                "truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 5,
            folds: 2,
            eval_seeds: 1,
            classifier_steps: 20,
            model: ModelConfig {
                embed_dim: 8,
                bins: 4,
                heads: 2,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_data() -> (AbundanceTable, LabelVector) {
        crate::ingest::synth_cohort(6, 10, 2.0, 3).unwrap()
    }

    #[test]
    fn zero_lr_keeps_init() {
        let (table, _) = tiny_data();
        let cfg = TrainConfig { lr: 0.0, ..tiny_config() };
        let mg = build_multigraph(table.values(), &cfg).unwrap();
        let trained = train_unsupervised(&mg, &cfg).unwrap();
        let init = UmmanParams::init(&cfg.model, &cfg.relations, 10, derive_seed(cfg.seed, SeedStream::Init)).unwrap();
        for (a, b) in trained.params.store.iter().zip(init.store.iter()) {
            assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (table, _) = tiny_data();
        let cfg = tiny_config();
        let mg = build_multigraph(table.values(), &cfg).unwrap();
        let a = train_unsupervised(&mg, &cfg).unwrap();
        let b = train_unsupervised(&mg, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.loss_trace.len(), 5);
    }

    #[test]
    fn classifier_separable_and_budget() {
        let x = Tensor::from_rows(&[[1.0, 0.2], [0.8, -0.1], [1.2, 0.0], [-1.0, 0.1], [-0.9, -0.3], [-1.1, 0.2]]);
        let labels = LabelVector::new(vec![1, 1, 1, 0, 0, 0]).unwrap();
        let idx: Vec<usize> = (0..6).collect();
        let cfg = TrainConfig::default();
        let head = train_classifier(&x, &labels, &idx, &cfg).unwrap();
        let m = evaluate(&head.predict_proba(&x).unwrap(), labels.as_slice(), 0.5).unwrap();
        assert_eq!(m.accuracy, 1.0);

        let none = TrainConfig { classifier_steps: 0, ..cfg.clone() };
        assert_eq!(train_classifier(&x, &labels, &idx, &none).unwrap(), ClassifierHead::zeros(2));

        let doubled: Vec<usize> = idx.iter().chain(&idx).copied().collect();
        let twice = train_classifier(&x, &labels, &doubled, &cfg).unwrap();
        for (a, b) in head.weight.data().iter().chain(head.bias.data()).zip(twice.weight.data().iter().chain(twice.bias.data())) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(matches!(train_classifier(&x, &labels, &[0, 1, 2], &cfg), Err(Error::SingleClass)));
    }

    fn auc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut total = 0.0;
        let (mut p, mut n) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            if li == 1 {
                p += 1.0;
            } else {
                n += 1.0;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    if scores[i] > scores[j] {
                        total += 1.0;
                    } else if scores[i] == scores[j] {
                        total += 0.5;
                    }
                }
            }
        }
        total / (p * n)
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.4, 0.6], &[1, 0]).unwrap(), 0.0);
        assert_eq!(evaluate(&[0.4, 0.6], &[1, 0], 0.5).unwrap().accuracy, 0.0);
        assert_eq!(auc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::SingleClass)));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.random_range(2..40);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..6) as f64) / 5.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            assert_eq!(auc(&scores, &labels).unwrap(), auc_oracle(&scores, &labels));
        }
    }

    #[test]
    fn zero_predicted_positives() {
        let m = evaluate(&[0.1, 0.2, 0.3], &[1, 0, 1], 0.5).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert!((m.accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert!(evaluate(&[0.9], &[1], 0.5).unwrap().auc.is_none());
    }

    #[test]
    fn report_counts_and_stats() {
        let (table, labels) = tiny_data();
        let cfg = TrainConfig { eval_seeds: 2, ..tiny_config() };
        let r = run_cross_validation(&table, &labels, &cfg).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert_eq!(r.aggregate.accuracy.n, 4);
        assert_eq!(run_cross_validation(&table, &labels, &cfg).unwrap(), r);
        assert_eq!(MetricsReport::from_json(&r.to_json()).unwrap(), r);
        assert!(r.to_text().lines().count() >= 7);
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (table, labels) = tiny_data();
        let cfg = tiny_config();
        let mg = build_multigraph(table.values(), &cfg).unwrap();
        let ckpt = Checkpoint::new(cfg.clone(), train_unsupervised(&mg, &cfg).unwrap());
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
        for cut in [0, 7, 12, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CheckpointIntegrity(_))));
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
        let mut future = bytes.clone();
        future[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&future),
            Err(Error::CheckpointVersion { found: 7, expected: 1 })
        ));
        assert_eq!(evaluate_checkpoint(&table, &labels, &back).unwrap(), evaluate_checkpoint(&table, &labels, &ckpt).unwrap());
    }

    #[test]
    fn config_json_defaults_and_validation() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 7, "heads": 2}"#).unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.model.heads, 2);
        assert_eq!(cfg.model.embed_dim, 256);
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(TrainConfig { theta: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { relations: vec![], ..TrainConfig::default() }.validate().is_err());
    }
}
