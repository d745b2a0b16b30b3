//! Command-line interface: `umman <subcommand>`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::atomic::write_atomic;
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, AdjointFault, GradcheckConfig};
use crate::graph::DistanceKind;
use crate::ingest::{
    filter_low_abundance_report, parse_abundance_table, parse_labels, serialize_abundance_table, serialize_labels,
    synth_cohort, AbundanceTable, FilterPolicy, LabelVector,
};
use crate::model::HistogramWeighting;
use crate::train::{
    build_multigraph, embeddings, evaluate_checkpoint, run_cross_validation, train_unsupervised, Checkpoint,
    TrainConfig,
};

pub const OUT_DIR_ENV: &str = "UMMAN_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "umman", version, about = "Unsupervised multi-graph host embeddings for microbiome classification")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Output directory.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = ".")]
    pub out_dir: PathBuf,
    /// JSON configuration file; command-line flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Field delimiter for tabular input and output (default: from the input extension).
    #[arg(long, global = true)]
    pub delimiter: Option<char>,
    /// Parallel workers for evaluation; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Drop low-abundance features and report what was removed.
    Preprocess(PreprocessArgs),
    /// Write the thresholded relation graphs as edge lists.
    BuildGraphs(InputArgs),
    /// Unsupervised pre-training; writes a checkpoint and the loss trace.
    Train(InputArgs),
    /// Cross-validated classification metrics.
    Evaluate(EvaluateArgs),
    /// Write the merged node embeddings.
    Embed(EmbedArgs),
    /// Generate a synthetic two-class cohort.
    Synth(SynthArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightingArg {
    Magnitude,
    Count,
}

/// Training options; every flag overrides the configuration file.
#[derive(Debug, Args, Default, Clone)]
pub struct TrainFlags {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub gcn_layers: Option<usize>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub eval_seeds: Option<usize>,
    #[arg(long)]
    pub classifier_steps: Option<usize>,
    /// Comma-separated relation types, e.g. `bray_curtis,canberra`.
    #[arg(long, value_delimiter = ',')]
    pub relations: Option<Vec<DistanceKind>>,
    #[arg(long, value_enum)]
    pub histogram_weighting: Option<WeightingArg>,
    /// Keep one corruption permutation for all epochs.
    #[arg(long)]
    pub static_shuffle: bool,
    /// Replace attention with a plain average over relation types.
    #[arg(long)]
    pub no_attention: bool,
    /// Replace the NFGI readout with a plain column mean.
    #[arg(long)]
    pub no_nfgi: bool,
    /// Drop the adversarial loss term.
    #[arg(long)]
    pub no_adversarial: bool,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Feature-major abundance table.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub abundance_threshold: Option<f64>,
    #[arg(long)]
    pub host_count_threshold: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Two-column file of sample ids and 0/1 labels.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Evaluate a trained model instead of training one per seed.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Use a trained model instead of training one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 60)]
    pub n_per_class: usize,
    #[arg(long, default_value_t = 60)]
    pub features: usize,
    #[arg(long, default_value_t = 2.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub inject_fault: Option<FaultArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    Sigmoid,
}

/// Configuration document: everything a run needs, with every default filled in.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub abundance: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub filter: FilterPolicy,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            context: format!("config file {}", path.display()),
            source,
        })
    }
}

impl TrainFlags {
    /// True when any flag that changes what is learned was given.
    pub fn sets_training(&self) -> bool {
        self.lr.is_some()
            || self.epochs.is_some()
            || self.embed_dim.is_some()
            || self.gcn_layers.is_some()
            || self.theta.is_some()
            || self.bins.is_some()
            || self.heads.is_some()
            || self.clip_norm.is_some()
            || self.seed.is_some()
            || self.relations.is_some()
            || self.histogram_weighting.is_some()
            || self.static_shuffle
            || self.no_attention
            || self.no_nfgi
            || self.no_adversarial
    }

    pub fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$($field).+ = v; })*
            };
        }
        set!(
            lr => lr,
            epochs => epochs,
            theta => theta,
            clip_norm => clip_norm,
            seed => seed,
            folds => folds,
            eval_seeds => eval_seeds,
            classifier_steps => classifier_steps,
            relations => relations,
            embed_dim => model.embed_dim,
            gcn_layers => model.gcn_layers,
            bins => model.bins,
            heads => model.heads,
        );
        if let Some(w) = self.histogram_weighting {
            cfg.model.histogram_weighting = match w {
                WeightingArg::Magnitude => HistogramWeighting::Magnitude,
                WeightingArg::Count => HistogramWeighting::Count,
            };
        }
        if self.static_shuffle {
            cfg.static_shuffle = true;
        }
        if self.no_attention {
            cfg.model.use_attention = false;
        }
        if self.no_nfgi {
            cfg.model.use_nfgi = false;
        }
        if self.no_adversarial {
            cfg.model.use_adversarial = false;
        }
    }
}

/// Parse arguments, run, and map the outcome to an exit status.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

struct Context {
    out_dir: PathBuf,
    delimiter: Option<char>,
    config: RunConfig,
    explicit_config: bool,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(name);
        write_atomic(&p, bytes)?;
        info!("wrote {}", p.display());
        Ok(p)
    }

    fn echo<T: Serialize>(&self, command: &str, resolved: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(resolved).expect("config serializes");
        text.push('\n');
        self.write(&format!("{command}.config.json"), text.as_bytes())?;
        Ok(())
    }

    fn delimiter_for(&self, input: &Path) -> char {
        self.delimiter.unwrap_or_else(|| match input.extension().and_then(|e| e.to_str()) {
            Some("csv") => ',',
            _ => '\t',
        })
    }

    fn input(&self, flag: &Option<PathBuf>) -> Result<PathBuf> {
        flag.clone()
            .or_else(|| self.config.abundance.clone())
            .ok_or_else(|| Error::InvalidArgument("no abundance table given (--input or \"abundance\" in the config)".into()))
    }

    fn table(&self, path: &Path) -> Result<AbundanceTable> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_abundance_table(&text, self.delimiter_for(path)).map_err(|e| Error::in_file(path, e))
    }

    fn labels(&self, flag: &Option<PathBuf>, table: &AbundanceTable) -> Result<LabelVector> {
        let path = flag
            .clone()
            .or_else(|| self.config.labels.clone())
            .ok_or_else(|| Error::InvalidArgument("no label file given (--labels or \"labels\" in the config)".into()))?;
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        parse_labels(&text, self.delimiter_for(&path), table).map_err(|e| Error::in_file(&path, e))
    }

    fn train_config(&self, flags: &TrainFlags) -> Result<TrainConfig> {
        let mut cfg = self.config.train.clone();
        flags.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn extension(delimiter: char) -> &'static str {
    if delimiter == ',' {
        "csv"
    } else {
        "tsv"
    }
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let config = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    // An explicit --out-dir or the environment wins over the file; "." is the clap default.
    let out_dir = if cli.global.out_dir == Path::new(".") {
        config.out_dir.clone().unwrap_or_else(|| cli.global.out_dir.clone())
    } else {
        cli.global.out_dir.clone()
    };
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let ctx = Context {
        out_dir,
        delimiter: cli.global.delimiter,
        config,
        explicit_config: cli.global.config.is_some(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    pool.install(|| dispatch(&ctx, cli.command))
}

#[derive(Serialize)]
struct Echo<'a, T: Serialize> {
    command: &'a str,
    out_dir: &'a Path,
    #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<&'a Path>,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<&'a Path>,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<&'a Path>,
    #[serde(skip_serializing_if = "Option::is_none")]
    delimiter: Option<char>,
    settings: T,
}

fn dispatch(ctx: &Context, command: Command) -> Result<ExitCode> {
    match command {
        Command::Preprocess(a) => preprocess(ctx, a),
        Command::BuildGraphs(a) => build_graphs(ctx, a),
        Command::Train(a) => train(ctx, a),
        Command::Evaluate(a) => evaluate(ctx, a),
        Command::Embed(a) => embed(ctx, a),
        Command::Synth(a) => synth(ctx, a),
        Command::Gradcheck(a) => gradcheck(ctx, a),
    }
}

fn preprocess(ctx: &Context, a: PreprocessArgs) -> Result<ExitCode> {
    let input = ctx.input(&a.input)?;
    let mut policy = ctx.config.filter;
    if let Some(t) = a.abundance_threshold {
        policy.abundance_threshold = t;
    }
    if let Some(h) = a.host_count_threshold {
        policy.host_count_threshold = h;
    }
    policy.validate()?;
    let d = ctx.delimiter_for(&input);
    ctx.echo(
        "preprocess",
        &Echo {
            command: "preprocess",
            out_dir: &ctx.out_dir,
            input: Some(&input),
            labels: None,
            checkpoint: None,
            delimiter: Some(d),
            settings: policy,
        },
    )?;
    let table = ctx.table(&input)?;
    let (filtered, removed) = filter_low_abundance_report(&table, &policy)?;
    let mut report = format!("feature{d}low_count\n");
    for r in &removed {
        report.push_str(&format!("{}{d}{}\n", r.name, r.low_count));
    }
    ctx.write(&format!("filtered.{}", extension(d)), serialize_abundance_table(&filtered, d).as_bytes())?;
    ctx.write(&format!("removed.{}", extension(d)), report.as_bytes())?;
    println!("kept {} of {} features", filtered.n_features(), table.n_features());
    Ok(ExitCode::SUCCESS)
}

fn build_graphs(ctx: &Context, a: InputArgs) -> Result<ExitCode> {
    let input = ctx.input(&a.input)?;
    let cfg = ctx.train_config(&a.train)?;
    ctx.echo("build-graphs", &echo_train("build-graphs", ctx, &input, None, None, &cfg))?;
    let table = ctx.table(&input)?;
    let mg = build_multigraph(table.values(), &cfg)?;
    for g in mg.originals() {
        let header = serde_json::to_string_pretty(&g.header()).expect("header serializes") + "\n";
        ctx.write(&format!("graph_{}.tsv", g.kind.name()), g.to_edge_list().as_bytes())?;
        ctx.write(&format!("graph_{}.json", g.kind.name()), header.as_bytes())?;
        println!("{}: {} edges", g.kind, g.edges().len());
    }
    Ok(ExitCode::SUCCESS)
}

fn echo_train<'a>(
    command: &'a str,
    ctx: &'a Context,
    input: &'a Path,
    labels: Option<&'a Path>,
    checkpoint: Option<&'a Path>,
    cfg: &'a TrainConfig,
) -> Echo<'a, &'a TrainConfig> {
    Echo {
        command,
        out_dir: &ctx.out_dir,
        input: Some(input),
        labels,
        checkpoint,
        delimiter: Some(ctx.delimiter_for(input)),
        settings: cfg,
    }
}

fn train(ctx: &Context, a: InputArgs) -> Result<ExitCode> {
    let input = ctx.input(&a.input)?;
    let cfg = ctx.train_config(&a.train)?;
    ctx.echo("train", &echo_train("train", ctx, &input, None, None, &cfg))?;
    let table = ctx.table(&input)?;
    let mg = build_multigraph(table.values(), &cfg)?;
    let trained = train_unsupervised(&mg, &cfg)?;
    let d = ctx.delimiter_for(&input);
    let mut trace = format!("epoch{d}loss\n");
    for (e, l) in trained.loss_trace.iter().enumerate() {
        trace.push_str(&format!("{}{d}{l}\n", e + 1));
    }
    let ckpt = Checkpoint::new(cfg, trained);
    ckpt.save(&ctx.path("checkpoint.umman"))?;
    ctx.write(&format!("loss_trace.{}", extension(d)), trace.as_bytes())?;
    println!(
        "loss {} -> {}",
        ckpt.loss_trace.first().copied().unwrap_or(f64::NAN),
        ckpt.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(ExitCode::SUCCESS)
}

/// The checkpoint fixes everything learned; only evaluation settings may change.
fn checkpoint_config(ckpt: &Checkpoint, requested: &TrainConfig, explicit: bool) -> TrainConfig {
    let mut cfg = ckpt.config.clone();
    cfg.folds = requested.folds;
    cfg.eval_seeds = requested.eval_seeds;
    cfg.classifier_steps = requested.classifier_steps;
    let comparable = TrainConfig {
        folds: cfg.folds,
        eval_seeds: cfg.eval_seeds,
        classifier_steps: cfg.classifier_steps,
        ..requested.clone()
    };
    if explicit && comparable != cfg {
        warn!("training settings differ from the checkpoint; using the checkpoint's");
    }
    cfg
}

fn evaluate(ctx: &Context, a: EvaluateArgs) -> Result<ExitCode> {
    let input = ctx.input(&a.input)?;
    let requested = ctx.train_config(&a.train)?;
    let ckpt = a.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let cfg = match &ckpt {
        Some(c) => checkpoint_config(c, &requested, a.train.sets_training() || ctx.explicit_config),
        None => requested,
    };
    let label_path = a.labels.clone().or_else(|| ctx.config.labels.clone());
    ctx.echo(
        "evaluate",
        &echo_train("evaluate", ctx, &input, label_path.as_deref(), a.checkpoint.as_deref(), &cfg),
    )?;
    let table = ctx.table(&input)?;
    let labels = ctx.labels(&a.labels, &table)?;
    let report = match ckpt {
        Some(c) => evaluate_checkpoint(&table, &labels, &Checkpoint { config: cfg, ..c })?,
        None => run_cross_validation(&table, &labels, &cfg)?,
    };
    ctx.write("metrics.json", report.to_json().as_bytes())?;
    ctx.write("metrics.txt", report.to_text().as_bytes())?;
    print!("{}", report.to_text());
    Ok(ExitCode::SUCCESS)
}

fn embed(ctx: &Context, a: EmbedArgs) -> Result<ExitCode> {
    let input = ctx.input(&a.input)?;
    let requested = ctx.train_config(&a.train)?;
    let ckpt = a.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let cfg = match &ckpt {
        Some(c) => checkpoint_config(c, &requested, a.train.sets_training() || ctx.explicit_config),
        None => requested,
    };
    ctx.echo("embed", &echo_train("embed", ctx, &input, None, a.checkpoint.as_deref(), &cfg))?;
    let table = ctx.table(&input)?;
    let mg = build_multigraph(table.values(), &cfg)?;
    let params = match ckpt {
        Some(c) => c.params,
        None => train_unsupervised(&mg, &cfg)?.params,
    };
    let x = embeddings(&params, &cfg, &mg.normalized(), mg.features())?;
    let d = ctx.delimiter_for(&input);
    let mut out = String::from("sample_id");
    for j in 0..x.cols() {
        out.push_str(&format!("{d}dim_{j}"));
    }
    out.push('\n');
    for (i, id) in table.sample_ids().iter().enumerate() {
        out.push_str(id);
        for v in x.row(i) {
            out.push_str(&format!("{d}{v}"));
        }
        out.push('\n');
    }
    ctx.write(&format!("embedding.{}", extension(d)), out.as_bytes())?;
    println!("{} samples x {} dimensions", x.rows(), x.cols());
    Ok(ExitCode::SUCCESS)
}

fn synth(ctx: &Context, a: SynthArgs) -> Result<ExitCode> {
    let d = ctx.delimiter.unwrap_or('\t');
    ctx.echo(
        "synth",
        &Echo {
            command: "synth",
            out_dir: &ctx.out_dir,
            input: None,
            labels: None,
            checkpoint: None,
            delimiter: Some(d),
            settings: &a,
        },
    )?;
    let (table, labels) = synth_cohort(a.n_per_class, a.features, a.separation, a.seed)?;
    ctx.write(&format!("abundance.{}", extension(d)), serialize_abundance_table(&table, d).as_bytes())?;
    ctx.write(
        &format!("labels.{}", extension(d)),
        serialize_labels(table.sample_ids(), &labels, d).as_bytes(),
    )?;
    println!("{} samples x {} features", table.n_samples(), table.n_features());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct GradcheckEcho {
    seed: u64,
    nodes: usize,
    features: usize,
    embed_dim: usize,
    bins: usize,
    relations: usize,
    step: f64,
    tolerance: f64,
}

fn gradcheck(ctx: &Context, a: GradcheckArgs) -> Result<ExitCode> {
    let cfg = GradcheckConfig {
        seed: a.seed,
        fault: a.inject_fault.map(|FaultArg::Sigmoid| AdjointFault::Sigmoid),
        ..GradcheckConfig::default()
    };
    ctx.echo(
        "gradcheck",
        &Echo {
            command: "gradcheck",
            out_dir: &ctx.out_dir,
            input: None,
            labels: None,
            checkpoint: None,
            delimiter: None,
            settings: GradcheckEcho {
                seed: cfg.seed,
                nodes: cfg.nodes,
                features: cfg.features,
                embed_dim: cfg.model.embed_dim,
                bins: cfg.model.bins,
                relations: DistanceKind::ALL.len(),
                step: cfg.step,
                tolerance: cfg.tolerance,
            },
        },
    )?;
    let report = run_gradcheck(&cfg)?;
    print!("{}", report.to_text());
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    ctx.write("gradcheck.json", json.as_bytes())?;
    if report.passed() {
        println!("gradcheck passed");
        Ok(ExitCode::SUCCESS)
    } else {
        let failing = report.failing().join(", ");
        eprintln!("error: {}", Error::GradcheckFailed(failing));
        Ok(ExitCode::from(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let mut cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 9, "lr": 0.01, "use_attention": true}"#).unwrap();
        let flags = TrainFlags {
            epochs: Some(3),
            no_attention: true,
            relations: Some(vec![DistanceKind::Canberra]),
            ..TrainFlags::default()
        };
        flags.apply(&mut cfg);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.lr, 0.01);
        assert!(!cfg.model.use_attention);
        assert_eq!(cfg.relations, vec![DistanceKind::Canberra]);
        assert_eq!(cfg.model.embed_dim, 256);
    }

    #[test]
    fn run_config_defaults_fill_in() {
        let c: RunConfig = serde_json::from_str(r#"{"train": {"seed": 4}, "filter": {"abundance_threshold": 0.02, "host_count_threshold": 3}}"#).unwrap();
        assert_eq!(c.train.seed, 4);
        assert_eq!(c.train.epochs, 1000);
        assert_eq!(c.filter.host_count_threshold, 3);
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["umman", "evaluate", "--input", "a.tsv", "--no-nfgi", "--jobs", "2"]).unwrap();
        assert_eq!(cli.global.jobs, 2);
        assert!(matches!(cli.command, Command::Evaluate(ref e) if e.train.no_nfgi));
    }
}
