//! Command-line front end. Every command returns a JSON report that embeds
//! the resolved configuration it ran with.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::cohort::{self, generate, split, CohortError, GenSpec};
use crate::encoder::{load_params, save_params, train, EncoderError, EncoderSpec, TrainConfig};
use crate::experiment::{probe_embeddings, run_bias_experiment, run_loho_all, BiasConfig, ExperimentError, LohoSummary};
use crate::metrics::{EvalReport, MetricsError, ProbeKind};
use crate::numerics::{NumericsError, SgdConfig};
use crate::retrieval::{
    embed_wsis, knn, leave_one_out_eval, EmbeddingIndex, LohoConfig, Metric, RetrievalError, SearchFilter,
};

pub const THREADS_ENV: &str = "SEQRANK_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Training(String),
    #[error("{0}")]
    Lookup(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Training(_) => 3,
            CliError::Lookup(_) => 4,
            CliError::Io(_) => 5,
        }
    }
}

impl From<CohortError> for CliError {
    fn from(e: CohortError) -> Self {
        match e {
            CohortError::Dimension { .. } | CohortError::Spec(_) => CliError::Usage(e.to_string()),
            CohortError::UnknownSite(_) => CliError::Lookup(e.to_string()),
            CohortError::Parse { .. } | CohortError::Schema { .. } | CohortError::Invalid(_) | CohortError::Io(_) => {
                CliError::Io(e.to_string())
            }
        }
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::Spec(_) | EncoderError::Config(_) => CliError::Usage(e.to_string()),
            EncoderError::Numerics(NumericsError::Config(_)) => CliError::Usage(e.to_string()),
            EncoderError::Format(_) | EncoderError::Io(_) => CliError::Io(e.to_string()),
            EncoderError::Composition(_)
            | EncoderError::InputDim { .. }
            | EncoderError::Numerics(_)
            | EncoderError::Loss(_) => CliError::Training(e.to_string()),
        }
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Encoder(e) => e.into(),
            RetrievalError::Cohort(e) => e.into(),
            RetrievalError::NoCandidates | RetrievalError::UnknownWsi(_) => CliError::Lookup(e.to_string()),
            RetrievalError::ZeroK => CliError::Usage(e.to_string()),
            RetrievalError::Io(_) | RetrievalError::Parse { .. } => CliError::Io(e.to_string()),
            RetrievalError::DuplicateWsi(_) | RetrievalError::Dim { .. } | RetrievalError::TooSmall { .. } => {
                CliError::Training(e.to_string())
            }
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Training(e.to_string())
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Cohort(e) => e.into(),
            ExperimentError::Encoder(e) => e.into(),
            ExperimentError::Retrieval(e) => e.into(),
            ExperimentError::Metrics(e) => e.into(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "seqrank", version, about = "Ranking-loss embeddings with site sequestering")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort file.
    Gen(GenArgs),
    /// Train an encoder on a cohort.
    Train(TrainArgs),
    /// Leave-one-out k-NN evaluation over a cohort's WSIs.
    Eval(EvalArgs),
    /// Nearest WSIs to a named query WSI.
    Search(SearchArgs),
    /// Export WSI embeddings as a JSON-lines index.
    Index(IndexArgs),
    /// Site-identity probe on patch embeddings.
    Probe(ProbeArgs),
    /// Leave-one-site-out training and external validation.
    Loho(LohoArgs),
    /// Plain vs sequestered training on one generated cohort.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn enabled(self) -> bool {
        self == OnOff::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Euclidean,
    Cosine,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Euclidean => Metric::Euclidean,
            MetricArg::Cosine => Metric::Cosine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeKindArg {
    Linear,
    Rff,
}

impl From<ProbeKindArg> for ProbeKind {
    fn from(k: ProbeKindArg) -> Self {
        match k {
            ProbeKindArg::Linear => ProbeKind::Linear,
            ProbeKindArg::Rff => ProbeKind::Rff,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 4)]
    pub sites: usize,
    #[arg(long, default_value_t = 8)]
    pub wsis_per_site: usize,
    #[arg(long, default_value_t = 10)]
    pub patches_per_wsi: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 2.0)]
    pub class_signal: f64,
    #[arg(long, default_value_t = 2.0)]
    pub site_signal: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.1)]
    pub view_jitter: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub output: PathBuf,
}

impl GenArgs {
    fn spec(&self) -> GenSpec {
        GenSpec {
            n_sites: self.sites,
            wsis_per_site: self.wsis_per_site,
            patches_per_wsi: self.patches_per_wsi,
            n_classes: self.classes,
            dim: self.dim,
            class_signal: self.class_signal,
            site_signal: self.site_signal,
            noise_sigma: self.noise,
            view_jitter: self.view_jitter,
            seed: self.seed,
        }
    }
}

/// Encoder shape and optimizer flags shared by the training commands.
#[derive(Debug, Args, Clone)]
pub struct TrainFlags {
    #[arg(long, value_enum, default_value_t = OnOff::On)]
    pub sequester: OnOff,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Hidden layer widths, comma separated; empty for a single linear layer.
    #[arg(long, value_delimiter = ',', default_value = "32")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub embed: usize,
    #[arg(long, default_value_t = 2)]
    pub min_sites: usize,
}

impl TrainFlags {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            sgd: SgdConfig {
                learning_rate: self.lr,
                epochs: self.epochs,
                batch_size: self.batch,
            },
            sequester: self.sequester.enabled(),
            seed: self.seed,
            min_sites_per_batch: self.min_sites,
        }
    }

    fn encoder_spec(&self, input_dim: usize) -> EncoderSpec {
        EncoderSpec::new(input_dim, self.hidden.clone(), self.embed)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub cohort: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Output parameter file.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Write the JSON report here instead of standard output.
    #[arg(short, long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub cohort: PathBuf,
    #[arg(short, long)]
    pub model: PathBuf,
    #[arg(short, default_value_t = 3)]
    pub k: usize,
    /// Also exclude the query's own site from its candidates.
    #[arg(long)]
    pub sequester_queries: bool,
    #[arg(long, value_enum, default_value_t = MetricArg::Euclidean)]
    pub metric: MetricArg,
    #[arg(short, long)]
    pub report: Option<PathBuf>,
    /// Also write the confusion matrix as CSV.
    #[arg(long)]
    pub confusion_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    pub cohort: PathBuf,
    #[arg(short, long)]
    pub model: PathBuf,
    #[arg(long)]
    pub query: String,
    #[arg(short, default_value_t = 3)]
    pub k: usize,
    #[arg(long)]
    pub exclude_site_of_query: bool,
    #[arg(long, value_enum, default_value_t = MetricArg::Euclidean)]
    pub metric: MetricArg,
    #[arg(short, long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    pub cohort: PathBuf,
    #[arg(short, long)]
    pub model: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    pub cohort: PathBuf,
    #[arg(short, long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value_t = ProbeKindArg::Rff)]
    pub kind: ProbeKindArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of WSIs per (site, class) stratum used to score the probe.
    #[arg(long, default_value_t = 0.25)]
    pub test_fraction: f64,
    #[arg(short, long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LohoArgs {
    pub cohort: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Hold out every site in turn.
    #[arg(long, conflicts_with = "holdout")]
    pub all_sites: bool,
    /// Site(s) to hold out, one run per site.
    #[arg(long)]
    pub holdout: Vec<String>,
    #[arg(short, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, value_enum, default_value_t = MetricArg::Euclidean)]
    pub metric: MetricArg,
    #[arg(short, long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ProbeKindArg::Rff)]
    pub kind: ProbeKindArg,
    #[arg(short, long)]
    pub report: Option<PathBuf>,
}

/// What a command produced: the JSON report and a human-readable summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub report: Value,
    pub summary: String,
    pub report_path: Option<PathBuf>,
}

fn envelope<C: Serialize, R: Serialize>(command: &str, config: &C, result: &R) -> Value {
    json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "result": result,
    })
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn eval_table(title: &str, r: &EvalReport) -> String {
    let mut s = format!("{title}\nclass  precision  recall  f1\n");
    for c in 0..r.f1.len() {
        s.push_str(&format!(
            "{c:<5}  {:>9.4}  {:>6.4}  {:.4}\n",
            r.precision[c], r.recall[c], r.f1[c]
        ));
    }
    s.push_str(&format!(
        "accuracy {:.4}  macro-F1 {:.4}  scored {}  errors {}\n",
        r.accuracy, r.macro_f1, r.n_scored, r.n_errors
    ));
    s
}

fn loho_table(summary: &LohoSummary) -> String {
    let n = summary.overall.f1.len();
    let mut s = String::from("holdout ");
    for c in 0..n {
        s.push_str(&format!("  F1[{c}]"));
    }
    s.push_str("  accuracy  n\n");
    let mut row = |name: &str, r: &EvalReport| {
        s.push_str(&format!("{name:<8}"));
        for f in &r.f1 {
            s.push_str(&format!("  {f:.3}"));
        }
        s.push_str(&format!("  {:>7.2}%  {}\n", 100.0 * r.accuracy, r.n_scored));
    };
    for site in &summary.sites {
        row(&site.holdout_site, &site.report);
    }
    row("Overall", &summary.overall);
    s
}

pub fn cmd_gen(args: &GenArgs) -> Result<Outcome, CliError> {
    let spec = args.spec();
    let cohort = generate(&spec)?;
    cohort::save(&cohort, &args.output)?;
    let result = json!({
        "sites": cohort.sites().len(),
        "wsis": cohort.wsi_ids().len(),
        "patches": cohort.len(),
        "output": path_str(&args.output),
    });
    Ok(Outcome {
        summary: format!(
            "wrote {}: {} sites, {} WSIs, {} patches\n",
            args.output.display(),
            cohort.sites().len(),
            cohort.wsi_ids().len(),
            cohort.len()
        ),
        report: envelope("gen", &spec, &result),
        report_path: None,
    })
}

pub fn cmd_train(args: &TrainArgs) -> Result<Outcome, CliError> {
    let cohort = cohort::load(&args.cohort)?;
    let spec = args.flags.encoder_spec(cohort.dim());
    let cfg = args.flags.train_config();
    let log = train(&cohort, &spec, &cfg)?;
    save_params(&log.params, &args.output)?;
    let config = json!({
        "cohort": path_str(&args.cohort),
        "encoder": spec,
        "train": cfg,
        "output": path_str(&args.output),
    });
    let result = json!({ "epoch_losses": log.epoch_losses });
    let mut summary = String::from("epoch  loss\n");
    for (e, l) in log.epoch_losses.iter().enumerate() {
        summary.push_str(&format!("{e:>5}  {l:.6}\n"));
    }
    Ok(Outcome {
        report: envelope("train", &config, &result),
        summary,
        report_path: args.report.clone(),
    })
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Outcome, CliError> {
    let cohort = cohort::load(&args.cohort)?;
    let params = load_params(&args.model)?;
    let index = EmbeddingIndex::new(embed_wsis(&cohort, &params)?, args.metric.into())?;
    let report = leave_one_out_eval(&index, args.k, args.sequester_queries, cohort.n_classes())?;
    if let Some(path) = &args.confusion_csv {
        std::fs::write(path, report.confusion_csv()).map_err(|e| CliError::Io(e.to_string()))?;
    }
    let config = json!({
        "cohort": path_str(&args.cohort),
        "model": path_str(&args.model),
        "k": args.k,
        "sequester_queries": args.sequester_queries,
        "metric": Metric::from(args.metric),
    });
    Ok(Outcome {
        summary: eval_table("leave-one-out", &report),
        report: envelope("eval", &config, &report),
        report_path: args.report.clone(),
    })
}

pub fn cmd_search(args: &SearchArgs) -> Result<Outcome, CliError> {
    let cohort = cohort::load(&args.cohort)?;
    let params = load_params(&args.model)?;
    let index = EmbeddingIndex::new(embed_wsis(&cohort, &params)?, args.metric.into())?;
    let query = index
        .get(&args.query)
        .ok_or_else(|| CliError::from(RetrievalError::UnknownWsi(args.query.clone())))?;
    let filter = SearchFilter {
        exclude_wsi: Some(query.wsi_id.clone()),
        exclude_site: args.exclude_site_of_query.then(|| query.site_id.clone()),
    };
    let hits = knn(&index, &query.vector, args.k, &filter)?;
    let config = json!({
        "cohort": path_str(&args.cohort),
        "model": path_str(&args.model),
        "query": args.query,
        "k": args.k,
        "exclude_site_of_query": args.exclude_site_of_query,
        "metric": Metric::from(args.metric),
    });
    let mut summary = format!("query {} (site {}, class {})\n", query.wsi_id, query.site_id, query.class_id);
    for (rank, h) in hits.iter().enumerate() {
        summary.push_str(&format!(
            "{:>3}  {:<10} site {:<6} class {}  d={:.6}\n",
            rank + 1,
            h.wsi_id,
            h.site_id,
            h.class_id,
            h.distance
        ));
    }
    Ok(Outcome {
        report: envelope("search", &config, &hits),
        summary,
        report_path: args.report.clone(),
    })
}

pub fn cmd_index(args: &IndexArgs) -> Result<Outcome, CliError> {
    let cohort = cohort::load(&args.cohort)?;
    let params = load_params(&args.model)?;
    let index = EmbeddingIndex::new(embed_wsis(&cohort, &params)?, Metric::Euclidean)?;
    let file = std::fs::File::create(&args.output).map_err(|e| CliError::Io(e.to_string()))?;
    index.write_jsonl(std::io::BufWriter::new(file))?;
    let config = json!({
        "cohort": path_str(&args.cohort),
        "model": path_str(&args.model),
        "output": path_str(&args.output),
    });
    Ok(Outcome {
        summary: format!("wrote {} WSI embeddings to {}\n", index.len(), args.output.display()),
        report: envelope("index", &config, &json!({ "entries": index.len() })),
        report_path: None,
    })
}

pub fn cmd_probe(args: &ProbeArgs) -> Result<Outcome, CliError> {
    let cohort = cohort::load(&args.cohort)?;
    let params = load_params(&args.model)?;
    let parts = split(&cohort, None, args.test_fraction, args.seed)?;
    let report = probe_embeddings(&params, &parts.train, &parts.test, args.kind.into(), args.seed)?;
    let config = json!({
        "cohort": path_str(&args.cohort),
        "model": path_str(&args.model),
        "kind": ProbeKind::from(args.kind),
        "seed": args.seed,
        "test_fraction": args.test_fraction,
    });
    Ok(Outcome {
        summary: format!(
            "site probe ({:?}): accuracy {:.2}% (chance {:.2}%, {} sites)\n",
            report.probe_kind,
            100.0 * report.site_accuracy,
            100.0 * report.chance_level,
            report.n_sites
        ),
        report: envelope("probe", &config, &report),
        report_path: args.report.clone(),
    })
}

pub fn cmd_loho(args: &LohoArgs) -> Result<Outcome, CliError> {
    let cohort = cohort::load(&args.cohort)?;
    let sites: Vec<String> = if args.all_sites {
        cohort.sites().to_vec()
    } else if args.holdout.is_empty() {
        return Err(CliError::Usage("pass --all-sites or at least one --holdout".into()));
    } else {
        args.holdout.clone()
    };
    let spec = args.flags.encoder_spec(cohort.dim());
    let cfg = args.flags.train_config();
    let loho = LohoConfig {
        k: args.k,
        test_fraction: args.test_fraction,
        split_seed: args.flags.seed,
        metric: args.metric.into(),
    };
    let summary = run_loho_all(&cohort, &spec, &cfg, &sites, &loho, threads_from_env())?;
    let config = json!({
        "cohort": path_str(&args.cohort),
        "encoder": spec,
        "train": cfg,
        "loho": loho,
        "holdout_sites": sites,
    });
    Ok(Outcome {
        summary: loho_table(&summary),
        report: envelope("loho", &config, &summary),
        report_path: args.report.clone(),
    })
}

pub fn cmd_experiment(args: &ExperimentArgs) -> Result<Outcome, CliError> {
    let mut cfg = BiasConfig::desk_default(args.seed);
    cfg.probe_kind = args.kind.into();
    let report = run_bias_experiment(&cfg)?;
    let row = |name: &str, arm: &crate::experiment::ArmReport| {
        format!(
            "{name:<12}  {:>6.2}%  {:>8.4}  {:.6}\n",
            100.0 * arm.probe.site_accuracy,
            arm.retrieval.macro_f1,
            arm.epoch_losses.last().copied().unwrap_or(f64::NAN)
        )
    };
    let mut summary = String::from("arm           probe    macro-F1  final loss\n");
    summary.push_str(&format!(
        "{:<12}  {:>6.2}%\n",
        "raw features",
        100.0 * report.raw_probe.site_accuracy
    ));
    summary.push_str(&row("RLF", &report.plain));
    summary.push_str(&row("ISL", &report.sequestered));
    summary.push_str(&format!("chance {:.2}%\n", 100.0 * report.plain.probe.chance_level));
    Ok(Outcome {
        report: envelope("experiment", &cfg, &report),
        summary,
        report_path: args.report.clone(),
    })
}

pub fn execute(command: &Command) -> Result<Outcome, CliError> {
    match command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Search(a) => cmd_search(a),
        Command::Index(a) => cmd_index(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Loho(a) => cmd_loho(a),
        Command::Experiment(a) => cmd_experiment(a),
    }
}

/// Writes the report to its file (and the summary to `out`), or the report
/// itself to `out` when no report file was requested.
pub fn emit<W: Write>(outcome: &Outcome, mut out: W) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(&outcome.report).expect("reports serialize") + "\n";
    let io = |e: std::io::Error| CliError::Io(e.to_string());
    match &outcome.report_path {
        Some(path) => {
            std::fs::write(path, text).map_err(io)?;
            out.write_all(outcome.summary.as_bytes()).map_err(io)?;
        }
        None => out.write_all(text.as_bytes()).map_err(io)?,
    }
    Ok(())
}

/// Parses `argv`, runs the command, and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command).and_then(|o| emit(&o, std::io::stdout().lock())) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
