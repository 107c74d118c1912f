//! Command-line front end. Every subcommand wraps one library operation.
//!
//! Results go to stdout or `--out`; logs go to stderr. Exit status is 0 on
//! success, 1 on a domain error (its code is printed) and 2 on a usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use fsir_core::ctr::{train_ctr, CtrTrainConfig, CtrTriplet};
use fsir_core::dataset::{report_stats, review_folders, smart_split};
use fsir_core::eval::evaluate_run;
use fsir_core::pipeline::{ctr_run, pl_run, refinable_queries, text_embedding, zero_shot_run};
use fsir_core::prompt::{ClassWeights, ComposerKind, ProGradMode, TrainConfig};
use fsir_core::refselect::SelectionConfig;
use fsir_core::synth::{generate, SynthConfig};
use fsir_core::triplet::{mine_triplets, MinerConfig};
use fsir_core::{
    BenchmarkManifest, ClusteredIndex, EmbeddingCorpus, EmbeddingRecord, ExactIndex, Modality, QueryEntry, SplitConfig,
    VectorIndex,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fsix::AnyIndex;
use crate::models::{CtrSidecar, PromptFile};
use crate::service::{self, CorpusRequest, ScoredId};
use crate::{fsem, fsix, manifest, models, runs, triplets};

#[derive(Debug, Parser)]
#[command(name = "fsir", version, about = "Few-shot text-to-image retrieval toolkit")]
pub struct Cli {
    /// Seed for every randomized step
    #[arg(long, global = true, default_value_t = 7)]
    pub seed: u64,
    /// Log level; debug and trace write JSON lines to stderr
    #[arg(long, global = true, default_value = "warn",
          value_parser = ["off", "error", "warn", "info", "debug", "trace"])]
    pub log_level: String,
    /// Worker threads, 0 for one per logical core
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// TOML file of flag values: top-level keys for global flags, one table per
    /// subcommand; command-line flags take precedence
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert an embedding file (FSEM or tab-separated text) to FSEM
    ImportEmbeddings(ImportArgs),
    /// Build an exact or clustered index over an FSEM corpus
    IndexBuild(IndexArgs),
    /// Zero-shot search for one query text, or a run over every manifest query
    Search(SearchArgs),
    /// Split ground-truth query sets into a test manifest and few-shot reference sets
    Split(SplitArgs),
    /// Mine (caption, reference, target) triplets from captioned images
    Mine(MineArgs),
    /// Train the composed text+reference model on mined triplets
    TrainCtr(TrainCtrArgs),
    /// Refine queries by prompt learning on their few-shot sets and write a run
    RefinePl(RefinePlArgs),
    /// Select reference images per query with a trained model and write a run
    SelectRefs(SelectRefsArgs),
    /// Score a run file against a manifest
    Evaluate(EvaluateArgs),
    /// Summary statistics of a manifest and its corpus
    ReportStats(ReportStatsArgs),
    /// Run the HTTP service
    Serve(ServeArgs),
    /// Generate the seeded synthetic benchmark
    SynthBench(SynthArgs),
}

impl Command {
    const NAMES: [&'static str; 12] = [
        "import-embeddings",
        "index-build",
        "search",
        "split",
        "mine",
        "train-ctr",
        "refine-pl",
        "select-refs",
        "evaluate",
        "report-stats",
        "serve",
        "synth-bench",
    ];
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModalityArg {
    Text,
    Image,
    Mixed,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Text => Modality::Text,
            ModalityArg::Image => Modality::Image,
            ModalityArg::Mixed => Modality::Mixed,
        }
    }
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    /// Source file; `.txt` and `.tsv` are read as `id<TAB>comma-separated floats`
    #[arg(long)]
    pub input: PathBuf,
    /// Destination FSEM file
    #[arg(long)]
    pub output: PathBuf,
    /// Modality to record, replacing the source's
    #[arg(long, value_enum)]
    pub modality: Option<ModalityArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum IndexKind {
    Exact,
    Clustered,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Destination FSIX file
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = IndexKind::Clustered)]
    pub kind: IndexKind,
    /// Number of clusters, 0 for the square root of the corpus size
    #[arg(long, default_value_t = 0)]
    pub clusters: usize,
    /// Clusters probed per search, 0 for a quarter of the clusters
    #[arg(long, default_value_t = 0)]
    pub probes: usize,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Manifest; its corpus is searched and its FSR items are kept out of runs
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Image corpus, when no manifest is given
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Text embeddings keyed by query text
    #[arg(long)]
    pub texts: PathBuf,
    /// FSIX index built on the image corpus; exact search without it
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Query text to look up in the text embeddings
    #[arg(long, conflicts_with = "all", required_unless_present = "all")]
    pub text_id: Option<String>,
    /// Write a zero-shot run for every manifest query
    #[arg(long)]
    pub all: bool,
    /// Results for a single query
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Ranked list length per query with --all
    #[arg(long, default_value_t = fsir_core::pipeline::RUN_DEPTH)]
    pub depth: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// JSON list of queries with all their positives and hard negatives
    #[arg(long)]
    pub gtqr: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Destination manifest
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = SplitConfig::default().fsr_positives)]
    pub fsr_positives: usize,
    #[arg(long, default_value_t = SplitConfig::default().hn_near)]
    pub hn_near: usize,
    #[arg(long, default_value_t = SplitConfig::default().hn_far)]
    pub hn_far: usize,
    #[arg(long, default_value_t = SplitConfig::default().easy_negatives)]
    pub easy_negatives: usize,
    /// Also export per-query true/false review folders here
    #[arg(long)]
    pub review_dir: Option<PathBuf>,
    /// Non-positives listed per positive in review folders
    #[arg(long, default_value_t = 3)]
    pub review_ratio: usize,
    /// JSON object mapping ids to image files
    #[arg(long)]
    pub image_paths: Option<PathBuf>,
    /// Copy image files into the review folders
    #[arg(long)]
    pub copy_images: bool,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub captions: PathBuf,
    /// JSON object mapping caption ids to image ids
    #[arg(long)]
    pub caption_map: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = MinerConfig::default().top_n)]
    pub top_n: usize,
    /// Caption similarity a reference must exceed
    #[arg(long, default_value_t = MinerConfig::default().threshold)]
    pub threshold: f64,
    #[arg(long, default_value_t = MinerConfig::default().per_query_cap)]
    pub per_query_cap: usize,
    /// Fraction of captions used as queries
    #[arg(long, default_value_t = MinerConfig::default().sample_fraction)]
    pub sample_fraction: f64,
}

#[derive(Debug, Args)]
pub struct TrainCtrArgs {
    /// Mined triplets (JSON lines)
    #[arg(long)]
    pub triplets: PathBuf,
    /// Frozen image corpus holding references and targets
    #[arg(long)]
    pub images: PathBuf,
    /// Caption embeddings, the query texts of the triplets
    #[arg(long)]
    pub captions: PathBuf,
    /// Destination FCTR file; the JSON sidecar goes next to it
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = CtrTrainConfig::default().temperature)]
    pub temperature: f64,
    #[arg(long, default_value_t = CtrTrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = CtrTrainConfig::default().learning_rate)]
    pub learning_rate: f64,
    /// Epochs with the fusion gate frozen
    #[arg(long, default_value_t = CtrTrainConfig::default().stage_a_epochs)]
    pub stage_a_epochs: usize,
    /// Epochs training every parameter
    #[arg(long, default_value_t = CtrTrainConfig::default().stage_b_epochs)]
    pub stage_b_epochs: usize,
    /// Fused width, 0 for the image dimension
    #[arg(long, default_value_t = 0)]
    pub d_out: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ComposerArg {
    MeanPool,
    Direct,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProGradArg {
    Projection,
    Gate,
}

#[derive(Debug, Args)]
pub struct RefinePlArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub texts: PathBuf,
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Refine only this query
    #[arg(long)]
    pub query: Option<String>,
    /// Positives and hard negatives taken from each few-shot set
    #[arg(long, default_value_t = 16)]
    pub shots: usize,
    #[arg(long, default_value_t = TrainConfig::default().iterations)]
    pub iterations: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub learning_rate: f64,
    /// Context rows of the mean-pool composer
    #[arg(long, default_value_t = TrainConfig::default().context_len)]
    pub context_len: usize,
    #[arg(long, value_enum, default_value_t = ComposerArg::MeanPool)]
    pub composer: ComposerArg,
    #[arg(long, default_value_t = TrainConfig::default().kl_coefficient)]
    pub kl_coefficient: f64,
    #[arg(long, value_enum, default_value_t = ProGradArg::Projection)]
    pub prograd: ProGradArg,
    #[arg(long, default_value_t = TrainConfig::default().init_a, allow_negative_numbers = true)]
    pub init_a: f64,
    #[arg(long, default_value_t = TrainConfig::default().init_b, allow_negative_numbers = true)]
    pub init_b: f64,
    #[arg(long, default_value_t = TrainConfig::default().init_noise)]
    pub init_noise: f64,
    #[arg(long, default_value_t = ClassWeights::default().hard_positive)]
    pub weight_positive: f64,
    #[arg(long, default_value_t = ClassWeights::default().hard_negative)]
    pub weight_hard_negative: f64,
    #[arg(long, default_value_t = ClassWeights::default().easy_negative)]
    pub weight_easy_negative: f64,
    #[arg(long, default_value_t = fsir_core::pipeline::RUN_DEPTH)]
    pub depth: usize,
    /// Run file; stdout without it
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for one trained-prompt JSON per query
    #[arg(long)]
    pub prompts_dir: Option<PathBuf>,
}

impl RefinePlArgs {
    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            iterations: self.iterations,
            context_len: self.context_len,
            composer: match self.composer {
                ComposerArg::MeanPool => ComposerKind::MeanPool,
                ComposerArg::Direct => ComposerKind::Direct,
            },
            weights: ClassWeights {
                hard_positive: self.weight_positive,
                hard_negative: self.weight_hard_negative,
                easy_negative: self.weight_easy_negative,
            },
            kl_coefficient: self.kl_coefficient,
            prograd_mode: match self.prograd {
                ProGradArg::Projection => ProGradMode::Projection,
                ProGradArg::Gate => ProGradMode::Gate,
            },
            seed,
            init_a: self.init_a,
            init_b: self.init_b,
            init_noise: self.init_noise,
        }
    }
}

#[derive(Debug, Args)]
pub struct SelectRefsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub texts: PathBuf,
    /// Trained FCTR model
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub query: Option<String>,
    #[arg(long, default_value_t = SelectionConfig::default().max_refs)]
    pub max_refs: usize,
    /// Top individually scored candidates considered for combination
    #[arg(long, default_value_t = SelectionConfig::default().candidate_m)]
    pub candidate_m: usize,
    /// Try every subset of the candidates instead of greedy growth
    #[arg(long)]
    pub exhaustive: bool,
    /// Cutoff of the validation AP
    #[arg(long, default_value_t = SelectionConfig::default().k)]
    pub k: usize,
    #[arg(long, default_value_t = fsir_core::pipeline::RUN_DEPTH)]
    pub depth: usize,
    /// Selection report; stdout without it
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run file ranked with the selected references
    #[arg(long)]
    pub run_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = fsir_core::eval::DEFAULT_K)]
    pub k: usize,
    /// Report JSON; without it the JSON goes to stdout and the table to stderr
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportStatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Directory holding session files
    #[arg(long, default_value = "fsir-state")]
    pub state_dir: PathBuf,
    /// Preload: manifest
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Preload: image corpus, when no manifest is given
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Preload: text embeddings; nothing is preloaded without them
    #[arg(long)]
    pub texts: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub ctr_model: Option<PathBuf>,
    /// Preload: JSON object mapping image ids to thumbnail paths
    #[arg(long)]
    pub image_paths: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().queries)]
    pub queries: usize,
    #[arg(long, default_value_t = SynthConfig::default().dimension)]
    pub dimension: usize,
    #[arg(long, default_value_t = SynthConfig::default().positives_per_query)]
    pub positives_per_query: usize,
    #[arg(long, default_value_t = SynthConfig::default().hn_clusters)]
    pub hn_clusters: usize,
    #[arg(long, default_value_t = SynthConfig::default().hn_per_cluster)]
    pub hn_per_cluster: usize,
    #[arg(long, default_value_t = SynthConfig::default().hn_center_cosine)]
    pub hn_center_cosine: f64,
    #[arg(long, default_value_t = SynthConfig::default().spread)]
    pub spread: f64,
    #[arg(long, default_value_t = SynthConfig::default().text_bias)]
    pub text_bias: f64,
    #[arg(long, default_value_t = SynthConfig::default().text_noise)]
    pub text_noise: f64,
    #[arg(long, default_value_t = SynthConfig::default().modality_offset)]
    pub modality_offset: f64,
    #[arg(long, default_value_t = SynthConfig::default().easy_negatives)]
    pub easy_negatives: usize,
    #[arg(long, default_value_t = SynthConfig::default().ctr_concepts)]
    pub ctr_concepts: usize,
    #[arg(long, default_value_t = SynthConfig::default().ctr_images_per_concept)]
    pub ctr_images_per_concept: usize,
    #[arg(long, default_value_t = SynthConfig::default().caption_noise)]
    pub caption_noise: f64,
}

/// Global flags that take a value, for locating the subcommand in argv.
const VALUED_GLOBALS: [&str; 4] = ["--seed", "--log-level", "--threads", "--config"];

fn toml_to_args(table: &toml::Table, out: &mut Vec<OsString>) -> std::result::Result<(), String> {
    for (key, value) in table {
        if value.is_table() {
            continue;
        }
        let flag = format!("--{}", key.replace('_', "-"));
        let values = match value {
            toml::Value::Array(items) => items.clone(),
            v => vec![v.clone()],
        };
        for v in values {
            match v {
                toml::Value::Boolean(true) => out.push(flag.clone().into()),
                toml::Value::Boolean(false) => {}
                toml::Value::String(s) => out.extend([flag.clone().into(), s.into()]),
                toml::Value::Integer(i) => out.extend([flag.clone().into(), i.to_string().into()]),
                toml::Value::Float(f) => out.extend([flag.clone().into(), f.to_string().into()]),
                other => return Err(format!("config key `{key}` has unsupported value {other}")),
            }
        }
    }
    Ok(())
}

/// Inserts the flags of a `--config` TOML file ahead of the command-line
/// flags, so that the latter override them.
pub fn expand_config(args: Vec<OsString>) -> std::result::Result<Vec<OsString>, String> {
    let mut config = None;
    let mut sub = None;
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if let Some(p) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else if a == "--config" {
            config = args.get(i + 1).map(PathBuf::from);
        }
        if sub.is_none() && !a.starts_with('-') {
            sub = Some(i);
        }
        if VALUED_GLOBALS.contains(&a.as_ref()) {
            i += 1;
        }
        i += 1;
    }
    let (Some(config), Some(sub)) = (config, sub) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&config).map_err(|e| format!("{}: {e}", config.display()))?;
    let table: toml::Table = text.parse().map_err(|e| format!("{}: {e}", config.display()))?;
    let name = args[sub].to_string_lossy().into_owned();
    let mut out = vec![args[0].clone(), args[sub].clone()];
    toml_to_args(&table, &mut out)?;
    if let Some(toml::Value::Table(t)) = table.get(&name) {
        toml_to_args(t, &mut out)?;
    }
    out.extend(args[1..sub].iter().cloned());
    out.extend(args[sub + 1..].iter().cloned());
    Ok(out)
}

pub fn command() -> clap::Command {
    let mut cmd = Cli::command().args_override_self(true);
    for name in Command::NAMES {
        cmd = cmd.mut_subcommand(name, |s| s.args_override_self(true));
    }
    cmd
}

pub fn parse(args: Vec<OsString>) -> std::result::Result<Cli, clap::Error> {
    let matches = command().try_get_matches_from(args)?;
    Cli::from_arg_matches(&matches)
}

fn init_logging(level: &str) {
    use tracing_subscriber::filter::LevelFilter;
    let filter: LevelFilter = level.parse().unwrap_or(LevelFilter::WARN);
    let builder = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(filter);
    let _ = if filter >= LevelFilter::DEBUG {
        builder.json().try_init()
    } else {
        builder.try_init()
    };
}

/// Parses `args`, runs the subcommand and returns the exit status.
pub fn run(args: impl IntoIterator<Item = OsString>) -> i32 {
    let args = match expand_config(args.into_iter().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match parse(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging(&cli.log_level);
    if cli.threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            1
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let seed = cli.seed;
    match &cli.command {
        Command::ImportEmbeddings(a) => import_embeddings(a),
        Command::IndexBuild(a) => index_build(a, seed),
        Command::Search(a) => search(a),
        Command::Split(a) => split(a, seed),
        Command::Mine(a) => mine(a, seed),
        Command::TrainCtr(a) => train(a, seed),
        Command::RefinePl(a) => refine_pl(a, seed),
        Command::SelectRefs(a) => select_refs(a),
        Command::Evaluate(a) => evaluate(a),
        Command::ReportStats(a) => stats(a),
        Command::Serve(a) => serve(a, cli.threads),
        Command::SynthBench(a) => synth_bench(a, seed),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            use std::io::Write;
            std::io::stdout()
                .write_all(text.as_bytes())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn pretty<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn import_embeddings(a: &ImportArgs) -> Result<()> {
    let mut corpus = fsem::read(&a.input)?;
    if let Some(m) = a.modality {
        let records = corpus
            .into_records()
            .into_iter()
            .map(|r| EmbeddingRecord::new(r.id, r.vector, m.into()))
            .collect::<fsir_core::Result<Vec<_>>>()?;
        corpus = EmbeddingCorpus::new(records.first().map_or(2, |r| r.vector.len()), records)?;
    }
    fsem::write(&corpus, &a.output)?;
    tracing::info!(records = corpus.len(), dimension = corpus.dimension(), "imported");
    Ok(())
}

fn index_build(a: &IndexArgs, seed: u64) -> Result<()> {
    let corpus = fsem::read(&a.corpus)?;
    let index = match a.kind {
        IndexKind::Exact => AnyIndex::Exact(ExactIndex::build(&corpus)?),
        IndexKind::Clustered => {
            let clusters = match a.clusters {
                0 => ((corpus.len() as f64).sqrt().round() as usize).max(1),
                c => c,
            };
            let probes = match a.probes {
                0 => (clusters / 4).max(1),
                p => p,
            };
            AnyIndex::Clustered(ClusteredIndex::build(&corpus, clusters, seed)?.with_probe_count(probes)?)
        }
    };
    fsix::write(&index, &corpus, &a.output)
}

fn open_index(path: Option<&Path>, corpus: &EmbeddingCorpus) -> Result<AnyIndex> {
    match path {
        Some(p) => fsix::read(p, corpus),
        None => Ok(AnyIndex::Exact(ExactIndex::build(corpus)?)),
    }
}

#[derive(Serialize)]
struct SearchOutput<'a> {
    query_text: &'a str,
    k: usize,
    results: Vec<ScoredId>,
}

fn search(a: &SearchArgs) -> Result<()> {
    let bench = match (&a.manifest, &a.images) {
        (Some(m), _) => Some(manifest::load(m)?),
        (None, Some(_)) => None,
        (None, None) => return Err(Error::Invalid("--manifest or --images is required".into())),
    };
    let images = match (&bench, &a.images) {
        (Some(b), _) => b.corpus.clone(),
        (None, Some(p)) => fsem::read(p)?,
        (None, None) => unreachable!("checked above"),
    };
    let texts = fsem::read(&a.texts)?;
    let index = open_index(a.index.as_deref(), &images)?;
    if let Some(text) = &a.text_id {
        let q = text_embedding(&texts, text)?;
        let results = index
            .search(q, a.k)?
            .into_iter()
            .map(|h| ScoredId {
                id: h.id,
                score: h.similarity.value(),
                thumbnail: None,
            })
            .collect();
        return emit(
            a.out.as_deref(),
            &pretty(&SearchOutput {
                query_text: text,
                k: a.k,
                results,
            })?,
        );
    }
    let Some(bench) = bench else {
        return Err(Error::Invalid("--all needs --manifest".into()));
    };
    let m = &bench.manifest;
    let run = m
        .queries
        .par_iter()
        .map(|q| zero_shot_run(&index, m, &texts, q, a.depth))
        .collect::<fsir_core::Result<Vec<_>>>()?;
    emit(a.out.as_deref(), &runs::runs_to_string(&run))
}

/// `corpus` as written into a manifest stored at `manifest_path`.
fn corpus_reference(corpus: &Path, manifest_path: &Path) -> String {
    let same_dir = corpus.parent().unwrap_or(Path::new("")) == manifest_path.parent().unwrap_or(Path::new(""));
    match (same_dir, corpus.file_name()) {
        (true, Some(name)) => name.to_string_lossy().into_owned(),
        _ => std::path::absolute(corpus)
            .unwrap_or_else(|_| corpus.to_path_buf())
            .to_string_lossy()
            .into_owned(),
    }
}

fn split(a: &SplitArgs, seed: u64) -> Result<()> {
    let gtqr: Vec<QueryEntry> = serde_json::from_slice(&std::fs::read(&a.gtqr).map_err(|e| Error::io(&a.gtqr, e))?)?;
    let corpus = fsem::read(&a.corpus)?;
    let cfg = SplitConfig {
        fsr_positives: a.fsr_positives,
        hn_near: a.hn_near,
        hn_far: a.hn_far,
        easy_negatives: a.easy_negatives,
    };
    let out = smart_split(&gtqr, &corpus, seed, &cfg)?;
    let m = BenchmarkManifest {
        corpus: corpus_reference(&a.corpus, &a.out),
        queries: out.test,
        fsr: out.fsr,
    };
    m.validate(&corpus)?;
    manifest::write(&m, &a.out)?;
    if let Some(dir) = &a.review_dir {
        let paths = a.image_paths.as_deref().map(manifest::read_image_paths).transpose()?;
        let folders = review_folders(&m, &corpus, a.review_ratio)?;
        manifest::export_review_folders(&folders, dir, paths.as_ref(), a.copy_images)?;
    }
    Ok(())
}

fn mine(a: &MineArgs, seed: u64) -> Result<()> {
    let images = fsem::read(&a.images)?;
    let captions = fsem::read(&a.captions)?;
    let map = triplets::read_caption_map(&a.caption_map)?;
    let items = triplets::captioned_items(&images, &captions, &map)?;
    let cfg = MinerConfig {
        top_n: a.top_n,
        threshold: a.threshold,
        per_query_cap: a.per_query_cap,
        sample_fraction: a.sample_fraction,
        seed,
    };
    let mined = mine_triplets(&items, &cfg)?;
    tracing::info!(triplets = mined.len(), "mined");
    let mut buf = Vec::new();
    triplets::write_triplets(&mut buf, &mined).map_err(|e| Error::io("<memory>", e))?;
    emit(a.out.as_deref(), &String::from_utf8(buf).expect("JSON is UTF-8"))
}

fn train(a: &TrainCtrArgs, seed: u64) -> Result<()> {
    let images = fsem::read(&a.images)?;
    let captions = fsem::read(&a.captions)?;
    let mined = triplets::read_triplets(&a.triplets)?;
    let rows = mined
        .iter()
        .map(|t| {
            Ok(CtrTriplet {
                text: text_embedding(&captions, &t.query_text_id)?.to_vec(),
                reference: images.vector(&t.reference_id)?.to_vec(),
                target_id: t.target_id.clone(),
            })
        })
        .collect::<fsir_core::Result<Vec<_>>>()?;
    let cfg = CtrTrainConfig {
        d_out: (a.d_out > 0).then_some(a.d_out),
        temperature: a.temperature,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        stage_a_epochs: a.stage_a_epochs,
        stage_b_epochs: a.stage_b_epochs,
        seed,
    };
    let before = fsem::digest(&images)?;
    let outcome = train_ctr(&rows, &images, captions.dimension(), images.dimension(), &cfg)?;
    let after = fsem::digest(&images)?;
    if before != after {
        return Err(Error::Invalid("image corpus changed during training".into()));
    }
    tracing::info!(alpha = outcome.model.alpha, corpus = %after, "trained");
    let sidecar = CtrSidecar {
        config: cfg,
        triplets: rows.len(),
        excluded_duplicates: outcome.excluded_duplicates,
        loss_trajectory: outcome.loss_trajectory,
        external_digest: after,
    };
    models::write_ctr(&outcome.model, &sidecar, &a.out)
}

fn selected_queries<'a>(m: &'a BenchmarkManifest, only: Option<&str>) -> Result<Vec<&'a QueryEntry>> {
    match only {
        None => Ok(refinable_queries(m)),
        Some(id) => {
            let q = m.query(id).ok_or_else(|| fsir_core::Error::UnknownQuery(id.into()))?;
            Ok(vec![q])
        }
    }
}

fn refine_pl(a: &RefinePlArgs, seed: u64) -> Result<()> {
    let bench = manifest::load(&a.manifest)?;
    let texts = fsem::read(&a.texts)?;
    let index = open_index(a.index.as_deref(), &bench.corpus)?;
    let cfg = a.train_config(seed);
    let m = &bench.manifest;
    let results = selected_queries(m, a.query.as_deref())?
        .par_iter()
        .map(|q| pl_run(&index, m, &bench.corpus, &texts, q, a.shots, &cfg, a.depth))
        .collect::<fsir_core::Result<Vec<_>>>()?;
    if let Some(dir) = &a.prompts_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (run, outcome) in &results {
            let file = PromptFile::new(&run.query_id, &outcome.state, &cfg, outcome.loss_trajectory.clone());
            let path = dir.join(format!("{}.json", run.query_id));
            std::fs::write(&path, pretty(&file)?).map_err(|e| Error::io(&path, e))?;
        }
    }
    let run: Vec<_> = results.into_iter().map(|(r, _)| r).collect();
    emit(a.out.as_deref(), &runs::runs_to_string(&run))
}

fn select_refs(a: &SelectRefsArgs) -> Result<()> {
    let bench = manifest::load(&a.manifest)?;
    let texts = fsem::read(&a.texts)?;
    let model = models::read_ctr(&a.model)?;
    let index = open_index(a.index.as_deref(), &bench.corpus)?;
    let cfg = SelectionConfig {
        max_refs: a.max_refs,
        candidate_m: a.candidate_m,
        exhaustive: a.exhaustive,
        k: a.k,
    };
    let m = &bench.manifest;
    let results = selected_queries(m, a.query.as_deref())?
        .par_iter()
        .map(|q| ctr_run(&index, m, &bench.corpus, &texts, &model, q, &cfg, a.depth))
        .collect::<fsir_core::Result<Vec<_>>>()?;
    let (run, selections): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    if let Some(p) = &a.run_out {
        std::fs::write(p, runs::runs_to_string(&run)).map_err(|e| Error::io(p, e))?;
    }
    emit(a.out.as_deref(), &models::selection_report_json(&selections)?)
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let m = manifest::read(&a.manifest)?;
    let run = runs::read_runs(&a.run)?;
    let report = evaluate_run(&run, &m, a.k)?;
    let json = runs::report_json(&report)?;
    let table = runs::report_table(&report);
    match &a.out {
        Some(p) => {
            std::fs::write(p, json).map_err(|e| Error::io(p, e))?;
            emit(None, &table)
        }
        None => {
            eprint!("{table}");
            emit(None, &json)
        }
    }
}

fn stats(a: &ReportStatsArgs) -> Result<()> {
    let bench = manifest::load(&a.manifest)?;
    let s = report_stats(&bench.manifest, &bench.corpus);
    let table = format!(
        "images                       {}\n\
         test images                  {}\n\
         few-shot images              {}\n\
         queries                      {}\n\
         queries with test positives  {}\n\
         mean ground truths per query {:.2}\n\
         mean hard negatives per query {:.2}\n\
         mean query tokens            {:.2}\n",
        s.image_total,
        s.test_image_total,
        s.fsr_image_total,
        s.query_count,
        s.test_query_count,
        s.mean_ground_truths,
        s.mean_hard_negatives,
        s.mean_query_tokens
    );
    match &a.out {
        Some(p) => {
            std::fs::write(p, pretty(&s)?).map_err(|e| Error::io(p, e))?;
            emit(None, &table)
        }
        None => {
            eprint!("{table}");
            emit(None, &pretty(&s)?)
        }
    }
}

fn serve(a: &ServeArgs, threads: usize) -> Result<()> {
    let state = service::AppState::new(&a.state_dir)?;
    if let Some(texts) = &a.texts {
        state.set_loaded(service::load_corpus(&CorpusRequest {
            manifest: a.manifest.clone(),
            images: a.images.clone(),
            texts: texts.clone(),
            index: a.index.clone(),
            ctr_model: a.ctr_model.clone(),
            image_paths: a.image_paths.clone(),
        })?);
    }
    let mut rt = tokio::runtime::Builder::new_multi_thread();
    if threads > 0 {
        rt.worker_threads(threads);
    }
    let rt = rt.enable_all().build().map_err(|e| Error::io("<runtime>", e))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .map_err(|e| Error::io(&a.addr, e))?;
        tracing::info!(addr = %a.addr, "listening");
        service::serve(listener, state).await.map_err(|e| Error::io(&a.addr, e))
    })
}

fn synth_bench(a: &SynthArgs, seed: u64) -> Result<()> {
    let cfg = SynthConfig {
        seed,
        queries: a.queries,
        dimension: a.dimension,
        positives_per_query: a.positives_per_query,
        hn_clusters: a.hn_clusters,
        hn_per_cluster: a.hn_per_cluster,
        hn_center_cosine: a.hn_center_cosine,
        spread: a.spread,
        text_bias: a.text_bias,
        text_noise: a.text_noise,
        modality_offset: a.modality_offset,
        easy_negatives: a.easy_negatives,
        ctr_concepts: a.ctr_concepts,
        ctr_images_per_concept: a.ctr_images_per_concept,
        caption_noise: a.caption_noise,
    };
    let b = generate(&cfg)?;
    write_synth(&b, &a.out)
}

/// Files of a generated benchmark: `images.fsem`, `texts.fsem`,
/// `manifest.json`, `gtqr.json`, `ctr_images.fsem`, `ctr_captions.fsem` and
/// `caption_map.json`.
pub fn write_synth(b: &fsir_core::synth::SyntheticBenchmark, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fsem::write(&b.images, &dir.join("images.fsem"))?;
    fsem::write(&b.texts, &dir.join("texts.fsem"))?;
    manifest::write(&b.manifest, &dir.join("manifest.json"))?;
    let gtqr = dir.join("gtqr.json");
    std::fs::write(&gtqr, pretty(&b.ground_truth)?).map_err(|e| Error::io(&gtqr, e))?;
    fsem::write(&b.ctr_images()?, &dir.join("ctr_images.fsem"))?;
    let captions = b
        .ctr_pool
        .iter()
        .map(|c| EmbeddingRecord::new(c.caption_id.clone(), c.caption_embedding.clone(), Modality::Text))
        .collect::<fsir_core::Result<Vec<_>>>()?;
    fsem::write(
        &EmbeddingCorpus::new(b.texts.dimension(), captions)?,
        &dir.join("ctr_captions.fsem"),
    )?;
    let map: BTreeMap<&str, &str> = b
        .ctr_pool
        .iter()
        .map(|c| (c.caption_id.as_str(), c.image_id.as_str()))
        .collect();
    let path = dir.join("caption_map.json");
    std::fs::write(&path, pretty(&map)?).map_err(|e| Error::io(&path, e))
}
