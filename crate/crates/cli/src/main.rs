//! `faxis`: synthesize data, train per-axis heads, embed, index, query,
//! evaluate and serve.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

mod config;

use std::ffi::OsString;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use faxis::eval::{preference_flip_report, report_render, EvalOptions, QuerySet};
use faxis::io::manifest::load_features;
use faxis::io::store::{load_index, save_index, write_embeddings};
use faxis::io::synth::{generate_synthetic, write_synthetic, Mixing, SynthConfig};
use faxis::io::load_embeddings;
use faxis::train::{embed, schema_for_heads, train_axis, write_log, Objective, ProjectionHead, TrainConfig, TrainSet};
use faxis::{Error, Index, ItemFilter, ItemRecord, QueryWeights};
use faxis_service::{run_query, AppState, QueryRequest};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Parser)]
#[command(name = "faxis", version, about = "Factor-partitioned embeddings with signed multi-axis retrieval")]
struct Cli {
    /// JSON object of flag values for the subcommand; command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a planted-factor synthetic dataset.
    Synth(SynthArgs),
    /// Train one projection head.
    Train(TrainArgs),
    /// Apply heads to pooled features and write an embeddings manifest.
    Embed(EmbedArgs),
    /// Build an index directory from an embeddings manifest.
    BuildIndex(BuildIndexArgs),
    /// Query an index; prints one JSON result per line.
    Query(QueryArgs),
    /// Write a preference-flip report for one or more weight settings.
    Eval(EvalArgs),
    /// Serve an index over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    speakers: usize,
    #[arg(long, default_value_t = 25)]
    sentences: usize,
    #[arg(long, default_value_t = 3)]
    dialects: usize,
    #[arg(long, default_value_t = 1)]
    repetitions: usize,
    /// Pooled feature dimension.
    #[arg(long, default_value_t = 64)]
    feature_dim: usize,
    #[arg(long, default_value_t = 16)]
    semantic_dim: usize,
    #[arg(long, default_value_t = 16)]
    speaker_dim: usize,
    #[arg(long, default_value_t = 4)]
    dialect_dim: usize,
    /// Gaussian noise added to each latent prototype before renormalizing.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// orthogonal or random_full_rank
    #[arg(long, default_value = "orthogonal")]
    mixing: Mixing,
    /// Scale of the speaker latent block before mixing.
    #[arg(long, default_value_t = 3.0)]
    speaker_scale: f64,
    /// Speakers tagged with the `query` corpus; the rest are `reference`.
    #[arg(long, default_value_t = 1)]
    query_speakers: usize,
    /// Pair each item with another item sharing this label.
    #[arg(long)]
    positive_label: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Features manifest.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    axis: String,
    /// distill, infonce_pairs or supcon_labels
    #[arg(long, default_value = "distill")]
    objective: Objective,
    /// Head output dimension (defaults to the teacher dimension for distill).
    #[arg(long)]
    dim: Option<usize>,
    /// Label field for contrastive objectives and batch collision checks.
    #[arg(long)]
    label_key: Option<String>,
    #[arg(long, default_value_t = faxis::train::DEFAULT_TEMPERATURE)]
    temperature: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weight of the alignment orthogonality penalty.
    #[arg(long, default_value_t = 1.0)]
    ortho_lambda: f64,
    /// Learn a bias vector.
    #[arg(long)]
    bias: bool,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-step loss log (JSON lines).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    /// Features manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Head checkpoints in schema order; repeat per axis.
    #[arg(long = "head", required = true)]
    heads: Vec<PathBuf>,
    /// Embeddings manifest to write; the blob goes next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BuildIndexArgs {
    /// Embeddings manifest.
    #[arg(long)]
    embeddings: PathBuf,
    /// Index directory to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FilterArgs {
    /// Keep only items from this corpus.
    #[arg(long)]
    corpus: Option<String>,
    /// Drop items from this corpus.
    #[arg(long)]
    corpus_ne: Option<String>,
}

impl FilterArgs {
    fn filter(&self) -> Option<ItemFilter> {
        (self.corpus.is_some() || self.corpus_ne.is_some()).then(|| ItemFilter {
            corpus: self.corpus.clone(),
            corpus_ne: self.corpus_ne.clone(),
            ..ItemFilter::default()
        })
    }
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    query_id: String,
    /// Comma-separated axis=value pairs, e.g. semantic=1,speaker_id=-1.
    #[arg(long, default_value = "")]
    weights: QueryWeights,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Keep the query item in its own ranking.
    #[arg(long)]
    include_self: bool,
    #[command(flatten)]
    filter: FilterArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    index: PathBuf,
    /// Weight setting as axis=value pairs; repeat for several settings.
    #[arg(long, required = true)]
    weights: Vec<QueryWeights>,
    /// Queries are the index items of this corpus (all items if omitted).
    #[arg(long)]
    query_corpus: Option<String>,
    /// Keep each query in its own ranking.
    #[arg(long)]
    include_self: bool,
    /// Seed of the run that produced the index, recorded in the report.
    #[arg(long)]
    seed: Option<u64>,
    /// Report JSON path (printed to standard output if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    index: PathBuf,
    /// Defaults to $FAXIS_PORT or 7878.
    #[arg(long)]
    port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Also serve static UI files from this directory.
    #[arg(long, value_name = "DIR", num_args = 0..=1, default_missing_value = "webui/dist")]
    ui: Option<PathBuf>,
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::UnknownAxis { .. } | Error::ConfigInvalid(_) => 1,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let args: Vec<OsString> = std::env::args_os().collect();
    ExitCode::from(run(args))
}

fn run(args: Vec<OsString>) -> u8 {
    let args = match config::expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Embed(a) => embed_cmd(a),
        Command::BuildIndex(a) => build_index(a),
        Command::Query(a) => query(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn synth(a: SynthArgs) -> CmdResult {
    let cfg = SynthConfig {
        n_speakers: a.speakers,
        n_sentences: a.sentences,
        n_dialects: a.dialects,
        repetitions: a.repetitions,
        feature_dim: a.feature_dim,
        semantic_dim: a.semantic_dim,
        speaker_dim: a.speaker_dim,
        dialect_dim: a.dialect_dim,
        noise_sigma: a.noise,
        mixing: a.mixing,
        speaker_scale: a.speaker_scale,
        query_speakers: a.query_speakers,
        positive_label: a.positive_label,
        seed: a.seed,
    };
    let data = generate_synthetic(&cfg)?;
    write_synthetic(&data, &a.out)?;
    eprintln!("wrote {} items to {}", data.items.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> CmdResult {
    let cfg = TrainConfig {
        axis: a.axis,
        objective: a.objective,
        dim: a.dim,
        label_key: a.label_key,
        temperature: a.temperature,
        learning_rate: a.lr,
        momentum: a.momentum,
        batch_size: a.batch_size,
        steps: a.steps,
        seed: a.seed,
        orthogonality_lambda: a.ortho_lambda,
        bias: a.bias,
    };
    cfg.validate()?;
    let ds = load_features(&a.manifest)?;
    let set = TrainSet::new(ds.features, ds.examples)?;
    eprintln!(
        "training `{}` ({:?}) on {} items for {} steps",
        cfg.axis,
        cfg.objective,
        set.len(),
        cfg.steps
    );
    let out = train_axis(&cfg, &set)?;
    if let Some(last) = out.log.last() {
        eprintln!("final loss {:.6}", last.loss);
    }
    out.head.save(&a.out)?;
    if let Some(log) = &a.log {
        write_log(&out.log, log)?;
    }
    Ok(())
}

fn embed_cmd(a: EmbedArgs) -> CmdResult {
    let heads = a
        .heads
        .iter()
        .map(ProjectionHead::load)
        .collect::<Result<Vec<_>, _>>()?;
    let schema = Arc::new(schema_for_heads(&heads)?);
    let ds = load_features(&a.manifest)?;
    let records = ds
        .items
        .iter()
        .zip(&ds.features)
        .map(|(m, f)| {
            Ok(ItemRecord {
                id: m.id.clone(),
                corpus: m.corpus.clone(),
                labels: m.labels.clone(),
                embedding: embed(&heads, &schema, f)?,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let blob = blob_name_for(&a.out);
    write_embeddings(&a.out, &blob, &schema, &records)?;
    eprintln!("embedded {} items with schema {}", records.len(), schema);
    Ok(())
}

fn blob_name_for(manifest: &Path) -> String {
    let stem = manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("embeddings");
    format!("{stem}.fpeb")
}

fn build_index(a: BuildIndexArgs) -> CmdResult {
    let (_, records) = load_embeddings(&a.embeddings)?;
    let index = Index::build(records)?;
    save_index(&index, &a.out)?;
    eprintln!("indexed {} items into {}", index.len(), a.out.display());
    Ok(())
}

fn check_weights(index: &Index, w: &QueryWeights) -> CmdResult {
    w.resolve(index.schema())?;
    Ok(())
}

fn query(a: QueryArgs) -> CmdResult {
    let index = load_index(&a.index)?;
    check_weights(&index, &a.weights)?;
    let req = QueryRequest {
        query_id: Some(a.query_id),
        query_embedding: None,
        weights: a.weights,
        k: a.k,
        exclude_self: !a.include_self,
        filter: a.filter.filter(),
    };
    let resp = run_query(&index, &req).map_err(|e| Failure {
        code: if e.status().is_client_error() && e.status().as_u16() != 404 { 1 } else { 2 },
        message: e.to_string(),
    })?;
    for row in &resp.results {
        println!("{}", serde_json::to_string(row).expect("row serializes"));
    }
    Ok(())
}

/// Everything that determines a report's numbers, hashed into its metadata.
#[derive(Serialize)]
struct EvalIdentity<'a> {
    settings: &'a [QueryWeights],
    query_corpus: &'a Option<String>,
    exclude_self: bool,
    seed: Option<u64>,
    index_sha256: String,
}

fn index_digest(dir: &Path) -> Result<String, Error> {
    let mut h = Sha256::new();
    for name in [faxis::io::store::INDEX_MANIFEST, faxis::io::store::INDEX_BLOB] {
        let path = dir.join(name);
        h.update(std::fs::read(&path).map_err(|e| Error::io(&path, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn eval(a: EvalArgs) -> CmdResult {
    let index = load_index(&a.index)?;
    for w in &a.weights {
        check_weights(&index, w)?;
    }
    let filter = a.query_corpus.as_ref().map(|c| ItemFilter {
        corpus: Some(c.clone()),
        ..ItemFilter::default()
    });
    let qs = QuerySet::from_index(&index, filter.as_ref())?;
    let opts = EvalOptions {
        exclude_self: !a.include_self,
    };
    let mut report = preference_flip_report(&qs, &index, &a.weights, opts)?;
    let identity = EvalIdentity {
        settings: &a.weights,
        query_corpus: &a.query_corpus,
        exclude_self: opts.exclude_self,
        seed: a.seed,
        index_sha256: index_digest(&a.index)?,
    };
    let canonical = serde_json::to_string(&identity).expect("identity serializes");
    report.metadata.seed = a.seed;
    report.metadata.config_hash = Some(hex::encode(Sha256::digest(canonical.as_bytes())));

    eprint!("{}", report_render(&report));
    let mut json = report.to_json();
    json.push('\n');
    match &a.out {
        Some(path) => std::fs::write(path, json).map_err(|e| Error::io(path, e))?,
        None => print!("{json}"),
    }
    Ok(())
}

fn serve(a: ServeArgs) -> CmdResult {
    let port = match a.port {
        Some(p) => p,
        None => faxis_service::port_from_env().map_err(Failure::usage)?,
    };
    let index = load_index(&a.index)?;
    eprintln!("loaded {} items", index.len());
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure {
        code: 2,
        message: e.to_string(),
    })?;
    runtime
        .block_on(faxis_service::serve(SocketAddr::new(a.host, port), AppState::with_index(index), a.ui))
        .map_err(|e| Failure {
            code: 2,
            message: format!("server: {e}"),
        })
}
