use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use imgfact::claim::{load_claims, load_gold_labels};
use imgfact::generation::EvidenceFormatMode;
use imgfact::pipeline::{
    build_all_stores, embedder_from_config, load_evidence_scores, read_journal, read_submission, score_report,
    write_diagnostics, write_submission, BatchOptions, CostLedger, Journal, Pipeline, PipelineConfig, PipelineError,
    Providers,
};
use imgfact::embedding::{EmbeddingProvider, HashingEmbedder};
use imgfact::replay::Recorder;

#[derive(Parser)]
#[command(name = "imgfact", version, about = "Retrieval-augmented fact checking of image-text claims")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk and embed knowledge-store documents into per-claim vector stores.
    BuildStore(BuildStoreArgs),
    /// Run the pipeline over a claims file and write a submission.
    Run(RunArgs),
    /// Score a submission against gold labels.
    Score(ScoreArgs),
    /// Summarize costs recorded in a run journal.
    CostReport(CostReportArgs),
}

#[derive(Args)]
struct BuildStoreArgs {
    #[arg(long)]
    config: PathBuf,
    /// Use the offline hashing embedder, as replay runs do.
    #[arg(long, value_name = "FIXTURE_DIR")]
    replay: Option<PathBuf>,
    /// Only build stores for these claim ids.
    #[arg(long = "claim-id", value_name = "ID")]
    claim_ids: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// answer_only, qa or declarative; overrides the config.
    #[arg(long)]
    mode: Option<EvidenceFormatMode>,
    /// Claims file; overrides the config.
    #[arg(long)]
    claims: Option<PathBuf>,
    /// Submission file. Diagnostics and the journal are written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Serve every provider from recorded fixtures in this directory.
    #[arg(long, value_name = "FIXTURE_DIR", conflicts_with = "record")]
    replay: Option<PathBuf>,
    /// Record live provider traffic into this directory as replay fixtures.
    #[arg(long, value_name = "FIXTURE_DIR")]
    record: Option<PathBuf>,
    /// Claims processed at once; overrides the config.
    #[arg(long)]
    parallel: Option<usize>,
    /// Journal path (default: <out>.journal.jsonl).
    #[arg(long)]
    journal: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Submission file to score.
    #[arg(long)]
    out: PathBuf,
    /// Gold labels file.
    #[arg(long)]
    gold: PathBuf,
    /// Per-claim evidence scores computed elsewhere.
    #[arg(long)]
    evidence_scores: Option<PathBuf>,
}

#[derive(Args)]
struct CostReportArgs {
    /// Submission file whose journal should be read.
    #[arg(long, required_unless_present = "journal")]
    out: Option<PathBuf>,
    #[arg(long)]
    journal: Option<PathBuf>,
}

/// Errors in what the user supplied, reported with exit code 2.
#[derive(Debug)]
struct UsageError(anyhow::Error);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&describe(&self.0))
    }
}

impl std::error::Error for UsageError {}

/// The error and its causes, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !text.contains(&msg) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&msg);
        }
    }
    text
}

/// Prints to stdout; a closed pipe is not an error.
fn emit(text: &str) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}


fn usage(e: impl Into<anyhow::Error>) -> anyhow::Error {
    anyhow::Error::new(UsageError(e.into()))
}

fn pipeline_error(e: PipelineError) -> anyhow::Error {
    match e {
        PipelineError::Config(_) | PipelineError::Dataset(_) | PipelineError::Fewshot(_) | PipelineError::Invalid(_) => {
            usage(e)
        }
        other => other.into(),
    }
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    out.with_file_name(name)
}

fn load_config(path: &Path) -> anyhow::Result<PipelineConfig> {
    PipelineConfig::load(path).map_err(usage)
}

fn build_store(args: BuildStoreArgs) -> anyhow::Result<ExitCode> {
    let config = load_config(&args.config)?;
    config.validate().map_err(usage)?;
    let embedder: Box<dyn EmbeddingProvider> = match &args.replay {
        Some(_) => Box::new(HashingEmbedder::new(config.providers.embedding.dim)),
        None => embedder_from_config(&config).map_err(usage)?,
    };
    let only: Option<BTreeSet<String>> = (!args.claim_ids.is_empty()).then(|| args.claim_ids.into_iter().collect());
    let built = build_all_stores(&config, embedder.as_ref(), only.as_ref()).map_err(pipeline_error)?;
    for (claim_id, chunks) in &built {
        emit(&format!("{claim_id}\t{chunks} chunks"))?;
    }
    eprintln!("built {} stores", built.len());
    Ok(ExitCode::SUCCESS)
}

fn run(args: RunArgs) -> anyhow::Result<ExitCode> {
    let mut config = load_config(&args.config)?;
    if let Some(mode) = args.mode {
        config.mode = mode;
    }
    if let Some(claims) = args.claims {
        config.paths.claims = claims;
    }
    if let Some(n) = args.parallel {
        config.parallelism.claims = n;
    }
    config.validate().map_err(usage)?;
    let claims = load_claims(&config.paths.claims).map_err(usage)?;

    let recorder = args.record.as_ref().map(|_| Arc::new(Recorder::new()));
    let providers = match &args.replay {
        Some(dir) => Providers::replay(dir, &config).map_err(usage)?,
        None => Providers::live(&config, recorder.clone()).map_err(usage)?,
    };
    let pipeline = Pipeline::new(&config, &providers).map_err(pipeline_error)?;
    let journal_path = args.journal.unwrap_or_else(|| sibling(&args.out, ".journal.jsonl"));
    let (journal, done) = Journal::open(&journal_path)?;
    let options = BatchOptions { parallel: config.parallelism.claims, cancel: None };
    let outcome = pipeline.run_batch(&claims, &journal, done, &options);

    if let (Some(dir), Some(rec)) = (&args.record, &recorder) {
        rec.save(dir).with_context(|| format!("saving recordings to {}", dir.display()))?;
    }
    let outcome = outcome.map_err(pipeline_error)?;
    write_submission(&args.out, &outcome.outputs).with_context(|| format!("writing {}", args.out.display()))?;
    let diag_path = sibling(&args.out, ".diagnostics.json");
    write_diagnostics(&diag_path, &outcome.diagnostics_report())
        .with_context(|| format!("writing {}", diag_path.display()))?;

    let failed = outcome.outputs.iter().filter(|o| o.failure.is_some()).count();
    let summary = outcome.ledger.summary();
    eprintln!(
        "{} claims ({} resumed, {} failed); cost {} USD, {} USD discounted",
        outcome.outputs.len(),
        outcome.resumed,
        failed,
        summary.total.usd_total,
        summary.total.usd_total_discounted
    );
    Ok(if outcome.complete { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn score(args: ScoreArgs) -> anyhow::Result<ExitCode> {
    let outputs = read_submission(&args.out).map_err(|e| usage(anyhow::anyhow!(e)))?;
    let gold = load_gold_labels(&args.gold).map_err(usage)?;
    let scores = args
        .evidence_scores
        .as_deref()
        .map(load_evidence_scores)
        .transpose()
        .map_err(|e| usage(anyhow::anyhow!(e)))?;
    let report = score_report(&outputs, &gold, scores.as_ref()).map_err(usage)?;
    emit(&serde_json::to_string_pretty(&report)?)?;
    Ok(ExitCode::SUCCESS)
}

fn cost_report(args: CostReportArgs) -> anyhow::Result<ExitCode> {
    let path = match (args.journal, args.out) {
        (Some(j), _) => j,
        (None, Some(out)) => sibling(&out, ".journal.jsonl"),
        (None, None) => unreachable!("clap requires one of --out/--journal"),
    };
    let records = read_journal(&path).map_err(usage)?;
    let ledger = CostLedger { entries: records.into_iter().map(|r| r.cost).collect() };
    emit(&serde_json::to_string_pretty(&ledger.summary())?)?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();

    let result = match cli.command {
        Command::BuildStore(a) => build_store(a),
        Command::Run(a) => run(a),
        Command::Score(a) => score(a),
        Command::CostReport(a) => cost_report(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
