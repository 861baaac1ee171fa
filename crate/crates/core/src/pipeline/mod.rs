//! Per-claim orchestration and resumable batch runs.

mod config;
pub mod cost;
mod journal;
mod output;
mod score;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

pub use config::{
    secret, ConfigError, EmbeddingConfig, EmbeddingKind, FewshotConfig, LlmConfig, Parallelism, Paths, PipelineConfig,
    PriceTable, ProvidersConfig, RisConfig, ScraperConfig, ScraperKind,
};
pub use cost::{CostBreakdown, CostEntry, CostLedger, CostSummary};
pub use journal::{read_journal, Journal, JournalError, JournalRecord};
pub use output::{
    compare_claim_ids, read_submission, submission_json, write_atomic, write_diagnostics, write_submission,
    ClaimDiagnostics, ClaimOutput, DiagnosticsReport, FailureRecord, SUBMISSION_SCHEMA,
};
pub use score::{load_evidence_scores, score_report, AlignmentError, LabelCounts, ScoreReport, EVIDENCE_THRESHOLD};

use crate::claim::{Claim, DatasetError};
use crate::embedding::{EmbeddingError, EmbeddingProvider, HashingEmbedder, HttpEmbedder};
use crate::fewshot::{load_train_set, FewshotError, FewshotSelector, TrainExample};
use crate::generation::{
    attach_thumbnails, call_llm, parse_response, to_submission_evidence, EvidenceFormatMode, LlmError, LlmProvider,
    OpenAiChat,
};
use crate::image_retrieval::scrape::{BuiltinScraper, BuiltinScraperConfig, FirecrawlScraper};
use crate::image_retrieval::thumbs::HttpThumbnailFetcher;
use crate::image_retrieval::{
    DateProvider, HeuristicDater, ImageRetrieval, ImageRetriever, RisProvider, ScrapeProvider, ThumbnailCache,
    ThumbnailFetcher,
};
use crate::image_retrieval::ris::SerperLens;
use crate::knowledge_store::{
    build_store_with, knowledge_files, load_knowledge_file, load_store, save_store, store_path, StoreError, VectorStore,
};
use crate::prompt::{assign_source_ids, PromptBundle, PromptError, PromptOptions, PromptTemplate};
use crate::provider::{FailureKind, Permits, ProviderError};
use crate::replay::{Recorder, Recording, ReplayError, ReplayLlm, ReplayRis, ReplayScraper, ReplayThumbnails};
use crate::text_retrieval::{retrieve_text_sources, RetrievalError, ScoredChunk};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Fewshot(#[from] FewshotError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("building store for claim {claim_id}: {source}")]
    Embedding {
        claim_id: String,
        #[source]
        source: EmbeddingError,
    },
    #[error("run aborted: {0}")]
    Aborted(ProviderError),
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// The external services one run talks to.
pub struct Providers {
    pub embedder: Box<dyn EmbeddingProvider>,
    pub ris: Box<dyn RisProvider>,
    pub scraper: Box<dyn ScrapeProvider>,
    pub dater: Box<dyn DateProvider>,
    pub llm: Box<dyn LlmProvider>,
    pub thumbnails: ThumbnailCache,
}

impl Providers {
    /// Fixture-backed providers. Embeddings always use the hashing
    /// embedder so replay needs no service.
    pub fn replay(dir: &Path, config: &PipelineConfig) -> Result<Self, ReplayError> {
        Ok(Self {
            embedder: Box::new(HashingEmbedder::new(config.providers.embedding.dim)),
            ris: Box::new(ReplayRis::load(dir)?),
            scraper: Box::new(ReplayScraper::load(dir)?),
            dater: Box::new(HeuristicDater::default()),
            llm: Box::new(ReplayLlm::load(dir)?),
            thumbnails: ThumbnailCache::new(Box::new(ReplayThumbnails::load(dir)?)),
        })
    }

    /// Live clients built from config, with keys read from the environment.
    /// With a recorder, RIS, scrape, LLM and thumbnail traffic is captured.
    pub fn live(config: &PipelineConfig, recorder: Option<Arc<Recorder>>) -> Result<Self, ConfigError> {
        let p = &config.providers;
        let embedder = embedder_from_config(config)?;
        let client_err = |e: ProviderError| ConfigError::Invalid(e.to_string());
        let ris: Box<dyn RisProvider> = Box::new(SerperLens::new(&p.ris.endpoint, secret(&p.ris.api_key_env)?).map_err(client_err)?);
        let scraper: Box<dyn ScrapeProvider> = match p.scraper.kind {
            ScraperKind::Firecrawl => {
                Box::new(FirecrawlScraper::new(&p.scraper.endpoint, secret(&p.scraper.api_key_env)?).map_err(client_err)?)
            }
            ScraperKind::Builtin => Box::new(BuiltinScraper::new(BuiltinScraperConfig::default()).map_err(client_err)?),
        };
        let llm: Box<dyn LlmProvider> =
            Box::new(OpenAiChat::new(&p.llm.endpoint, &p.llm.model, secret(&p.llm.api_key_env)?).map_err(client_err)?);
        let fetcher: Box<dyn ThumbnailFetcher> = Box::new(HttpThumbnailFetcher::new().map_err(client_err)?);

        let (ris, scraper, llm, fetcher) = match recorder {
            None => (ris, scraper, llm, fetcher),
            Some(r) => (
                Box::new(Recording { inner: ris, recorder: r.clone() }) as Box<dyn RisProvider>,
                Box::new(Recording { inner: scraper, recorder: r.clone() }) as Box<dyn ScrapeProvider>,
                Box::new(Recording { inner: llm, recorder: r.clone() }) as Box<dyn LlmProvider>,
                Box::new(Recording { inner: fetcher, recorder: r }) as Box<dyn ThumbnailFetcher>,
            ),
        };
        Ok(Self {
            embedder,
            ris,
            scraper,
            dater: Box::new(HeuristicDater::default()),
            llm,
            thumbnails: ThumbnailCache::new(fetcher),
        })
    }
}

/// The configured embedding client on its own, for building stores.
pub fn embedder_from_config(config: &PipelineConfig) -> Result<Box<dyn EmbeddingProvider>, ConfigError> {
    let e = &config.providers.embedding;
    Ok(match e.kind {
        EmbeddingKind::Hashing => Box::new(HashingEmbedder::new(e.dim)),
        EmbeddingKind::Http => {
            let key = e.api_key_env.as_deref().map(secret).transpose()?;
            Box::new(
                HttpEmbedder::new(&e.endpoint, &e.model, key, config.llm_retry)
                    .map_err(|err| ConfigError::Invalid(err.to_string()))?,
            )
        }
    })
}

/// Result of one claim.
#[derive(Debug, Clone, PartialEq)]
pub struct ClaimRun {
    pub output: ClaimOutput,
    pub diagnostics: ClaimDiagnostics,
    pub cost: CostEntry,
}

pub fn template_for(config: &PipelineConfig) -> Result<PromptTemplate, PromptError> {
    match (&config.paths.template, config.mode) {
        (Some(path), _) => PromptTemplate::from_file(path),
        (None, EvidenceFormatMode::Declarative) => Ok(PromptTemplate::declarative()),
        (None, _) => Ok(PromptTemplate::question_answer()),
    }
}

/// Loaded datasets and shared state for running claims.
pub struct Pipeline<'a> {
    config: &'a PipelineConfig,
    providers: &'a Providers,
    fewshot: Option<FewshotSelector>,
    prompt: PromptOptions,
    scrape_permits: Permits,
}

fn elapsed_ms(t: Instant) -> u64 {
    t.elapsed().as_millis() as u64
}

fn auth_error(e: &RetrievalError) -> Option<&ProviderError> {
    match e {
        RetrievalError::Embedding(EmbeddingError::Provider(p)) if p.kind == FailureKind::Auth => Some(p),
        _ => None,
    }
}

impl<'a> Pipeline<'a> {
    pub fn new(config: &'a PipelineConfig, providers: &'a Providers) -> Result<Self, PipelineError> {
        let corpus = config.paths.train_set.as_deref().map(load_train_set).transpose()?;
        Self::with_fewshot(config, providers, corpus)
    }

    /// Like [`Pipeline::new`] but with an in-memory few-shot corpus.
    pub fn with_fewshot(
        config: &'a PipelineConfig,
        providers: &'a Providers,
        corpus: Option<Vec<TrainExample>>,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let prompt = PromptOptions { template: template_for(config)?, max_source_chars: config.max_source_chars };
        Ok(Self {
            config,
            providers,
            fewshot: corpus.map(|c| FewshotSelector::new(c, config.fewshot.params())),
            prompt,
            scrape_permits: Permits::new(config.parallelism.scrapes),
        })
    }

    /// The claim's vector store: a saved one if present, else built from
    /// its knowledge-store file, else `None`.
    fn vector_store(&self, claim_id: &str) -> Result<Option<VectorStore>, String> {
        let paths = &self.config.paths;
        if let Some(dir) = &paths.store_dir {
            let path = store_path(dir, claim_id);
            if path.exists() {
                return load_store(&path).map(Some).map_err(|e| e.to_string());
            }
        }
        let Some(dir) = &paths.knowledge_dir else { return Ok(None) };
        let Some(file) = ["jsonl", "json"].iter().map(|ext| dir.join(format!("{claim_id}.{ext}"))).find(|p| p.exists())
        else {
            return Ok(None);
        };
        let docs = load_knowledge_file(&file).map_err(|e| e.to_string())?;
        build_store_with(claim_id, &docs, self.providers.embedder.as_ref(), &self.config.store)
            .map(Some)
            .map_err(|e| e.to_string())
    }

    fn text_stage(&self, claim: &Claim, diag: &mut ClaimDiagnostics) -> Result<Vec<ScoredChunk>, ProviderError> {
        let store = match self.vector_store(&claim.claim_id) {
            Ok(Some(s)) => s,
            Ok(None) => {
                diag.warnings.push("no knowledge store for claim; text sources empty".into());
                return Ok(Vec::new());
            }
            Err(e) => {
                diag.warnings.push(format!("knowledge store unavailable: {e}"));
                return Ok(Vec::new());
            }
        };
        match retrieve_text_sources(&store, &claim.text, self.providers.embedder.as_ref(), &self.config.retrieval) {
            Ok(v) => Ok(v),
            Err(e) => match auth_error(&e) {
                Some(p) => Err(p.clone()),
                None => {
                    diag.warnings.push(format!("text retrieval failed: {e}"));
                    Ok(Vec::new())
                }
            },
        }
    }

    fn image_stage(&self, claim: &Claim) -> ImageRetrieval {
        if claim.images.is_empty() {
            return ImageRetrieval::default();
        }
        ImageRetriever {
            ris: self.providers.ris.as_ref(),
            scraper: self.providers.scraper.as_ref(),
            dater: self.providers.dater.as_ref(),
            permits: &self.scrape_permits,
            options: self.config.image,
        }
        .retrieve(claim)
    }

    /// Runs one claim end to end. `Err` means the run must stop
    /// (credentials rejected); every other problem is recorded in the
    /// returned output or diagnostics.
    pub fn run_claim(&self, claim: &Claim) -> Result<ClaimRun, ProviderError> {
        let start = Instant::now();
        let mut diag = ClaimDiagnostics { claim_id: claim.claim_id.clone(), ..Default::default() };
        let mut usage = cost::Usage::default();

        let (text, images, text_ms, image_ms) = std::thread::scope(|s| {
            let image_job = s.spawn(|| {
                let t = Instant::now();
                let r = self.image_stage(claim);
                (r, elapsed_ms(t))
            });
            let t = Instant::now();
            let mut text_diag = ClaimDiagnostics::default();
            let text = self.text_stage(claim, &mut text_diag);
            let text_ms = elapsed_ms(t);
            let (images, image_ms) = image_job.join().expect("image retrieval panicked");
            ((text, text_diag.warnings), images, text_ms, image_ms)
        });
        diag.timings_ms.insert("text_retrieval".into(), text_ms);
        diag.timings_ms.insert("image_retrieval".into(), image_ms);
        let (text, text_warnings) = text;
        diag.warnings.extend(text_warnings);
        let text = text?;

        usage.ris_searches = images.ris_searches;
        usage.scraped_pages = images.scraped_pages;
        diag.warnings.extend(images.warnings);
        for f in &images.failures {
            diag.warnings.push(format!("image {}: {}", f.image_index, f.error));
            diag.provider_errors.push(f.error.clone());
        }
        if let Some(f) = images.failures.iter().find(|f| f.error.kind == FailureKind::Auth) {
            return Err(f.error.clone());
        }
        diag.text_sources = text.len();
        diag.image_sources = images.sets.iter().map(|s| s.sources.len()).sum();

        let finish = |output: ClaimOutput, mut diag: ClaimDiagnostics, usage: cost::Usage| {
            diag.timings_ms.insert("total".into(), elapsed_ms(start));
            let cost = CostEntry::new(&claim.claim_id, usage, &self.config.prices);
            Ok(ClaimRun { output, diagnostics: diag, cost })
        };

        let fewshot = match &self.fewshot {
            Some(sel) => sel.select(&claim.text, self.config.fewshot.n_claims).unwrap_or_else(|e| {
                diag.warnings.push(format!("few-shot selection failed: {e}"));
                Vec::new()
            }),
            None => Vec::new(),
        };
        let bundle = assign_source_ids(&text, &images.sets)
            .and_then(|blocks| PromptBundle::build(claim, blocks, &fewshot, &self.prompt));
        let bundle = match bundle {
            Ok(b) => b,
            Err(e) => return finish(ClaimOutput::failed(&claim.claim_id, "prompt", e.to_string()), diag, usage),
        };

        let t = Instant::now();
        let mut last_error = String::new();
        let mut result = None;
        for attempt in 0..2 {
            diag.llm_attempts += 1;
            let response = match call_llm(&bundle, self.providers.llm.as_ref(), &self.config.llm_retry) {
                Ok(r) => r,
                Err(LlmError::Provider(e)) if e.kind == FailureKind::Auth => return Err(e),
                Err(e) => {
                    if let LlmError::Provider(p) = &e {
                        diag.provider_errors.push(p.clone());
                    }
                    last_error = e.to_string();
                    break;
                }
            };
            usage.input_tokens += response.usage.input_tokens;
            usage.output_tokens += response.usage.output_tokens;
            let parsed = parse_response(&response.text, &bundle.source_table).map_err(|e| e.to_string());
            let converted = parsed.and_then(|mut p| {
                let thumb_warnings = attach_thumbnails(&mut p.qa_pairs, &bundle.source_table, &self.providers.thumbnails);
                let evidence = to_submission_evidence(&p.qa_pairs, self.config.mode).map_err(|e| e.to_string())?;
                Ok((p, thumb_warnings, evidence))
            });
            match converted {
                Ok(done) => {
                    result = Some(done);
                    break;
                }
                Err(e) => {
                    diag.warnings.push(format!("LLM attempt {} unusable: {e}", attempt + 1));
                    last_error = e;
                }
            }
        }
        diag.timings_ms.insert("generation".into(), elapsed_ms(t));

        let Some((parsed, thumb_warnings, evidence)) = result else {
            return finish(ClaimOutput::failed(&claim.claim_id, "generation", last_error), diag, usage);
        };
        for w in parsed.warnings.iter().chain(&thumb_warnings) {
            diag.warnings.push(serde_json::to_string(w).expect("warnings serialize"));
        }
        diag.likert = Some(parsed.likert);
        let output = ClaimOutput {
            claim_id: claim.claim_id.clone(),
            questions: parsed.qa_pairs.iter().map(|p| p.question.clone()).collect(),
            evidence,
            label: Some(parsed.verdict),
            justification: Some(parsed.justification),
            failure: None,
        };
        finish(output, diag, usage)
    }

    /// Runs every claim not already in the journal, `parallel` at a time,
    /// appending each result to the journal as it completes.
    pub fn run_batch(
        &self,
        claims: &[Claim],
        journal: &Journal,
        done: Vec<JournalRecord>,
        options: &BatchOptions,
    ) -> Result<BatchOutcome, PipelineError> {
        let mut ids = BTreeSet::new();
        if let Some(dup) = claims.iter().find(|c| !ids.insert(c.claim_id.as_str())) {
            return Err(PipelineError::Invalid(format!("duplicate claim id {:?}", dup.claim_id)));
        }
        let mut records: BTreeMap<String, JournalRecord> =
            done.into_iter().filter(|r| ids.contains(r.claim_id.as_str())).map(|r| (r.claim_id.clone(), r)).collect();
        let resumed = records.len();
        let pending: Vec<&Claim> = claims.iter().filter(|c| !records.contains_key(&c.claim_id)).collect();

        let next = AtomicUsize::new(0);
        let stop = AtomicBool::new(false);
        let fresh: Mutex<Vec<JournalRecord>> = Mutex::new(Vec::new());
        let abort: Mutex<Option<PipelineError>> = Mutex::new(None);
        let workers = options.parallel.max(1).min(pending.len().max(1));
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    if stop.load(Ordering::SeqCst) || options.cancel.as_ref().is_some_and(|c| c.load(Ordering::SeqCst)) {
                        return;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(claim) = pending.get(i) else { return };
                    let outcome = self.run_claim(claim).map_err(PipelineError::Aborted).and_then(|run| {
                        let rec = JournalRecord::new(run.output, run.cost, run.diagnostics);
                        journal.append(&rec)?;
                        Ok(rec)
                    });
                    match outcome {
                        Ok(rec) => {
                            tracing::info!(claim_id = %rec.claim_id, failed = rec.output.failure.is_some(), "claim done");
                            fresh.lock().unwrap().push(rec);
                        }
                        Err(e) => {
                            stop.store(true, Ordering::SeqCst);
                            abort.lock().unwrap().get_or_insert(e);
                            return;
                        }
                    }
                });
            }
        });

        for rec in fresh.into_inner().unwrap() {
            records.insert(rec.claim_id.clone(), rec);
        }
        if let Some(e) = abort.into_inner().unwrap() {
            return Err(e);
        }
        let complete = records.len() == claims.len();
        let mut ordered: Vec<JournalRecord> = records.into_values().collect();
        ordered.sort_by(|a, b| compare_claim_ids(&a.claim_id, &b.claim_id));
        let mut ledger = CostLedger::default();
        let mut outputs = Vec::with_capacity(ordered.len());
        let mut diagnostics = Vec::with_capacity(ordered.len());
        for r in ordered {
            ledger.push(r.cost);
            outputs.push(r.output);
            diagnostics.push(r.diagnostics);
        }
        Ok(BatchOutcome { outputs, diagnostics, ledger, resumed, complete })
    }
}

#[derive(Debug, Clone, Default)]
pub struct BatchOptions {
    pub parallel: usize,
    /// Checked between claims; when set, workers finish their current claim
    /// and stop.
    pub cancel: Option<Arc<AtomicBool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    /// Sorted by claim id.
    pub outputs: Vec<ClaimOutput>,
    pub diagnostics: Vec<ClaimDiagnostics>,
    pub ledger: CostLedger,
    /// Claims taken from the journal instead of being run.
    pub resumed: usize,
    /// Every input claim has an output (false after cancellation).
    pub complete: bool,
}

impl BatchOutcome {
    pub fn diagnostics_report(&self) -> DiagnosticsReport {
        DiagnosticsReport {
            claims: self.diagnostics.clone(),
            costs: self.ledger.entries.clone(),
            cost_summary: self.ledger.summary(),
        }
    }
}

/// Builds and saves a vector store for every knowledge-store file, or only
/// for `only` when given. Returns `(claim_id, chunk count)` per store.
pub fn build_all_stores(
    config: &PipelineConfig,
    embedder: &dyn EmbeddingProvider,
    only: Option<&BTreeSet<String>>,
) -> Result<Vec<(String, usize)>, PipelineError> {
    let knowledge_dir = config
        .paths
        .knowledge_dir
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid("paths.knowledge_dir is required to build stores".into()))?;
    let store_dir = config
        .paths
        .store_dir
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid("paths.store_dir is required to build stores".into()))?;
    let mut built = Vec::new();
    for (claim_id, file) in knowledge_files(knowledge_dir)? {
        if only.is_some_and(|o| !o.contains(&claim_id)) {
            continue;
        }
        let docs = load_knowledge_file(&file)?;
        let store = build_store_with(&claim_id, &docs, embedder, &config.store)
            .map_err(|source| PipelineError::Embedding { claim_id: claim_id.clone(), source })?;
        save_store(&store, &store_path(store_dir, &claim_id))?;
        built.push((claim_id, store.len()));
    }
    Ok(built)
}
