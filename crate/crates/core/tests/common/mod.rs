#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use imgfact::prompt::{SourceBlock, SourceKind};

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn read_fixture(rel: &str) -> String {
    std::fs::read_to_string(fixture_dir().join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

/// Text sources 1..=7 and image sources 11..=19.
pub fn source_table() -> BTreeMap<u32, SourceBlock> {
    let mut t = BTreeMap::new();
    for id in 1..=7u32 {
        t.insert(
            id,
            SourceBlock {
                source_id: id,
                url: format!("https://text.example/{id}"),
                body: format!("text {id}"),
                kind: SourceKind::Text { context_before: String::new(), context_after: String::new() },
            },
        );
    }
    for id in 11..=19u32 {
        t.insert(
            id,
            SourceBlock {
                source_id: id,
                url: format!("https://page.example/{id}"),
                body: format!("page {id}"),
                kind: SourceKind::Image {
                    image_index: 1,
                    title: format!("Title {id}"),
                    page_date: None,
                    image_url: format!("https://thumb.example/{id}.jpg"),
                },
            },
        );
    }
    t
}

/// Expected outcome class for each response fixture.
pub const RESPONSE_FIXTURES: &[(&str, &str)] = &[
    ("valid.txt", "ok"),
    ("fenced.txt", "ok"),
    ("fenced_with_prose.txt", "ok"),
    ("likert_numeric.txt", "ok"),
    ("verdict_claim_suffix.txt", "ok"),
    ("unknown_source.txt", "ok"),
    ("missing_source.txt", "ok"),
    ("too_many_pairs.txt", "ok"),
    ("tag_outside_evidence.txt", "ok"),
    ("missing_verdict.txt", "schema"),
    ("missing_questions.txt", "schema"),
    ("missing_answer.txt", "schema"),
    ("bad_label.txt", "schema"),
    ("bad_answer_type.txt", "schema"),
    ("likert_out_of_range.txt", "schema"),
    ("likert_missing_label.txt", "schema"),
    ("truncated.txt", "parse"),
    ("not_json.txt", "parse"),
];

pub fn replay_dir() -> PathBuf {
    fixture_dir().join("replay")
}

pub const GOLDEN_PROMPT: &str = "golden/prompt_qa.txt";

/// System prompt for replay claim 1 with a fixed set of text sources,
/// two image sets and BM25-selected few-shot examples.
pub fn golden_prompt() -> String {
    use imgfact::claim::load_claims;
    use imgfact::fewshot::{load_train_set, select_fewshot};
    use imgfact::image_retrieval::{filter_and_cap, RisResult, ScrapedResult};
    use imgfact::knowledge_store::{Chunk, EmbeddedChunk};
    use imgfact::prompt::{assign_source_ids, render_system_prompt, PromptOptions};
    use imgfact::text_retrieval::ScoredChunk;

    let claim = load_claims(&replay_dir().join("claims.json")).unwrap().remove(0);
    let text: Vec<ScoredChunk> = [
        ("https://factcheck.example/old-photo", "The viral photo of a flooded street was first published in 2019.", "", "It shows a flood in another city."),
        ("https://weather.example/march-2024", "March 2024 in Valencia was dry with little rainfall.", "", ""),
        ("https://news.example/valencia-floods", "Streets were flooded in the old town.", "Heavy rain hit Valencia in October 2024.\n", ""),
    ]
    .iter()
    .enumerate()
    .map(|(i, (url, body, before, after))| ScoredChunk {
        index: i,
        entry: EmbeddedChunk {
            chunk: Chunk {
                doc_url: url.to_string(),
                index: 0,
                text: body.to_string(),
                context_before: before.to_string(),
                context_after: after.to_string(),
            },
            vector: vec![1.0],
        },
        score: 1.0 - i as f64 / 10.0,
    })
    .collect();
    let date = |s: &str| chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d").ok();
    let results = |image: usize, items: &[(&str, Option<&str>)]| -> Vec<ScrapedResult> {
        items
            .iter()
            .enumerate()
            .map(|(r, (body, d))| ScrapedResult {
                ris: RisResult {
                    url: format!("https://site{image}-{}.example/story", r + 1),
                    thumbnail_url: format!("https://thumbs.example/{image}/{}.jpg", r + 1),
                    title: format!("Flood story {}", r + 1),
                    rank: r + 1,
                },
                markdown: body.to_string(),
                page_date: d.and_then(date),
            })
            .collect()
    };
    let set1 = filter_and_cap(
        1,
        results(1, &[
            ("The photo shows a 2019 flood in another city.", Some("2019-05-01")),
            ("Published after the claim.", Some("2024-04-01")),
            ("Gallery of flood photos.", None),
        ]),
        claim.date,
        9,
    );
    let set2 = filter_and_cap(2, results(2, &[("Second image source.", Some("2020-01-01"))]), claim.date, 9);
    let blocks = assign_source_ids(&text, &[set1, set2]).unwrap();
    let train = load_train_set(&replay_dir().join("train.json")).unwrap();
    let fewshot = select_fewshot(&claim.text, &train, 2).unwrap();
    render_system_prompt(&claim, &blocks, &fewshot, &PromptOptions::default()).unwrap()
}

/// Counts completions passed through to the wrapped provider.
pub struct CountingLlm {
    pub inner: Box<dyn imgfact::generation::LlmProvider>,
    pub calls: std::sync::Arc<std::sync::atomic::AtomicUsize>,
    /// Set once the given claim text has been answered.
    pub cancel_after: Option<(String, std::sync::Arc<std::sync::atomic::AtomicBool>)>,
}

impl imgfact::generation::LlmProvider for CountingLlm {
    fn complete(
        &self,
        bundle: &imgfact::prompt::PromptBundle,
    ) -> Result<imgfact::generation::LlmResponse, imgfact::generation::LlmError> {
        use std::sync::atomic::Ordering;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let r = self.inner.complete(bundle);
        if let Some((text, flag)) = &self.cancel_after {
            if imgfact::replay::bundle_key(bundle) == *text {
                flag.store(true, Ordering::SeqCst);
            }
        }
        r
    }
}

pub fn replay_config() -> imgfact::pipeline::PipelineConfig {
    imgfact::pipeline::PipelineConfig::load(&replay_dir().join("config.toml")).unwrap()
}

/// Runs the replay fixture batch, optionally swapping the LLM.
pub fn run_replay(
    config: &imgfact::pipeline::PipelineConfig,
    journal: &std::path::Path,
    llm: Option<Box<dyn imgfact::generation::LlmProvider>>,
    options: &imgfact::pipeline::BatchOptions,
) -> Result<imgfact::pipeline::BatchOutcome, imgfact::pipeline::PipelineError> {
    use imgfact::pipeline::{Journal, Pipeline, Providers};
    let mut providers = Providers::replay(&replay_dir(), config).unwrap();
    if let Some(llm) = llm {
        providers.llm = llm;
    }
    let pipeline = Pipeline::new(config, &providers).unwrap();
    let claims = imgfact::claim::load_claims(&config.paths.claims).unwrap();
    let (journal, done) = Journal::open(journal).unwrap();
    pipeline.run_batch(&claims, &journal, done, options)
}

pub fn replay_llm() -> Box<dyn imgfact::generation::LlmProvider> {
    Box::new(imgfact::replay::ReplayLlm::load(&replay_dir()).unwrap())
}
